//! Synthetic dataset on disk.
//!
//! ```text
//! <root>/manifest.json
//! <root>/videos/<name>/frames.sgt      [T, H, W, 3] SGT1 tensor
//! <root>/videos/<name>/masks.json      RLE per object per frame
//! <root>/videos/<name>/graphs.json     one scene graph per frame
//! <root>/videos/<name>/caption.txt     one tagged caption per pair
//! <root>/videos/<name>/y.json          token-to-entity target per pair
//! <root>/videos/<name>/annotations.json
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use segcap_core::data::{gen_video, parse_seg_caption, serialize_seg_caption, AnnotatedVideo, CaptionPair, GenConfig, ObjectState};
use segcap_core::scenegraph::{BBox, PromptBox, SceneGraph};
use segcap_core::Tensor;

use crate::error::{Error, Result};
use crate::formats::{read_json, write_json, Rle};
use crate::tensor_io::{load_tensor, save_tensor};

pub const DATASET_FORMAT: &str = "segcap-dataset/1";

/// What to generate. Eval videos use indices starting at `eval_offset` so
/// the two splits never share a generator stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub gen: GenConfig,
    pub train_videos: usize,
    pub eval_videos: usize,
    pub eval_offset: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            gen: GenConfig::default(),
            train_videos: 300,
            eval_videos: 60,
            eval_offset: 1_000_000,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        if self.train_videos == 0 || self.eval_videos == 0 {
            return Err(Error::Invalid("both splits need at least one video".into()));
        }
        if (self.train_videos as u64) > self.eval_offset {
            return Err(Error::Invalid("train indices overlap eval_offset".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: DataConfig,
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "eval" => Ok(&self.eval),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PairAnnotation {
    prompt: PromptBox,
    prompt_object: u32,
    entity_objects: Vec<u32>,
    association_boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Annotations {
    height: usize,
    width: usize,
    object_ids: Vec<u32>,
    object_labels: Vec<String>,
    tracks: Vec<Vec<ObjectState>>,
    pairs: Vec<PairAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct YFile {
    positions: usize,
    /// One `[positions][entities]` matrix per caption pair.
    pairs: Vec<Vec<Vec<f64>>>,
}

fn video_name(split: &str, index: u64) -> String {
    format!("{split}-{index:07}")
}

pub fn video_dir(root: &Path, name: &str) -> PathBuf {
    root.join("videos").join(name)
}

/// Prepares `dir` for writing: creates it, or clears it when `force` is set.
/// A non-empty directory without `force` is an error.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Invalid(format!("{} is not empty (use --force)", dir.display())));
            }
            std::fs::remove_dir_all(dir)?;
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Generates both splits under `root`, which must be empty unless `force`.
pub fn generate(cfg: &DataConfig, root: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    prepare_out_dir(root, force)?;
    let jobs: Vec<(String, u64)> = (0..cfg.train_videos as u64)
        .map(|i| (video_name("train", i), i))
        .chain((0..cfg.eval_videos as u64).map(|i| (video_name("eval", i), cfg.eval_offset + i)))
        .collect();
    jobs.par_iter().try_for_each(|(name, index)| -> Result<()> {
        let v = gen_video(&cfg.gen, *index)?;
        write_video(&video_dir(root, name), &v, cfg.gen.caption_positions)
    })?;
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        config: cfg.clone(),
        train: jobs[..cfg.train_videos].iter().map(|j| j.0.clone()).collect(),
        eval: jobs[cfg.train_videos..].iter().map(|j| j.0.clone()).collect(),
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    if !path.exists() {
        return Err(Error::Invalid(format!("no dataset at {} (manifest.json missing)", root.display())));
    }
    let m: Manifest = read_json(&path)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unsupported dataset format {:?}", m.format)));
    }
    Ok(m)
}

/// Loads every video of a split, in manifest order.
pub fn load_split(root: &Path, manifest: &Manifest, split: &str) -> Result<Vec<AnnotatedVideo>> {
    manifest
        .split(split)?
        .par_iter()
        .map(|name| read_video(&video_dir(root, name)))
        .collect()
}

pub fn write_video(dir: &Path, v: &AnnotatedVideo, positions: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (t, h, w) = (v.frames.len(), v.height, v.width);
    let pixels: Vec<f64> = v.frames.iter().flatten().copied().collect();
    save_tensor(&dir.join("frames.sgt"), &Tensor::new(vec![t, h, w, 3], pixels)?)?;
    let masks: Vec<Vec<Rle>> = v.masks.iter().map(|per| per.iter().map(Rle::encode).collect()).collect();
    write_json(&dir.join("masks.json"), &masks)?;
    write_json(&dir.join("graphs.json"), &v.graphs)?;
    let mut text = String::new();
    for p in &v.pairs {
        text.push_str(&serialize_seg_caption(&p.caption));
        text.push('\n');
    }
    std::fs::write(dir.join("caption.txt"), text)?;
    let mut ys = Vec::with_capacity(v.pairs.len());
    for p in &v.pairs {
        let y = p.y(positions)?;
        ys.push((0..y.rows()).map(|r| y.row(r).to_vec()).collect());
    }
    write_json(&dir.join("y.json"), &YFile { positions, pairs: ys })?;
    let ann = Annotations {
        height: h,
        width: w,
        object_ids: v.object_ids.clone(),
        object_labels: v.object_labels.clone(),
        tracks: v.tracks.clone(),
        pairs: v
            .pairs
            .iter()
            .map(|p| PairAnnotation {
                prompt: p.prompt,
                prompt_object: p.prompt_object,
                entity_objects: p.entity_objects.clone(),
                association_boxes: p.association_boxes.clone(),
            })
            .collect(),
    };
    write_json(&dir.join("annotations.json"), &ann)
}

/// Reads a video written by [`write_video`]. The stored `Y` must agree with
/// the one rebuilt from the caption.
pub fn read_video(dir: &Path) -> Result<AnnotatedVideo> {
    let ann: Annotations = read_json(&dir.join("annotations.json"))?;
    let frames_t = load_tensor(&dir.join("frames.sgt"))?;
    let shape = frames_t.shape().to_vec();
    if shape.len() != 4 || shape[1] != ann.height || shape[2] != ann.width || shape[3] != 3 {
        return Err(Error::Format(format!("{}: frames shape {shape:?}", dir.display())));
    }
    let frame_len = ann.height * ann.width * 3;
    let frames: Vec<Vec<f64>> = frames_t.data().chunks(frame_len).map(<[f64]>::to_vec).collect();
    let rles: Vec<Vec<Rle>> = read_json(&dir.join("masks.json"))?;
    let masks = rles
        .iter()
        .map(|per| per.iter().map(Rle::decode).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let graphs: Vec<SceneGraph> = read_json(&dir.join("graphs.json"))?;
    let text = std::fs::read_to_string(dir.join("caption.txt"))?;
    let captions: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if captions.len() != ann.pairs.len() || ann.pairs.is_empty() {
        return Err(Error::Format(format!(
            "{}: {} captions for {} pairs",
            dir.display(),
            captions.len(),
            ann.pairs.len()
        )));
    }
    let t = frames.len();
    if masks.len() != ann.object_ids.len() || masks.iter().any(|m| m.len() != t) || graphs.len() != t {
        return Err(Error::Format(format!("{}: per-frame annotation counts disagree", dir.display())));
    }
    let mut pairs = Vec::with_capacity(ann.pairs.len());
    for (p, line) in ann.pairs.into_iter().zip(captions) {
        pairs.push(CaptionPair {
            prompt: p.prompt,
            prompt_object: p.prompt_object,
            caption: parse_seg_caption(line)?,
            entity_objects: p.entity_objects,
            association_boxes: p.association_boxes,
        });
    }
    let y: YFile = read_json(&dir.join("y.json"))?;
    for (p, stored) in pairs.iter().zip(&y.pairs) {
        let rebuilt = p.y(y.positions)?;
        let same = rebuilt.rows() == stored.len() && (0..rebuilt.rows()).all(|r| rebuilt.row(r) == stored[r].as_slice());
        if !same {
            return Err(Error::Format(format!("{}: y.json disagrees with caption", dir.display())));
        }
    }
    Ok(AnnotatedVideo {
        height: ann.height,
        width: ann.width,
        frames,
        object_ids: ann.object_ids,
        object_labels: ann.object_labels,
        masks,
        tracks: ann.tracks,
        graphs,
        pairs,
    })
}
