//! Caption grammar, alignment targets and the synthetic moving-shapes benchmark.

pub mod caption;
mod gen;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use caption::{
    build_y, lenient_spans, parse_seg_caption, serialize_seg_caption, SegCaption, Span, SpanKind,
};
pub use gen::{gen_video, moving_toward, touching, above, left_of, within_gate, ObjectState};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::numerics::Tensor;
use crate::scenegraph::{BBox, PromptBox, SceneGraph};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [f64; 3],
}

pub const COLORS: [NamedColor; 6] = [
    NamedColor { name: "red", rgb: [1.0, 0.0, 0.0] },
    NamedColor { name: "green", rgb: [0.0, 1.0, 0.0] },
    NamedColor { name: "blue", rgb: [0.0, 0.0, 1.0] },
    NamedColor { name: "yellow", rgb: [1.0, 1.0, 0.0] },
    NamedColor { name: "purple", rgb: [0.6, 0.0, 0.8] },
    NamedColor { name: "orange", rgb: [1.0, 0.5, 0.0] },
];

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

/// Relation names used on scene-graph edges.
pub const PREDICATES: [&str; 4] = ["left-of", "above", "touching", "moving-toward"];

/// Non-colour, non-shape words of the caption templates.
pub const TEMPLATE_WORDS: [&str; 11] = [
    "the", "moves", "toward", "touches", "is", "left", "right", "of", "above", "below", "and",
];

/// Synthetic video generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub frames: usize,
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Largest per-frame speed of any object.
    pub max_speed: f64,
    /// Centre distance below which two objects are related at all.
    pub gate: f64,
    /// Width of node and edge feature vectors.
    pub feature_dim: usize,
    /// Caption positions covered by the alignment target.
    pub caption_positions: usize,
    /// Number of (prompt box, caption) pairs to emit per video; the first
    /// is the primary one, extra pairs are added only where an object
    /// satisfies the same neighbourhood constraints.
    pub pairs_per_video: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            frames: 8,
            size: 64,
            min_objects: 2,
            max_objects: 5,
            min_radius: 6.0,
            max_radius: 9.0,
            max_speed: 0.8,
            gate: 30.0,
            feature_dim: 32,
            caption_positions: 16,
            pairs_per_video: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.frames == 0 {
            return bad("frames must be positive");
        }
        if self.size < 32 {
            return bad("frame size must be at least 32");
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects || self.max_objects > COLORS.len() {
            return bad("object count range must lie within 2..=6");
        }
        if !(self.min_radius >= 2.0 && self.max_radius >= self.min_radius && self.max_radius * 4.0 < self.size as f64) {
            return bad("radius range invalid for frame size");
        }
        if !(self.max_speed >= 0.0 && self.gate > 2.0 * self.max_radius + 4.0) {
            return bad("speed or gate invalid");
        }
        if self.feature_dim < gen::FEATURE_WIDTH {
            return bad("feature_dim too small for node/edge features");
        }
        if self.caption_positions < 14 {
            return bad("caption_positions must cover the longest template (14)");
        }
        if self.pairs_per_video == 0 {
            return bad("pairs_per_video must be positive");
        }
        Ok(())
    }
}

/// One prompt box with its tagged caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    /// Central box, taken from the prompt object's first-frame mask.
    pub prompt: PromptBox,
    pub prompt_object: u32,
    pub caption: SegCaption,
    /// Object id of each caption entity (entity 0 is the central one).
    pub entity_objects: Vec<u32>,
    /// First-frame boxes of the associated entities, in entity order.
    pub association_boxes: Vec<BBox>,
}

impl CaptionPair {
    pub fn y(&self, positions: usize) -> Result<Tensor> {
        let order: Vec<usize> = (0..self.entity_objects.len()).collect();
        build_y(&self.caption, &order, positions)
    }
}

/// A rendered clip with everything needed for training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedVideo {
    pub height: usize,
    pub width: usize,
    /// One `H·W·3` row-major RGB buffer per frame, values in [0, 1].
    pub frames: Vec<Vec<f64>>,
    pub object_ids: Vec<u32>,
    /// "colour shape" per object.
    pub object_labels: Vec<String>,
    /// Visible mask of each object in each frame, `[object][frame]`.
    pub masks: Vec<Vec<Mask>>,
    /// Object geometry per frame, `[object][frame]`.
    pub tracks: Vec<Vec<ObjectState>>,
    pub graphs: Vec<SceneGraph>,
    pub pairs: Vec<CaptionPair>,
}

impl AnnotatedVideo {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn primary(&self) -> &CaptionPair {
        &self.pairs[0]
    }

    pub fn object_index(&self, id: u32) -> Option<usize> {
        self.object_ids.iter().position(|&o| o == id)
    }

    /// Per-frame masks of a caption entity of the primary pair.
    pub fn entity_masks(&self, entity: usize) -> Option<&[Mask]> {
        let id = *self.primary().entity_objects.get(entity)?;
        self.object_index(id).map(|i| self.masks[i].as_slice())
    }
}

/// Tight box of the foreground pixels.
pub fn bbox_from_mask(mask: &Mask) -> Result<BBox> {
    mask.bbox()
}

/// Drops the frames before the first one where `object` is visible.
pub fn filter_prefix_frames(v: &AnnotatedVideo, object: u32) -> Result<AnnotatedVideo> {
    let idx = v.object_index(object).ok_or(Error::UnknownNode(object))?;
    let first = v.masks[idx]
        .iter()
        .position(|m| !m.is_empty())
        .ok_or(Error::Empty("filter_prefix_frames: object never visible"))?;
    let mut out = v.clone();
    if first == 0 {
        return Ok(out);
    }
    out.frames.drain(..first);
    for m in &mut out.masks {
        m.drain(..first);
    }
    for t in &mut out.tracks {
        t.drain(..first);
    }
    out.graphs.drain(..first);
    for (i, g) in out.graphs.iter_mut().enumerate() {
        g.frame_index = i;
    }
    for pair in &mut out.pairs {
        if let Some(pi) = out.object_ids.iter().position(|&o| o == pair.prompt_object) {
            if let Ok(b) = out.masks[pi][0].bbox() {
                pair.prompt = PromptBox { bbox: b, frame_index: 0 };
            }
        }
    }
    Ok(out)
}
