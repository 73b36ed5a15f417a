//! The full captioning/segmentation model: encoder, query former, heads and
//! the per-video training objective.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{lenient_spans, AnnotatedVideo, SegCaption};
use crate::error::{Error, Result};
use crate::giqformer::{giq_forward, memory_update, ContextMemory, GiqParams};
use crate::heads::{
    hungarian_match, mask_confidence, CaptionHead, FrameVisual, MaskHead, PixelEncoder, ReferHead, Vocabulary, BOS,
    EOS,
};
use crate::losses::{
    caption_ce, fa_loss, mask_loss, mc_loss, temperature, total_loss, ContrastivePairs, MaskTargets,
};
use crate::mask::Mask;
use crate::metrics::{GtEntity, PredInstance, VideoPrediction, VideoTruth};
use crate::numerics::{l2_normalize_rows, Linear, ParamId, ParamStore, Tape, Tensor, Var};
use crate::ptgformer::{ptg_forward, GraphFeature, PtgParams, PtgVariant};
use crate::scenegraph::{PromptBox, SceneGraph};

const NORM_EPS: f64 = 1e-12;

/// Architecture and objective settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Graph slots `L`.
    pub slots: usize,
    /// Feature width `D`.
    pub dim: usize,
    /// Context memory length `K`.
    pub memory: usize,
    pub heads: usize,
    /// Query-former iterations `R`.
    pub iterations: usize,
    /// Caption positions `L_s` covered by the referring head.
    pub caption_positions: usize,
    /// Longest caption the decoder handles, BOS included.
    pub max_caption_len: usize,
    /// Side of the square patches pooled into visual tokens.
    pub patch: usize,
    /// Weight `λ` of the contrastive term.
    pub lambda: f64,
    pub include_positive_in_denominator: bool,
    pub variant: PtgVariant,
    /// Residual paths around the query-former attention stages.
    pub giq_residual: bool,
    /// Residual path around the temporal cross-attention.
    pub temporal_residual: bool,
    pub matching: Matching,
    /// Treat word embeddings as fixed targets in the contrastive term.
    pub detach_words: bool,
    /// Seed of parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            slots: 8,
            dim: 32,
            memory: 4,
            heads: 4,
            iterations: 2,
            caption_positions: 16,
            max_caption_len: 24,
            patch: 8,
            lambda: 2.0,
            include_positive_in_denominator: false,
            variant: PtgVariant::default(),
            giq_residual: true,
            temporal_residual: false,
            matching: Matching::Frame,
            detach_words: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("slots", self.slots),
            ("dim", self.dim),
            ("heads", self.heads),
            ("iterations", self.iterations),
            ("caption_positions", self.caption_positions),
            ("patch", self.patch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.max_caption_len < 2 {
            return Err(Error::Config("max_caption_len must be at least 2".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// How ground-truth entities are paired with slots during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Minimum-cost matching, independently in every frame.
    #[default]
    Frame,
    /// One minimum-cost matching per clip between entities and node tracks.
    Clip,
    /// Each entity goes to the slot of its own scene-graph node.
    Node,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub ptg: PtgParams,
    pub giq: GiqParams,
    pub pixel: PixelEncoder,
    pub mask: MaskHead,
    pub refer: ReferHead,
    pub caption: CaptionHead,
    pub contrast: ContrastiveHead,
    pub log_tau: ParamId,
}

/// Projections of mask queries and word embeddings into the shared space
/// compared by the contrastive term.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContrastiveHead {
    pub mask_proj: Linear,
    pub word_proj: Linear,
}

impl ContrastiveHead {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(ContrastiveHead {
            mask_proj: Linear::new(store, "mc.mask", dim, dim, rng)?,
            word_proj: Linear::new(store, "mc.word", dim, dim, rng)?,
        })
    }

    /// Unit-norm projected rows of `masks` and `words`.
    pub fn embed(&self, tape: &mut Tape, masks: Var, words: Var) -> Result<(Var, Var)> {
        let m = self.mask_proj.forward(tape, masks)?;
        let w = self.word_proj.forward(tape, words)?;
        Ok((l2_normalize_rows(tape, m, NORM_EPS)?, l2_normalize_rows(tape, w, NORM_EPS)?))
    }
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let (d, h) = (config.dim, config.heads);
        let mut ptg = PtgParams::new(&mut store, d, h, &mut rng)?;
        ptg.temporal.residual = config.temporal_residual;
        let mut giq = GiqParams::new(&mut store, config.slots, d, h, config.iterations, &mut rng)?;
        giq.residual = config.giq_residual;
        let pixel = PixelEncoder::new(&mut store, d, &mut rng)?;
        let mask = MaskHead::new(&mut store, d, &mut rng)?;
        let refer = ReferHead::new(&mut store, d, config.caption_positions, &mut rng)?;
        let caption = CaptionHead::new(&mut store, vocab.len(), d, h, config.max_caption_len, &mut rng)?;
        let contrast = ContrastiveHead::new(&mut store, d, &mut rng)?;
        let log_tau = store.add("loss.log_tau", Tensor::new(vec![1], vec![libm::log(0.07)])?)?;
        Ok(Model {
            config,
            vocab,
            store,
            ptg,
            giq,
            pixel,
            mask,
            refer,
            caption,
            contrast,
            log_tau,
        })
    }
}

/// Ground truth of one video, arranged for the model.
#[derive(Clone, Debug)]
pub struct Sample {
    pub graphs: Vec<SceneGraph>,
    pub prompt: PromptBox,
    pub visuals: Vec<FrameVisual>,
    /// `[entity][frame]` masks.
    pub entity_masks: Vec<Vec<Mask>>,
    /// Scene-graph node id of each entity.
    pub entity_nodes: Vec<u32>,
    pub caption: SegCaption,
    /// BOS, tagged caption tokens, EOS.
    pub caption_ids: Vec<usize>,
    /// `[N_entities, L_s]`.
    pub y: Tensor,
}

impl Sample {
    pub fn from_video(v: &AnnotatedVideo, vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Self> {
        let pair = v.primary();
        let visuals = v
            .frames
            .iter()
            .map(|f| FrameVisual::new(f, v.height, v.width, cfg.patch))
            .collect::<Result<Vec<_>>>()?;
        let entity_masks = (0..pair.entity_objects.len())
            .map(|e| v.entity_masks(e).map(<[Mask]>::to_vec).ok_or(Error::UnknownEntity(e)))
            .collect::<Result<Vec<_>>>()?;
        let tagged = pair.caption.tagged_tokens();
        let mut caption_ids = vec![BOS];
        for t in &tagged {
            caption_ids.push(vocab.id(t)?);
        }
        caption_ids.push(EOS);
        if caption_ids.len() > cfg.max_caption_len + 1 {
            return Err(Error::Config(format!(
                "caption of {} tokens exceeds max_caption_len {}",
                caption_ids.len() - 1,
                cfg.max_caption_len
            )));
        }
        Ok(Sample {
            graphs: v.graphs.clone(),
            prompt: pair.prompt,
            visuals,
            entity_masks,
            entity_nodes: pair.entity_objects.clone(),
            caption: pair.caption.clone(),
            caption_ids,
            y: pair.y(cfg.caption_positions)?,
        })
    }

    pub fn truth(&self) -> VideoTruth {
        let entities = self
            .caption
            .spans
            .iter()
            .map(|s| {
                let phrase = self.caption.phrase(s).to_vec();
                GtEntity {
                    masks: self.entity_masks[s.entity].clone(),
                    class: phrase.last().cloned().unwrap_or_default(),
                    phrase,
                }
            })
            .collect();
        VideoTruth {
            tokens: self.caption.tokens.clone(),
            entities,
        }
    }
}

/// Tape values of one frame's forward pass.
#[derive(Clone, Debug)]
pub struct FrameForward {
    pub graph: GraphFeature,
    pub f_vg: Var,
    pub f_vl: Var,
    /// `[n, D]` projected queries of the valid slots.
    pub queries: Var,
    /// `[n, C]` mask logits per distinct frame colour.
    pub color_logits: Var,
    /// `[n, L_s]` referring probabilities.
    pub v: Var,
}

/// Runs encoder, query former and per-frame heads over a clip.
pub fn forward_frames(
    tape: &mut Tape,
    model: &Model,
    graphs: &[SceneGraph],
    prompt: &PromptBox,
    visuals: &[FrameVisual],
) -> Result<Vec<FrameForward>> {
    let cfg = &model.config;
    if graphs.len() != visuals.len() {
        return Err(Error::shape("forward", "graph and frame counts differ"));
    }
    let feats = ptg_forward(tape, graphs, prompt, &model.ptg, cfg.slots, cfg.dim, cfg.variant)?;
    let mut memory = ContextMemory::new(cfg.memory);
    let mut out = Vec::with_capacity(feats.len());
    for (g, vis) in feats.into_iter().zip(visuals) {
        let colors = tape.constant(vis.colors.clone());
        let pix = model.pixel.forward(tape, colors)?;
        let weights = tape.constant(vis.patch_weights.clone());
        let f_v = tape.matmul(weights, pix)?;
        let giq = giq_forward(tape, &g, f_v, &memory, &model.giq)?;
        memory_update(tape, &mut memory, giq.f_vl, &g.valid)?;
        let n = g.valid_count();
        let idx: Vec<usize> = (0..n).collect();
        let (queries, color_logits, v) = if n == 0 {
            let q = tape.constant(Tensor::zeros(&[0, cfg.dim]));
            let l = tape.constant(Tensor::zeros(&[0, vis.num_colors()]));
            let v = tape.constant(Tensor::zeros(&[0, cfg.caption_positions]));
            (q, l, v)
        } else {
            let slots = tape.gather_rows(giq.f_vg, &idx)?;
            let q = model.mask.queries(tape, slots)?;
            let l = model.mask.logits(tape, q, pix)?;
            let v = model.refer.probs(tape, slots)?;
            (q, l, v)
        };
        out.push(FrameForward {
            graph: g,
            f_vg: giq.f_vg,
            f_vl: giq.f_vl,
            queries,
            color_logits,
            v,
        });
    }
    Ok(out)
}

/// Per-colour foreground/background pixel counts of `mask` in `vis`.
fn color_counts(mask: &Mask, vis: &FrameVisual) -> (Vec<f64>, Vec<f64>) {
    let c = vis.num_colors();
    let (mut fg, mut bg) = (vec![0.0; c], vec![0.0; c]);
    for (p, &col) in vis.pixel_color.iter().enumerate() {
        if mask.bits()[p] {
            fg[col] += 1.0;
        } else {
            bg[col] += 1.0;
        }
    }
    (fg, bg)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Matching cost (pixel BCE + 1 − dice) of each gt row against each slot.
fn matching_cost(logits: &Tensor, gts: &[(Vec<f64>, Vec<f64>)], pixels: f64) -> Vec<f64> {
    let (n, c) = (logits.rows(), logits.cols());
    let mut cost = vec![0.0; gts.len() * n];
    for (k, (fg, bg)) in gts.iter().enumerate() {
        for s in 0..n {
            let row = logits.row(s);
            let (mut bce, mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0, 0.0);
            for j in 0..c {
                let z = row[j];
                let p = sigmoid(z);
                bce += fg[j] * softplus(-z) + bg[j] * softplus(z);
                inter += fg[j] * p;
                sp += (fg[j] + bg[j]) * p;
                sg += fg[j];
            }
            let dice = (2.0 * inter + 1.0) / (sp + sg + 1.0);
            cost[k * n + s] = bce / pixels + 1.0 - dice;
        }
    }
    cost
}

/// Loss terms of one training example.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub caption: Var,
    pub mask: Var,
    pub fa: Var,
    pub mc: Var,
    pub total: Var,
}

/// Builds the full training objective for one sample on `tape`.
///
/// Ground-truth entities are paired with slots as `config.matching`
/// selects; matched slots learn their entity's mask and alignment row,
/// unmatched valid slots learn an empty mask and a zero row. Mask,
/// alignment and contrastive terms are averaged over frames.
pub fn sample_loss(tape: &mut Tape, model: &Model, sample: &Sample) -> Result<LossParts> {
    let cfg = &model.config;
    let frames = forward_frames(tape, model, &sample.graphs, &sample.prompt, &sample.visuals)?;
    let tau = {
        let lt = tape.param(model.log_tau);
        temperature(tape, lt)?
    };
    let words = entity_word_embeddings(tape, model, sample)?;
    let ls = cfg.caption_positions;
    let mut mask_terms = Vec::new();
    let mut fa_terms = Vec::new();
    let mut mc_terms = Vec::new();
    let per_frame = match cfg.matching {
        Matching::Frame => match_frames(tape, &frames, sample)?,
        Matching::Clip => match_tracks(tape, &frames, sample)?,
        Matching::Node => match_nodes(&frames, sample),
    };
    for (t, fr) in frames.iter().enumerate() {
        let n = fr.graph.valid_count();
        if n == 0 {
            continue;
        }
        let vis = &sample.visuals[t];
        let (present, assignment): (Vec<usize>, Vec<usize>) = per_frame[t].iter().copied().unzip();
        let counts: Vec<(Vec<f64>, Vec<f64>)> =
            present.iter().map(|&e| color_counts(&sample.entity_masks[e][t], vis)).collect();
        let c = vis.num_colors();
        let mut fg = vec![0.0; n * c];
        let mut bg = vec![0.0; n * c];
        let mut y = vec![0.0; n * ls];
        for s in 0..n {
            let slot_total: Vec<f64> = vis.color_counts.iter().map(|&x| x as f64).collect();
            bg[s * c..(s + 1) * c].copy_from_slice(&slot_total);
        }
        for (k, &s) in assignment.iter().enumerate() {
            let e = present[k];
            fg[s * c..(s + 1) * c].copy_from_slice(&counts[k].0);
            bg[s * c..(s + 1) * c].copy_from_slice(&counts[k].1);
            y[s * ls..(s + 1) * ls].copy_from_slice(sample.y.row(e));
        }
        let targets = MaskTargets {
            fg: Tensor::new(vec![n, c], fg)?,
            bg: Tensor::new(vec![n, c], bg)?,
            pixels: vis.height * vis.width,
        };
        mask_terms.push(mask_loss(tape, fr.color_logits, &targets)?);
        fa_terms.push(fa_loss(tape, fr.v, &Tensor::new(vec![n, ls], y)?)?);
        // With λ = 0 the term is skipped, so it is logged as exactly zero.
        if cfg.lambda > 0.0 && assignment.len() >= 2 {
            let m = tape.gather_rows(fr.queries, &assignment)?;
            let w = tape.gather_rows(words, &present)?;
            let (m, w) = model.contrast.embed(tape, m, w)?;
            let k = assignment.len();
            let pairs = ContrastivePairs::from_pairs(k, k, &(0..k).map(|i| (i, i)).collect::<Vec<_>>());
            mc_terms.push(mc_loss(tape, m, w, &pairs, tau, cfg.include_positive_in_denominator)?);
        }
    }
    let last = frames.last().ok_or(Error::Empty("sample_loss"))?;
    let ids = &sample.caption_ids;
    let logits = model.caption.forward(tape, &ids[..ids.len() - 1], last.f_vl, &last.graph.valid)?;
    let cap = caption_ce(tape, logits, &ids[1..])?;
    let mask = mean_of(tape, &mask_terms)?;
    let fa = mean_of(tape, &fa_terms)?;
    let mc = mean_of(tape, &mc_terms)?;
    let total = total_loss(tape, cap, mask, fa, mc, cfg.lambda)?;
    Ok(LossParts {
        caption: cap,
        mask,
        fa,
        mc,
        total,
    })
}

/// Per frame, `(entity, slot)` pairs from an independent minimum-cost
/// matching of the entities visible in that frame.
fn match_frames(tape: &Tape, frames: &[FrameForward], sample: &Sample) -> Result<Vec<Vec<(usize, usize)>>> {
    let mut out = Vec::with_capacity(frames.len());
    for (t, fr) in frames.iter().enumerate() {
        let n = fr.graph.valid_count();
        let vis = &sample.visuals[t];
        let present: Vec<usize> = (0..sample.entity_masks.len())
            .filter(|&e| !sample.entity_masks[e][t].is_empty())
            .collect();
        if n == 0 {
            out.push(Vec::new());
            continue;
        }
        if present.len() > n {
            return Err(Error::Capacity {
                op: "slot matching",
                needed: present.len(),
                capacity: n,
            });
        }
        let counts: Vec<_> = present.iter().map(|&e| color_counts(&sample.entity_masks[e][t], vis)).collect();
        let pixels = (vis.height * vis.width) as f64;
        let cost = matching_cost(tape.value(fr.color_logits), &counts, pixels);
        let a = hungarian_match(&cost, present.len(), n)?;
        out.push(present.into_iter().zip(a).collect());
    }
    Ok(out)
}

/// Per frame, each visible entity paired with the slot holding its own node.
fn match_nodes(frames: &[FrameForward], sample: &Sample) -> Vec<Vec<(usize, usize)>> {
    frames
        .iter()
        .enumerate()
        .map(|(t, fr)| {
            (0..sample.entity_masks.len())
                .filter(|&e| !sample.entity_masks[e][t].is_empty())
                .filter_map(|e| {
                    let id = sample.entity_nodes[e];
                    fr.graph.node_ids.iter().position(|&x| x == id).map(|s| (e, s))
                })
                .collect()
        })
        .collect()
}

/// Cost charged when a track is missing from a frame where its entity is visible.
const ABSENT_TRACK_COST: f64 = 2.0;

/// One matching per clip between entities and node tracks (slots sharing
/// a node id across frames), on costs summed over frames. Returns per frame
/// the `(entity, slot)` pairs where both the entity and its track are present.
fn match_tracks(tape: &Tape, frames: &[FrameForward], sample: &Sample) -> Result<Vec<Vec<(usize, usize)>>> {
    let mut tracks: Vec<u32> = frames.iter().flat_map(|f| f.graph.node_ids.iter().copied()).collect();
    tracks.sort_unstable();
    tracks.dedup();
    let entities: Vec<usize> = (0..sample.entity_masks.len())
        .filter(|&e| sample.entity_masks[e].iter().any(|m| !m.is_empty()))
        .collect();
    if entities.len() > tracks.len() {
        return Err(Error::Capacity {
            op: "track matching",
            needed: entities.len(),
            capacity: tracks.len(),
        });
    }
    let nt = tracks.len();
    let mut cost = vec![0.0; entities.len() * nt];
    for (t, fr) in frames.iter().enumerate() {
        let vis = &sample.visuals[t];
        let pixels = (vis.height * vis.width) as f64;
        let visible: Vec<usize> = (0..entities.len())
            .filter(|&k| !sample.entity_masks[entities[k]][t].is_empty())
            .collect();
        if visible.is_empty() {
            continue;
        }
        let counts: Vec<_> = visible
            .iter()
            .map(|&k| color_counts(&sample.entity_masks[entities[k]][t], vis))
            .collect();
        let n = fr.graph.valid_count();
        let frame_cost = if n == 0 {
            Vec::new()
        } else {
            matching_cost(tape.value(fr.color_logits), &counts, pixels)
        };
        for (j, &k) in visible.iter().enumerate() {
            for (ti, id) in tracks.iter().enumerate() {
                cost[k * nt + ti] += match fr.graph.node_ids.iter().position(|x| x == id) {
                    Some(s) => frame_cost[j * n + s],
                    None => ABSENT_TRACK_COST,
                };
            }
        }
    }
    let assignment = hungarian_match(&cost, entities.len(), nt)?;
    let mut out = Vec::with_capacity(frames.len());
    for (t, fr) in frames.iter().enumerate() {
        let mut pairs = Vec::new();
        for (k, &ti) in assignment.iter().enumerate() {
            let e = entities[k];
            if sample.entity_masks[e][t].is_empty() {
                continue;
            }
            if let Some(s) = fr.graph.node_ids.iter().position(|&x| x == tracks[ti]) {
                pairs.push((e, s));
            }
        }
        out.push(pairs);
    }
    Ok(out)
}

fn mean_of(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    if xs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)?));
    }
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    tape.scale(acc, 1.0 / xs.len() as f64)
}

/// Mean caption-token embedding over each entity's spans, `[N_entities, D]`.
pub fn entity_word_embeddings(tape: &mut Tape, model: &Model, sample: &Sample) -> Result<Var> {
    let n = sample.entity_masks.len();
    let mut rows = Vec::with_capacity(n);
    for e in 0..n {
        let mut ids = Vec::new();
        for s in sample.caption.entity_spans(e) {
            for tok in sample.caption.phrase(s) {
                ids.push(model.vocab.id(tok)?);
            }
        }
        if ids.is_empty() {
            return Err(Error::UnknownEntity(e));
        }
        let emb = model.caption.embed(tape, &ids)?;
        let sum = tape.sum_rows(emb)?;
        rows.push(tape.scale(sum, 1.0 / ids.len() as f64)?);
    }
    let out = tape.concat_rows(&rows)?;
    if model.config.detach_words {
        let value = tape.value(out).clone();
        return Ok(tape.constant(value));
    }
    Ok(out)
}

/// Decoded output of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub node_ids: Vec<u32>,
    /// Foreground probability per slot per pixel, `[n][H·W]`.
    pub probs: Vec<Vec<f64>>,
    /// Referring probabilities `[n][L_s]`.
    pub v: Vec<Vec<f64>>,
    pub confidences: Vec<f64>,
}

/// Model output for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Greedy caption, BOS first.
    pub caption_ids: Vec<usize>,
    pub frames: Vec<FramePrediction>,
    pub height: usize,
    pub width: usize,
}

pub fn predict(model: &Model, graphs: &[SceneGraph], prompt: &PromptBox, visuals: &[FrameVisual]) -> Result<Prediction> {
    let mut tape = Tape::new();
    tape.bind(&model.store);
    let frames = forward_frames(&mut tape, model, graphs, prompt, visuals)?;
    let mut out = Vec::with_capacity(frames.len());
    for (fr, vis) in frames.iter().zip(visuals) {
        let lt = tape.value(fr.color_logits);
        let n = lt.rows();
        let mut probs = Vec::with_capacity(n);
        let mut conf = Vec::with_capacity(n);
        for s in 0..n {
            let pc: Vec<f64> = lt.row(s).iter().map(|&z| sigmoid(z)).collect();
            let full: Vec<f64> = vis.pixel_color.iter().map(|&c| pc[c]).collect();
            conf.push(mask_confidence(&full));
            probs.push(full);
        }
        let vt = tape.value(fr.v);
        out.push(FramePrediction {
            node_ids: fr.graph.node_ids.clone(),
            probs,
            v: (0..n).map(|s| vt.row(s).to_vec()).collect(),
            confidences: conf,
        });
    }
    let last = frames.last().ok_or(Error::Empty("predict"))?;
    let caption_ids = model
        .caption
        .decode(&mut tape, last.f_vl, &last.graph.valid, model.config.max_caption_len)?;
    let (height, width) = visuals.first().map_or((0, 0), |v| (v.height, v.width));
    Ok(Prediction {
        caption_ids,
        frames: out,
        height,
        width,
    })
}

impl Prediction {
    /// Caption tokens as strings, specials removed but span tags kept.
    pub fn tagged_tokens(&self, vocab: &Vocabulary) -> Vec<String> {
        self.caption_ids
            .iter()
            .filter(|&&id| id > EOS)
            .filter_map(|&id| vocab.token(id).map(String::from))
            .collect()
    }

    /// Object tracks assembled by node id across frames. A track's `V`
    /// and confidence are averaged over the frames where it is present;
    /// absent frames contribute an empty mask.
    pub fn to_video_prediction(&self, vocab: &Vocabulary) -> Result<VideoPrediction> {
        let (tokens, spans) = lenient_spans(&self.tagged_tokens(vocab));
        let mut ids: Vec<u32> = self.frames.iter().flat_map(|f| f.node_ids.iter().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut instances = Vec::with_capacity(ids.len());
        for id in ids {
            let mut masks = Vec::with_capacity(self.frames.len());
            let mut v_sum: Vec<f64> = Vec::new();
            let (mut conf, mut present) = (0.0, 0usize);
            for f in &self.frames {
                match f.node_ids.iter().position(|&n| n == id) {
                    Some(s) => {
                        masks.push(Mask::from_probs(self.height, self.width, &f.probs[s])?);
                        if v_sum.is_empty() {
                            v_sum = vec![0.0; f.v[s].len()];
                        }
                        v_sum.iter_mut().zip(&f.v[s]).for_each(|(a, b)| *a += b);
                        conf += f.confidences[s];
                        present += 1;
                    }
                    None => masks.push(Mask::empty(self.height, self.width)),
                }
            }
            let k = present.max(1) as f64;
            instances.push(PredInstance {
                masks,
                v: v_sum.into_iter().map(|x| x / k).collect(),
                confidence: conf / k,
            });
        }
        Ok(VideoPrediction {
            tokens,
            spans,
            instances,
        })
    }
}
