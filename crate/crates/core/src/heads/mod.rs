//! Caption, mask and referring heads plus slot-to-object matching.

mod hungarian;
mod vocab;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use hungarian::{assignment_cost, hungarian_match};
pub use vocab::{Vocabulary, BOS, BOS_TOKEN, EOS, EOS_TOKEN, PAD, PAD_TOKEN};

use crate::error::{Error, Result};
use crate::numerics::{Activation, AttentionParams, Linear, Mlp, ParamId, ParamStore, Tape, Tensor, Var};

/// Autoregressive caption decoder conditioned on `f_vl` by cross-attention.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaptionHead {
    pub embedding: ParamId,
    pub position: ParamId,
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub mlp: Mlp,
    pub out: Linear,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl CaptionHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        dim: usize,
        heads: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CaptionHead {
            embedding: store.add_uniform("cap.embedding", &[vocab_size, dim], dim, rng)?,
            position: store.add_uniform("cap.position", &[max_len, dim], dim, rng)?,
            self_attn: AttentionParams::new(store, "cap.self", dim, heads, rng)?,
            cross_attn: AttentionParams::new(store, "cap.cross", dim, heads, rng)?,
            mlp: Mlp::new(store, "cap.mlp", (dim, 2 * dim, dim), Activation::Relu, rng)?,
            out: Linear::new(store, "cap.out", dim, vocab_size, rng)?,
            vocab_size,
            max_len,
        })
    }

    /// Token embeddings (no position term), `[n, D]`.
    pub fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::shape("caption embed", format!("token id {bad} ≥ {}", self.vocab_size)));
        }
        let table = tape.param(self.embedding);
        tape.gather_rows(table, ids)
    }

    /// Next-token logits `[n, |V|]` for each prefix of `input`.
    pub fn forward(&self, tape: &mut Tape, input: &[usize], f_vl: Var, valid: &[bool]) -> Result<Var> {
        let n = input.len();
        if n == 0 || n > self.max_len {
            return Err(Error::shape("caption forward", format!("length {n} of max {}", self.max_len)));
        }
        let tok = self.embed(tape, input)?;
        let pos_table = tape.param(self.position);
        let pos = tape.rows(pos_table, 0, n)?;
        let x = tape.add(tok, pos)?;
        let causal: Vec<bool> = (0..n * n).map(|k| k % n <= k / n).collect();
        let a = self.self_attn.mhsa(tape, x, Some(&causal))?;
        let x = tape.add(x, a)?;
        let lk = tape.value(f_vl).shape()[0];
        if valid.len() != lk {
            return Err(Error::shape("caption forward", "validity mask length"));
        }
        let cross_mask = crate::numerics::key_mask(n, valid);
        let c = self.cross_attn.mhca(tape, x, f_vl, f_vl, Some(&cross_mask))?;
        let x = tape.add(x, c)?;
        let m = self.mlp.forward(tape, x)?;
        let x = tape.add(x, m)?;
        self.out.forward(tape, x)
    }

    /// Greedy decoding from BOS. Stops after EOS or at `max_len` tokens
    /// (BOS included); ties pick the smallest id.
    pub fn decode(&self, tape: &mut Tape, f_vl: Var, valid: &[bool], max_len: usize) -> Result<Vec<usize>> {
        if max_len < 2 {
            return Err(Error::Config("caption max_len must be at least 2".into()));
        }
        let max_len = max_len.min(self.max_len + 1);
        let mut ids = vec![BOS];
        while ids.len() < max_len {
            let logits = self.forward(tape, &ids, f_vl, valid)?;
            let v = tape.value(logits);
            let next = argmax(v.row(v.rows() - 1));
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(ids)
    }
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel encoder applied to RGB values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PixelEncoder {
    pub mlp: Mlp,
}

impl PixelEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(PixelEncoder {
            mlp: Mlp::new(store, "pix.encoder", (3, dim, dim), Activation::Relu, rng)?,
        })
    }

    /// `[P, 3]` colours to `[P, D]` features.
    pub fn forward(&self, tape: &mut Tape, rgb: Var) -> Result<Var> {
        self.mlp.forward(tape, rgb)
    }
}

/// A frame factored into its distinct colours. Because the pixel encoder
/// sees one pixel at a time, features of equal-coloured pixels coincide and
/// only the distinct colours need encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameVisual {
    pub height: usize,
    pub width: usize,
    /// `[C, 3]` distinct colours in first-seen raster order.
    pub colors: Tensor,
    /// Colour index of every pixel, row-major.
    pub pixel_color: Vec<usize>,
    /// `[U, C]` share of each colour inside each patch.
    pub patch_weights: Tensor,
    pub color_counts: Vec<usize>,
}

impl FrameVisual {
    /// `rgb` is `H·W·3` row-major; patches are `patch × patch` squares.
    pub fn new(rgb: &[f64], height: usize, width: usize, patch: usize) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(Error::shape("FrameVisual", format!("{} values for {height}x{width}x3", rgb.len())));
        }
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::Config(format!("patch {patch} does not tile {height}x{width}")));
        }
        let mut colors: Vec<[f64; 3]> = Vec::new();
        let mut pixel_color = Vec::with_capacity(height * width);
        for px in rgb.chunks(3) {
            let c = [px[0], px[1], px[2]];
            let idx = match colors.iter().position(|k| k == &c) {
                Some(i) => i,
                None => {
                    colors.push(c);
                    colors.len() - 1
                }
            };
            pixel_color.push(idx);
        }
        let nc = colors.len();
        let (ph, pw) = (height / patch, width / patch);
        let mut weights = vec![0.0; ph * pw * nc];
        let share = 1.0 / (patch * patch) as f64;
        let mut color_counts = vec![0; nc];
        for y in 0..height {
            for x in 0..width {
                let c = pixel_color[y * width + x];
                let u = (y / patch) * pw + x / patch;
                weights[u * nc + c] += share;
                color_counts[c] += 1;
            }
        }
        Ok(FrameVisual {
            height,
            width,
            colors: Tensor::new(vec![nc, 3], colors.into_iter().flatten().collect())?,
            pixel_color,
            patch_weights: Tensor::new(vec![ph * pw, nc], weights)?,
            color_counts,
        })
    }

    pub fn num_colors(&self) -> usize {
        self.color_counts.len()
    }
}

/// Query/pixel dot-product mask decoder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskHead {
    pub query_proj: Linear,
    pub pix_proj: Linear,
    pub dim: usize,
}

impl MaskHead {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(MaskHead {
            query_proj: Linear::new(store, "mask.query", dim, dim, rng)?,
            pix_proj: Linear::new(store, "mask.pixel", dim, dim, rng)?,
            dim,
        })
    }

    /// Slot embeddings used both for mask logits and the contrastive loss.
    pub fn queries(&self, tape: &mut Tape, slots: Var) -> Result<Var> {
        self.query_proj.forward(tape, slots)
    }

    /// `[N, P]` logits `⟨q_n, pix_proj(p)⟩ / sqrt(D)` from projected slot
    /// queries `[N, D]` and pixel features `[P, D]`.
    pub fn logits(&self, tape: &mut Tape, queries: Var, pixel_features: Var) -> Result<Var> {
        let pp = self.pix_proj.forward(tape, pixel_features)?;
        let l = tape.matmul_nt(queries, pp)?;
        tape.scale(l, 1.0 / libm::sqrt(self.dim as f64))
    }
}

impl MaskHead {
    /// Logits `[N, P]` of the slot rows `[N, D]` over pixel features
    /// `[P, D]`, with each slot's confidence.
    pub fn decode(&self, tape: &mut Tape, slots: Var, pixel_features: Var) -> Result<(Var, Vec<f64>)> {
        if tape.value(slots).shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::Empty("decode_masks"));
        }
        let q = self.queries(tape, slots)?;
        let logits = self.logits(tape, q, pixel_features)?;
        let v = tape.value(logits);
        let conf = (0..v.rows())
            .map(|r| {
                let probs: Vec<f64> = v.row(r).iter().map(|&z| 1.0 / (1.0 + libm::exp(-z))).collect();
                mask_confidence(&probs)
            })
            .collect();
        Ok((logits, conf))
    }
}

/// Full-resolution `[N, H·W]` logits from per-colour logits `[N, C]`.
pub fn expand_color_logits(tape: &mut Tape, color_logits: Var, visual: &FrameVisual) -> Result<Var> {
    let t = tape.transpose(color_logits)?;
    let g = tape.gather_rows(t, &visual.pixel_color)?;
    tape.transpose(g)
}

/// Mean foreground probability over pixels above 0.5; 0 when there are none.
pub fn mask_confidence(probs: &[f64]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for &p in probs {
        if p > 0.5 {
            sum += p;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Per-slot probabilities over caption positions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferHead {
    pub mlp: Mlp,
    pub positions: usize,
}

impl ReferHead {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, positions: usize, rng: &mut R) -> Result<Self> {
        if positions == 0 {
            return Err(Error::Config("referring head needs at least one caption position".into()));
        }
        Ok(ReferHead {
            mlp: Mlp::new(store, "refer", (dim, (dim / 2).max(1), positions), Activation::Relu, rng)?,
            positions,
        })
    }

    /// Pre-sigmoid scores `[N, L_s]`.
    pub fn logits(&self, tape: &mut Tape, slots: Var) -> Result<Var> {
        self.mlp.forward(tape, slots)
    }

    /// `V ∈ (0, 1)^{N × L_s}`.
    pub fn probs(&self, tape: &mut Tape, slots: Var) -> Result<Var> {
        let l = self.logits(tape, slots)?;
        tape.sigmoid(l)
    }
}
