//! Training objectives.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::heads::PAD;
use crate::numerics::{Tape, Tensor, Var};

/// Probability clamp used inside every logarithm.
pub const PROB_EPS: f64 = 1e-7;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (`[n, |V|]`), skipping PAD targets.
pub fn caption_ce(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape("caption_ce", format!("logits {shape:?} for {} targets", targets.len())));
    }
    let v = shape[1];
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::shape("caption_ce", format!("target {bad} outside vocabulary of {v}")));
    }
    let flat: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(i, &t)| i * v + t)
        .collect();
    if flat.is_empty() {
        return Err(Error::Empty("caption_ce (all targets are padding)"));
    }
    let lp = tape.log_softmax_rows(logits)?;
    let picked = tape.select(lp, &flat)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

/// Pixel statistics of mask targets grouped by identical logits.
///
/// Column `c` of row `n` counts the pixels sharing logit `(n, c)` whose
/// target is foreground (`fg`) or background (`bg`). Plain per-pixel
/// targets are the special case of one column per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTargets {
    pub fg: Tensor,
    pub bg: Tensor,
    pub pixels: usize,
}

impl MaskTargets {
    /// Per-pixel targets: `gt[n]` is slot `n`'s binary mask.
    pub fn from_pixels(gt: &[Vec<bool>]) -> Result<Self> {
        let n = gt.len();
        let p = gt.first().map_or(0, Vec::len);
        if gt.iter().any(|g| g.len() != p) {
            return Err(Error::shape("mask targets", "ragged masks"));
        }
        let fg: Vec<f64> = gt.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let bg = fg.iter().map(|f| 1.0 - f).collect();
        Ok(MaskTargets {
            fg: Tensor::new(vec![n, p], fg)?,
            bg: Tensor::new(vec![n, p], bg)?,
            pixels: p,
        })
    }
}

/// Mean over slots of pixel-mean BCE plus `1 − dice` (smoothing 1).
///
/// `logits` is `[N, C]`, matched against grouped `targets`. BCE is taken
/// in logit space: `softplus(z) − g·z`.
pub fn mask_loss(tape: &mut Tape, logits: Var, targets: &MaskTargets) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Empty("mask_loss"));
    }
    if targets.fg.shape() != shape.as_slice() || targets.bg.shape() != shape.as_slice() || targets.pixels == 0 {
        return Err(Error::shape("mask_loss", format!("logits {shape:?} vs targets {:?}", targets.fg.shape())));
    }
    let fg = tape.constant(targets.fg.clone());
    let bg = tape.constant(targets.bg.clone());
    // BCE: fg·softplus(−z) + bg·softplus(z)
    let neg = tape.scale(logits, -1.0)?;
    let sp_neg = tape.softplus(neg)?;
    let sp_pos = tape.softplus(logits)?;
    let a = tape.mul(fg, sp_neg)?;
    let b = tape.mul(bg, sp_pos)?;
    let bce = tape.add(a, b)?;
    let bce = tape.sum_cols(bce)?;
    let bce = tape.scale(bce, 1.0 / targets.pixels as f64)?;
    // dice: (2Σpg + 1) / (Σp + Σg + 1)
    let p = tape.sigmoid(logits)?;
    let pg = tape.mul(p, fg)?;
    let inter = tape.sum_cols(pg)?;
    let counts = tape.add(fg, bg)?;
    let pw = tape.mul(p, counts)?;
    let sum_p = tape.sum_cols(pw)?;
    let sum_g = tape.sum_cols(fg)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.shift(num, 1.0)?;
    let den = tape.add(sum_p, sum_g)?;
    let den = tape.shift(den, 1.0)?;
    let dice = tape.div(num, den)?;
    let one_minus = tape.scale(dice, -1.0)?;
    let one_minus = tape.shift(one_minus, 1.0)?;
    let per_slot = tape.add(bce, one_minus)?;
    tape.mean(per_slot)
}

/// Mean binary cross-entropy between `V` (`[N, L_s]`, entries in [0, 1])
/// and the 0/1 target `y`, with probabilities clamped to `[ε, 1 − ε]`.
pub fn fa_loss(tape: &mut Tape, v: Var, y: &Tensor) -> Result<Var> {
    let vt = tape.value(v);
    if vt.shape() != y.shape() {
        return Err(Error::shape("fa_loss", format!("V {:?} vs Y {:?}", vt.shape(), y.shape())));
    }
    if vt.numel() == 0 {
        return Err(Error::Empty("fa_loss"));
    }
    if let Some(bad) = vt.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::contract("fa_loss", format!("probability {bad} outside [0, 1]")));
    }
    let vc = tape.clamp(v, PROB_EPS, 1.0 - PROB_EPS)?;
    let ln_v = tape.ln(vc)?;
    let one_minus = tape.scale(vc, -1.0)?;
    let one_minus = tape.shift(one_minus, 1.0)?;
    let ln_1v = tape.ln(one_minus)?;
    let yv = tape.constant(y.clone());
    let ny = tape.constant(y.map(|x| 1.0 - x)?);
    let a = tape.mul(yv, ln_v)?;
    let b = tape.mul(ny, ln_1v)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -1.0)
}

/// Temperature `clamp(exp(log_tau), 0.01, 1)` as a one-element value.
pub fn temperature(tape: &mut Tape, log_tau: Var) -> Result<Var> {
    let t = tape.exp(log_tau)?;
    tape.clamp(t, TAU_MIN, TAU_MAX)
}

/// Positive pairs for the multi-entity contrastive loss.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContrastivePairs {
    /// For each mask, indices of its positive words.
    pub mask_pos: Vec<Vec<usize>>,
    /// For each word, indices of its positive masks.
    pub word_pos: Vec<Vec<usize>>,
}

impl ContrastivePairs {
    /// Builds both directions from a list of `(mask, word)` positives.
    pub fn from_pairs(masks: usize, words: usize, pairs: &[(usize, usize)]) -> Self {
        let mut mask_pos = vec![Vec::new(); masks];
        let mut word_pos = vec![Vec::new(); words];
        for &(m, w) in pairs {
            if !mask_pos[m].contains(&w) {
                mask_pos[m].push(w);
            }
            if !word_pos[w].contains(&m) {
                word_pos[w].push(m);
            }
        }
        ContrastivePairs { mask_pos, word_pos }
    }
}

/// Multi-entity contrastive loss between mask embeddings `[N_m, D]` and
/// word embeddings `[N_w, D]`.
///
/// For anchor `i` on either side, each positive `s` contributes
/// `−log(exp(a_i·s/τ) / Σ_{j≠i} exp(a_i·b_j/τ))`, averaged over the
/// positives of `i` and summed over anchors of both sides. The sum over
/// `j ≠ i` runs over the other modality by index. With
/// `include_positive` the numerator term is added to the denominator.
pub fn mc_loss(
    tape: &mut Tape,
    masks: Var,
    words: Var,
    pairs: &ContrastivePairs,
    tau: Var,
    include_positive: bool,
) -> Result<Var> {
    let nm = tape.value(masks).shape()[0];
    let nw = tape.value(words).shape()[0];
    if nm < 2 || nw < 2 {
        return Err(Error::contract("mc_loss", format!("needs at least 2 masks and 2 words, got {nm} and {nw}")));
    }
    if pairs.mask_pos.len() != nm || pairs.word_pos.len() != nw {
        return Err(Error::shape("mc_loss", "positive sets do not match embedding counts"));
    }
    for (side, sets, other) in [("mask", &pairs.mask_pos, nw), ("word", &pairs.word_pos, nm)] {
        for (i, s) in sets.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::contract("mc_loss", format!("{side} {i} has no positive")));
            }
            if s.iter().any(|&j| j >= other) {
                return Err(Error::shape("mc_loss", format!("{side} {i} positive out of range")));
            }
        }
    }
    let sim = tape.matmul_nt(masks, words)?;
    let sim = tape.div_scalar(sim, tau)?;
    let sim_t = tape.transpose(sim)?;
    let a = directional(tape, sim, &pairs.mask_pos, include_positive)?;
    let b = directional(tape, sim_t, &pairs.word_pos, include_positive)?;
    tape.add(a, b)
}

fn directional(tape: &mut Tape, sim: Var, pos: &[Vec<usize>], include_positive: bool) -> Result<Var> {
    let (r, c) = (tape.value(sim).shape()[0], tape.value(sim).shape()[1]);
    let mask: Vec<bool> = (0..r * c).map(|k| k % c != k / c).collect();
    let lse = tape.logsumexp_rows(sim, Some(&mask))?;
    let mut flat = Vec::new();
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for (i, set) in pos.iter().enumerate() {
        for &s in set {
            flat.push(i * c + s);
            rows.push(i);
            weights.push(1.0 / set.len() as f64);
        }
    }
    let num = tape.select(sim, &flat)?;
    let den = tape.gather_rows(lse, &rows)?;
    let den = if include_positive {
        let both = tape.concat_cols(&[num, den])?;
        tape.logsumexp_rows(both, None)?
    } else {
        den
    };
    let diff = tape.sub(num, den)?;
    let w = tape.constant(Tensor::new(vec![weights.len(), 1], weights)?);
    let wd = tape.mul(diff, w)?;
    let s = tape.sum(wd)?;
    tape.scale(s, -1.0)
}

/// `cap + (mask + fa) + λ·mc`.
pub fn total_loss(tape: &mut Tape, cap: Var, mask: Var, fa: Var, mc: Var, lambda: f64) -> Result<Var> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("λ must be finite and non-negative, got {lambda}")));
    }
    let seg = tape.add(mask, fa)?;
    let a = tape.add(cap, seg)?;
    let w = tape.scale(mc, lambda)?;
    tape.add(a, w)
}
