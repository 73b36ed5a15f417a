use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Affine map `x·W + b` with `W: [din, dout]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Result<Self> {
        let w = store.add_uniform(&format!("{name}.w"), &[din, dout], din, rng)?;
        let b = store.add_uniform(&format!("{name}.b"), &[1, dout], din, rng)?;
        Ok(Self { w, b, din, dout })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let cols = tape.value(x).shape().last().copied().unwrap_or(0);
        if tape.value(x).rank() != 2 || cols != self.din {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, expected [*, {}]", tape.value(x).shape(), self.din),
            ));
        }
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::None => Ok(x),
        }
    }
}

/// Two affine layers with an activation in between.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let (din, dh, dout) = dims;
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), din, dh, rng)?,
            second: Linear::new(store, &format!("{name}.1"), dh, dout, rng)?,
            activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, x)?;
        let h = self.activation.apply(tape, h)?;
        self.second.forward(tape, h)
    }
}

/// Projections of one multi-head attention block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible into {heads} heads")));
        }
        Ok(Self {
            heads,
            dim,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
        })
    }

    /// Cross-attention from `q` onto keys `k` and values `v`.
    ///
    /// `mask`, when given, is a row-major `[Lq, Lk]` table of allowed
    /// query/key pairs. A query row with no allowed key attends to nothing
    /// and receives only the output bias.
    pub fn mhca(&self, tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<Var> {
        Ok(self.mhca_with_weights(tape, q, k, v, mask)?.0)
    }

    pub fn mhsa(&self, tape: &mut Tape, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.mhca(tape, x, x, x, mask)
    }

    /// Like [`mhca`](Self::mhca), also returning each head's `[Lq, Lk]`
    /// attention matrix.
    pub fn mhca_with_weights(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let lq = tape.value(q).shape()[0];
        let lk = tape.value(k).shape().first().copied().unwrap_or(0);
        if tape.value(k).rank() != 2 || lk == 0 {
            return Err(Error::Empty("mhca keys"));
        }
        if tape.value(v).shape() != tape.value(k).shape() {
            return Err(Error::shape(
                "mhca",
                format!("keys {:?} vs values {:?}", tape.value(k).shape(), tape.value(v).shape()),
            ));
        }
        if let Some(m) = mask {
            if m.len() != lq * lk {
                return Err(Error::shape("mhca", format!("mask of {} for {lq}x{lk}", m.len())));
            }
        }
        let qp = self.q.forward(tape, q)?;
        let kp = self.k.forward(tape, k)?;
        let vp = self.v.forward(tape, v)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    tape.cols(qp, h * hd, hd)?,
                    tape.cols(kp, h * hd, hd)?,
                    tape.cols(vp, h * hd, hd)?,
                )
            };
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, scale)?;
            let a = tape.softmax_rows(logits, mask)?;
            outs.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((self.o.forward(tape, joined)?, weights))
    }
}

/// `[lq, lk]` mask allowing every query to see exactly the valid keys.
pub fn key_mask(lq: usize, valid_keys: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(lq * valid_keys.len());
    for _ in 0..lq {
        m.extend_from_slice(valid_keys);
    }
    m
}

fn rsqrt(x: f64) -> f64 {
    1.0 / libm::sqrt(x)
}

fn drsqrt(x: f64) -> f64 {
    -0.5 / (x * libm::sqrt(x))
}

/// Scales every row to unit Euclidean norm (`eps` keeps zero rows finite).
pub fn l2_normalize_rows(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let s = tape.sum_cols(sq)?;
    let s = tape.shift(s, eps)?;
    let inv = tape.map(s, rsqrt, drsqrt)?;
    tape.mul_col(x, inv)
}
