//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use segcap_core::numerics::{Activation, AttentionParams, Linear, Mlp, ParamStore, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn tensor(r: &Rows) -> Tensor {
    let refs: Vec<&[f64]> = r.iter().map(|x| x.as_slice()).collect();
    Tensor::from_rows(&refs).unwrap()
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Rows) -> Rows {
    let w = store.get(l.w);
    let b = store.get(l.b);
    x.iter()
        .map(|row| {
            (0..l.dout)
                .map(|j| b.data()[j] + (0..l.din).map(|i| row[i] * w.at(i, j)).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn activate(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::None => x,
    }
}

pub fn mlp(store: &ParamStore, m: &Mlp, x: &Rows) -> Rows {
    let h: Rows = linear(store, &m.first, x)
        .into_iter()
        .map(|r| r.into_iter().map(|v| activate(m.activation, v)).collect())
        .collect();
    linear(store, &m.second, &h)
}

/// Multi-head attention by explicit loops; `mask[i][j]` false hides key j
/// from query i, a fully hidden row yields zeros before the output map.
pub fn attention(store: &ParamStore, p: &AttentionParams, q: &Rows, k: &Rows, v: &Rows, mask: Option<&[bool]>) -> Rows {
    let (qp, kp, vp) = (linear(store, &p.q, q), linear(store, &p.k, k), linear(store, &p.v, v));
    let hd = p.dim / p.heads;
    let mut joined = vec![vec![0.0; p.dim]; q.len()];
    for h in 0..p.heads {
        for i in 0..q.len() {
            let allowed: Vec<bool> = (0..k.len()).map(|j| mask.is_none_or(|m| m[i * k.len() + j])).collect();
            let logits: Vec<f64> = (0..k.len())
                .map(|j| (0..hd).map(|c| qp[i][h * hd + c] * kp[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let mx = (0..k.len()).filter(|&j| allowed[j]).map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let e: Vec<f64> = (0..k.len()).map(|j| if allowed[j] { (logits[j] - mx).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                joined[i][h * hd + c] = (0..k.len()).map(|j| e[j] / z * vp[j][h * hd + c]).sum();
            }
        }
    }
    linear(store, &p.o, &joined)
}

pub fn max_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Sets `l` to the identity map (requires din == dout).
pub fn set_identity(store: &mut ParamStore, l: &Linear) {
    store.set(l.w, Tensor::eye(l.din)).unwrap();
    store.set(l.b, Tensor::zeros(&[1, l.dout])).unwrap();
}

pub fn zero_linear(store: &mut ParamStore, l: &Linear) {
    store.set(l.w, Tensor::zeros(&[l.din, l.dout])).unwrap();
    store.set(l.b, Tensor::zeros(&[1, l.dout])).unwrap();
}
