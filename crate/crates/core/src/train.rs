//! Adam optimisation over single-video steps.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_loss, Model, Sample};
use crate::numerics::{ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub steps: usize,
    /// Videos per optimiser step; gradients are averaged.
    pub batch_size: usize,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
    pub schedule: Schedule,
}

/// Learning-rate schedule over `steps`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to `floor` times it.
    Cosine { floor: f64 },
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            steps: 1000,
            batch_size: 1,
            seed: 0,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch_size > 0
            && self.clip_norm.is_none_or(|c| c > 0.0)
            && match self.schedule {
                Schedule::Constant => true,
                Schedule::Cosine { floor } => (0.0..=1.0).contains(&floor),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid optimiser settings".into()))
        }
    }

    /// Rate used by the update with 1-based index `step`.
    pub fn rate_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine { floor } => {
                let p = if self.steps == 0 {
                    1.0
                } else {
                    ((step.saturating_sub(1)) as f64 / self.steps as f64).min(1.0)
                };
                let c = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * p));
                self.learning_rate * (floor + (1.0 - floor) * c)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. `grads[i]` is `None` for parameters the
    /// loss did not reach; their moments still decay.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], cfg: &TrainConfig) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::shape("adam", "parameter count changed"));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(cfg.beta1, t);
        let c2 = 1.0 - libm::pow(cfg.beta2, t);
        let lr = cfg.rate_at(self.step);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            match &grads[i] {
                Some(g) => {
                    for (k, &gk) in g.data().iter().enumerate() {
                        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                    }
                }
                None => {
                    m.iter_mut().for_each(|x| *x *= cfg.beta1);
                    v.iter_mut().for_each(|x| *x *= cfg.beta2);
                }
            }
            for k in 0..p.len() {
                p[k] -= lr * (m[k] / c1) / (libm::sqrt(v[k] / c2) + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub caption: f64,
    pub mask: f64,
    pub fa: f64,
    pub mc: f64,
}

impl LossValues {
    fn add(&mut self, o: &LossValues) {
        self.total += o.total;
        self.caption += o.caption;
        self.mask += o.mask;
        self.fa += o.fa;
        self.mc += o.mc;
    }

    fn scale(&mut self, s: f64) {
        self.total *= s;
        self.caption *= s;
        self.mask *= s;
        self.fa *= s;
        self.mc *= s;
    }
}

/// Loss and per-parameter gradients of one sample.
pub fn loss_and_grads(model: &Model, sample: &Sample) -> Result<(LossValues, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    tape.bind(&model.store);
    let parts = sample_loss(&mut tape, model, sample)?;
    let values = LossValues {
        total: tape.value(parts.total).item()?,
        caption: tape.value(parts.caption).item()?,
        mask: tape.value(parts.mask).item()?,
        fa: tape.value(parts.fa).item()?,
        mc: tape.value(parts.mc).item()?,
    };
    let grads = tape.backward(parts.total)?;
    let per_param = model.store.ids().map(|id| grads.param(id).cloned()).collect();
    Ok((values, per_param))
}

/// Loss of one sample without gradients.
pub fn evaluate_loss(model: &Model, sample: &Sample) -> Result<LossValues> {
    let mut tape = Tape::new();
    tape.bind(&model.store);
    let parts = sample_loss(&mut tape, model, sample)?;
    Ok(LossValues {
        total: tape.value(parts.total).item()?,
        caption: tape.value(parts.caption).item()?,
        mask: tape.value(parts.mask).item()?,
        fa: tape.value(parts.fa).item()?,
        mc: tape.value(parts.mc).item()?,
    })
}

/// Visiting order of `n` samples in `epoch`, a pure function of the seed.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Position in the sample stream; saved with checkpoints so a resumed run
/// continues the same sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub step: u64,
}

impl Cursor {
    /// Sample indices of the next batch.
    pub fn batch(&self, cfg: &TrainConfig, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size as u64 {
            let k = self.step * cfg.batch_size as u64 + b;
            let epoch = k / n as u64;
            let order = epoch_order(cfg.seed, epoch, n);
            out.push(order[(k % n as u64) as usize]);
        }
        out
    }
}

/// Runs one optimiser step on the batch the cursor points at.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    samples: &[Sample],
    cursor: &mut Cursor,
    cfg: &TrainConfig,
) -> Result<LossValues> {
    if samples.is_empty() {
        return Err(Error::Empty("train_step"));
    }
    let batch = cursor.batch(cfg, samples.len());
    let mut acc = LossValues::default();
    let mut grads: Vec<Option<Tensor>> = Vec::new();
    for &i in &batch {
        let (l, g) = loss_and_grads(model, &samples[i])?;
        if !l.total.is_finite() {
            return Err(Error::NonFinite { op: "total_loss" });
        }
        acc.add(&l);
        if grads.is_empty() {
            grads = g;
        } else {
            for (a, b) in grads.iter_mut().zip(g) {
                match (a.as_mut(), b) {
                    (Some(a), Some(b)) => a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y),
                    (None, Some(b)) => *a = Some(b),
                    _ => {}
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    acc.scale(inv);
    let mut sq = 0.0;
    for g in grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|x| *x *= inv);
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    if let Some(c) = cfg.clip_norm {
        let norm = libm::sqrt(sq);
        if norm > c {
            let s = c / norm;
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    adam.update(&mut model.store, &grads, cfg)?;
    cursor.step += 1;
    Ok(acc)
}
