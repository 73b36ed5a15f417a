//! Registry of everything with a hand-written backward pass, checked
//! against central differences.

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use segcap_core::data::{gen_video, GenConfig};
use segcap_core::giqformer::{memory_update, textual_query_attend, visual_graph_attend, visual_language_attend, ContextMemory, GiqParams};
use segcap_core::heads::{CaptionHead, MaskHead, ReferHead, Vocabulary};
use segcap_core::losses::{caption_ce, fa_loss, mask_loss, mc_loss, temperature, total_loss, ContrastivePairs, MaskTargets};
use segcap_core::model::{sample_loss, ContrastiveHead, Model, ModelConfig, Sample};
use segcap_core::numerics::{
    grad_check, grad_check_params, l2_normalize_rows, Activation, AttentionParams, Linear, Mlp, ParamStore, Tape, Tensor, Var,
};
use segcap_core::ptgformer::{association_scores, fuse, reinforce, temporal_update, AdaptorParams, FusionParams, TemporalParams};
use segcap_core::Result;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
pub const POINTS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Op,
    Layer,
    Module,
    Loss,
}

/// One random point of a check; returns the worst relative error there.
type Probe = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64> + Send + Sync>;

pub struct Check {
    pub name: &'static str,
    pub kind: Kind,
    pub points: usize,
    probe: Probe,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: Kind,
    pub points: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub tolerance: f64,
    pub step: f64,
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

/// Runs every check; an `Err` from a probe counts as a failure with an
/// infinite error.
pub fn run(checks: &[Check], seed: u64) -> Report {
    let results = checks
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..c.points {
                let e = (c.probe)(&mut rng).unwrap_or(f64::INFINITY);
                worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
            }
            CheckResult {
                name: c.name.to_string(),
                kind: c.kind,
                points: c.points,
                max_rel_err: worst,
                passed: worst <= TOLERANCE,
            }
        })
        .collect();
    Report {
        tolerance: TOLERANCE,
        step: STEP,
        checks: results,
    }
}

fn check(name: &'static str, kind: Kind, points: usize, probe: impl Fn(&mut ChaCha8Rng) -> Result<f64> + Send + Sync + 'static) -> Check {
    Check {
        name,
        kind,
        points,
        probe: Box::new(probe),
    }
}

/// Uniform in ±1.5, nudged away from 0 and ±0.5 where relu and the clamp
/// used below have kinks.
fn point(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.random_range(-1.5..1.5);
            if v.abs() < 0.02 || (v.abs() - 0.5).abs() < 0.02 {
                v + 0.05
            } else {
                v
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Reduces any value to a scalar with fixed unequal weights so that every
/// output element gets a distinct upstream gradient.
fn weigh(t: &mut Tape, y: Var) -> Result<Var> {
    let v = t.value(y);
    let (shape, n) = (v.shape().to_vec(), v.numel());
    let w = t.constant(Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn positive_like(t: &mut Tape, x: Var) -> Result<Var> {
    let v = t.value(x);
    let (shape, n) = (v.shape().to_vec(), v.numel());
    Ok(t.constant(Tensor::new(shape, (0..n).map(|i| 0.6 + 0.1 * (i as f64).cos()).collect())?))
}

fn op(name: &'static str, f: fn(&mut Tape, Var) -> Result<Var>) -> Check {
    check(name, Kind::Op, POINTS, move |rng| {
        let x = point(rng, 3, 4);
        grad_check(|t, v| f(t, v).and_then(|y| weigh(t, y)), &x, STEP)
    })
}

fn tape_ops() -> Vec<Check> {
    vec![
        op("matmul", |t, x| {
            let w = t.constant(Tensor::matrix(4, 2, vec![0.3, -0.1, 0.2, 0.5, -0.7, 0.4, 0.1, 0.9])?);
            let y = t.matmul(x, w)?;
            let xt = t.transpose(x)?;
            let z = t.matmul(x, xt)?;
            t.matmul(z, y)
        }),
        op("matmul_nt", |t, x| {
            let o = positive_like(t, x)?;
            let a = t.matmul_nt(x, o)?;
            let b = t.matmul_nt(x, x)?;
            t.add(a, b)
        }),
        op("transpose", |t, x| t.transpose(x)),
        op("add", |t, x| {
            let o = positive_like(t, x)?;
            let y = t.add(x, o)?;
            t.add(y, x)
        }),
        op("sub", |t, x| {
            let o = positive_like(t, x)?;
            let y = t.sub(o, x)?;
            let y = t.mul(y, y)?;
            t.sub(y, x)
        }),
        op("mul", |t, x| {
            let o = positive_like(t, x)?;
            let y = t.mul(x, o)?;
            t.mul(y, x)
        }),
        op("div", |t, x| {
            let o = positive_like(t, x)?;
            let a = t.div(x, o)?;
            let sq = t.mul(x, x)?;
            let den = t.shift(sq, 0.5)?;
            let b = t.div(o, den)?;
            t.add(a, b)
        }),
        op("add_row", |t, x| {
            let r = t.rows(x, 0, 1)?;
            t.add_row(x, r)
        }),
        op("mul_col", |t, x| {
            let c = t.cols(x, 1, 1)?;
            t.mul_col(x, c)
        }),
        op("mul_scalar", |t, x| {
            let s = t.select(x, &[5])?;
            let s = t.reshape(s, &[])?;
            t.mul_scalar(x, s)
        }),
        op("div_scalar", |t, x| {
            let s = t.select(x, &[7])?;
            let s = t.reshape(s, &[])?;
            let s = t.shift(s, 3.0)?;
            t.div_scalar(x, s)
        }),
        op("scale", |t, x| t.scale(x, -1.7)),
        op("shift", |t, x| {
            let y = t.shift(x, 0.4)?;
            t.mul(y, y)
        }),
        op("relu", |t, x| t.relu(x)),
        op("sigmoid", |t, x| t.sigmoid(x)),
        op("exp", |t, x| t.exp(x)),
        op("ln", |t, x| {
            let sq = t.mul(x, x)?;
            let y = t.shift(sq, 0.3)?;
            t.ln(y)
        }),
        op("softplus", |t, x| t.softplus(x)),
        op("clamp", |t, x| t.clamp(x, -0.5, 0.5)),
        op("map", |t, x| t.map(x, |v| v * v * v, |v| 3.0 * v * v)),
        op("softmax_rows", |t, x| {
            let mask = [true, false, true, true, true, true, false, true, true, true, true, true];
            t.softmax_rows(x, Some(&mask))
        }),
        op("log_softmax_rows", |t, x| t.log_softmax_rows(x)),
        op("logsumexp_rows", |t, x| {
            let mask = [true, true, false, true, false, false, true, true, true, true, true, true];
            t.logsumexp_rows(x, Some(&mask))
        }),
        op("sum", |t, x| {
            let sq = t.mul(x, x)?;
            t.sum(sq)
        }),
        op("mean", |t, x| {
            let sq = t.mul(x, x)?;
            t.mean(sq)
        }),
        op("sum_rows", |t, x| t.sum_rows(x)),
        op("sum_cols", |t, x| t.sum_cols(x)),
        op("rows", |t, x| t.rows(x, 1, 2)),
        op("concat_rows", |t, x| {
            let a = t.rows(x, 2, 1)?;
            t.concat_rows(&[x, a, x])
        }),
        op("cols", |t, x| t.cols(x, 1, 3)),
        op("concat_cols", |t, x| {
            let b = t.cols(x, 0, 1)?;
            t.concat_cols(&[b, x, b])
        }),
        op("gather_rows", |t, x| t.gather_rows(x, &[2, 0, 0, 1])),
        op("select", |t, x| t.select(x, &[11, 0, 4, 4])),
        op("reshape", |t, x| {
            let y = t.reshape(x, &[2, 6])?;
            let o = t.constant(Tensor::matrix(6, 2, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect())?);
            t.matmul(y, o)
        }),
    ]
}

/// Parameter-space check: `build` registers parameters (inputs included)
/// into a fresh store and returns the scalar function to differentiate.
fn param_check<B, F>(name: &'static str, kind: Kind, points: usize, build: B) -> Check
where
    B: Fn(&mut ParamStore, &mut ChaCha8Rng) -> Result<F> + Send + Sync + 'static,
    F: Fn(&mut Tape) -> Result<Var>,
{
    check(name, kind, points, move |rng| {
        let mut store = ParamStore::new();
        let f = build(&mut store, rng)?;
        let r = grad_check_params(&store, |t, _| f(t), STEP, None)?;
        Ok(r.max_rel_err)
    })
}

const D: usize = 8;
const H: usize = 2;
/// Smallest convenient width that holds the generator's node features.
const SAMPLE_D: usize = 20;

fn input(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<segcap_core::ParamId> {
    store.add(name, point(rng, rows, cols))
}

fn layers() -> Vec<Check> {
    vec![
        param_check("linear", Kind::Layer, POINTS, |s, rng| {
            let l = Linear::new(s, "l", D, 3, rng)?;
            let x = input(s, "x", 4, D, rng)?;
            Ok(move |t: &mut Tape| {
                let xv = t.param(x);
                let y = l.forward(t, xv)?;
                weigh(t, y)
            })
        }),
        param_check("mlp", Kind::Layer, POINTS, |s, rng| {
            let m = Mlp::new(s, "m", (D, 6, 3), Activation::Relu, rng)?;
            let x = input(s, "x", 3, D, rng)?;
            Ok(move |t: &mut Tape| {
                let xv = t.param(x);
                let y = m.forward(t, xv)?;
                weigh(t, y)
            })
        }),
        param_check("mhsa", Kind::Layer, POINTS, |s, rng| {
            let a = AttentionParams::new(s, "a", D, H, rng)?;
            let x = input(s, "x", 3, D, rng)?;
            Ok(move |t: &mut Tape| {
                let xv = t.param(x);
                let y = a.mhsa(t, xv, None)?;
                weigh(t, y)
            })
        }),
        param_check("mhca_masked", Kind::Layer, POINTS, |s, rng| {
            let a = AttentionParams::new(s, "a", D, H, rng)?;
            let q = input(s, "q", 2, D, rng)?;
            let kv = input(s, "kv", 3, D, rng)?;
            Ok(move |t: &mut Tape| {
                let (qv, kvv) = (t.param(q), t.param(kv));
                let mask = [true, false, true, false, true, true];
                let y = a.mhca(t, qv, kvv, kvv, Some(&mask))?;
                weigh(t, y)
            })
        }),
        param_check("l2_normalize_rows", Kind::Layer, POINTS, |s, rng| {
            let x = input(s, "x", 3, 4, rng)?;
            Ok(move |t: &mut Tape| {
                let xv = t.param(x);
                let y = l2_normalize_rows(t, xv, 1e-12)?;
                weigh(t, y)
            })
        }),
    ]
}

fn modules() -> Vec<Check> {
    vec![
        param_check("association_scores", Kind::Module, POINTS, |s, rng| {
            let p = AdaptorParams {
                mhsa: AttentionParams::new(s, "mhsa", D, H, rng)?,
                score: Mlp::new(s, "score", (D, 4, 1), Activation::Relu, rng)?,
                prompt_embedding: s.add_zeros("prompt", &[1, D])?,
            };
            let fo = input(s, "f_o", 3, D, rng)?;
            let fe = input(s, "f_e", 2, D, rng)?;
            Ok(move |t: &mut Tape| {
                let (o, e) = (t.param(fo), t.param(fe));
                let a = association_scores(t, o, Some(e), &p)?;
                weigh(t, a)
            })
        }),
        param_check("reinforce", Kind::Module, POINTS, |s, rng| {
            let fo = input(s, "f_o", 3, D, rng)?;
            let raw = input(s, "alpha_logit", 3, 1, rng)?;
            Ok(move |t: &mut Tape| {
                let o = t.param(fo);
                let r = t.param(raw);
                let alpha = t.sigmoid(r)?;
                let y = reinforce(t, o, alpha)?;
                weigh(t, y)
            })
        }),
        param_check("temporal_update", Kind::Module, POINTS, |s, rng| {
            let p = TemporalParams {
                mhca: AttentionParams::new(s, "mhca", D, H, rng)?,
                residual: false,
            };
            let cur = input(s, "cur", 3, D, rng)?;
            let prev = input(s, "prev", 2, D, rng)?;
            Ok(move |t: &mut Tape| {
                let (c, pv) = (t.param(cur), t.param(prev));
                let mask = segcap_core::ptgformer::temporal_mask(&[1, 2, 7], &[2, 1]);
                let y = temporal_update(t, c, Some(pv), Some(&mask), &p)?;
                weigh(t, y)
            })
        }),
        param_check("fuse", Kind::Module, POINTS, |s, rng| {
            let p = FusionParams {
                mlp_ps: Mlp::new(s, "ps", (D, D, D), Activation::Relu, rng)?,
                mlp_po: Mlp::new(s, "po", (D, D, D), Activation::Relu, rng)?,
            };
            let ft = input(s, "f_tilde", 3, D, rng)?;
            let fe = input(s, "f_e", 2, D, rng)?;
            let a_ps = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0])?;
            let a_po = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?;
            Ok(move |t: &mut Tape| {
                let (f, e) = (t.param(ft), t.param(fe));
                let y = fuse(t, f, e, &a_ps, &a_po, &p)?;
                weigh(t, y)
            })
        }),
        param_check("query_former_attention", Kind::Module, POINTS / 2, |s, rng| {
            let p = GiqParams::new(s, 3, D, H, 1, rng)?;
            let fv = input(s, "f_v", 4, D, rng)?;
            let prior = input(s, "prior", 3, D, rng)?;
            Ok(move |t: &mut Tape| {
                let valid = [true, true, false];
                let mut memory = ContextMemory::new(2);
                let pr = t.param(prior);
                memory_update(t, &mut memory, pr, &valid)?;
                let fq = t.param(p.query);
                let f_cq = textual_query_attend(t, fq, &memory, &p)?;
                let v = t.param(fv);
                let f_vg = visual_graph_attend(t, fq, &valid, v, &p)?;
                let f_vl = visual_language_attend(t, f_vg, f_cq, &p)?;
                weigh(t, f_vl)
            })
        }),
        param_check("mask_logits", Kind::Module, POINTS, |s, rng| {
            let m = MaskHead::new(s, D, rng)?;
            let slots = input(s, "slots", 2, D, rng)?;
            let pix = input(s, "pixels", 5, D, rng)?;
            Ok(move |t: &mut Tape| {
                let (sl, px) = (t.param(slots), t.param(pix));
                let q = m.queries(t, sl)?;
                let y = m.logits(t, q, px)?;
                weigh(t, y)
            })
        }),
        param_check("refer_probs", Kind::Module, POINTS, |s, rng| {
            let r = ReferHead::new(s, D, 5, rng)?;
            let slots = input(s, "slots", 3, D, rng)?;
            Ok(move |t: &mut Tape| {
                let sl = t.param(slots);
                let y = r.probs(t, sl)?;
                weigh(t, y)
            })
        }),
        param_check("caption_forward", Kind::Module, 4, |s, rng| {
            let c = CaptionHead::new(s, 7, D, H, 4, rng)?;
            let fvl = input(s, "f_vl", 3, D, rng)?;
            Ok(move |t: &mut Tape| {
                let f = t.param(fvl);
                let y = c.forward(t, &[0, 3, 5], f, &[true, false, true])?;
                weigh(t, y)
            })
        }),
        param_check("contrastive_embed", Kind::Module, POINTS, |s, rng| {
            let c = ContrastiveHead::new(s, D, rng)?;
            let m = input(s, "masks", 2, D, rng)?;
            let w = input(s, "words", 3, D, rng)?;
            Ok(move |t: &mut Tape| {
                let (mv, wv) = (t.param(m), t.param(w));
                let (a, b) = c.embed(t, mv, wv)?;
                let s = t.matmul_nt(a, b)?;
                weigh(t, s)
            })
        }),
    ]
}

fn losses() -> Vec<Check> {
    let mut out = vec![
        check("caption_ce", Kind::Loss, POINTS, |rng| {
            let x = point(rng, 3, 6);
            let targets = [rng.random_range(0..6), 0, 5];
            grad_check(|t, v| caption_ce(t, v, &targets), &x, STEP)
        }),
        check("mask_loss", Kind::Loss, POINTS, |rng| {
            let x = point(rng, 3, 6);
            let gt: Vec<Vec<bool>> = (0..3).map(|_| (0..6).map(|_| rng.random_bool(0.4)).collect()).collect();
            let targets = MaskTargets::from_pixels(&gt)?;
            grad_check(|t, v| mask_loss(t, v, &targets), &x, STEP)
        }),
        check("fa_loss", Kind::Loss, POINTS, |rng| {
            let x = point(rng, 3, 6);
            let y = Tensor::new(vec![3, 6], (0..18).map(|_| rng.random_bool(0.3) as u8 as f64).collect())?;
            grad_check(
                |t, v| {
                    let p = t.sigmoid(v)?;
                    fa_loss(t, p, &y)
                },
                &x,
                STEP,
            )
        }),
        check("temperature", Kind::Loss, POINTS, |rng| {
            let x = Tensor::new(vec![1, 1], vec![rng.random_range(-3.5..1.0)])?;
            grad_check(
                |t, v| {
                    let tau = temperature(t, v)?;
                    let sq = t.mul(tau, tau)?;
                    t.sum(sq)
                },
                &x,
                STEP,
            )
        }),
        check("total_loss", Kind::Loss, POINTS, |rng| {
            let x = point(rng, 1, 4);
            let lambda = [0.0, 1.0, 2.0, 5.0][rng.random_range(0..4)];
            grad_check(
                |t, v| {
                    let parts: Vec<Var> = (0..4).map(|i| t.select(v, &[i])).collect::<Result<_>>()?;
                    let sq = t.mul(parts[1], parts[1])?;
                    let e = t.exp(parts[2])?;
                    let s = t.sigmoid(parts[3])?;
                    let y = total_loss(t, parts[0], sq, e, s, lambda)?;
                    t.sum(y)
                },
                &x,
                STEP,
            )
        }),
    ];
    for (name, include) in [("mc_loss_verbatim", false), ("mc_loss_standard", true)] {
        out.push(check(name, Kind::Loss, POINTS, move |rng| {
            let m = point(rng, 3, 4);
            let w = point(rng, 4, 4);
            let log_tau = rng.random_range(-1.5..0.5);
            let pairs = ContrastivePairs::from_pairs(3, 4, &[(0, 0), (1, 1), (2, 2), (2, 3)]);
            let mut store = ParamStore::new();
            let mi = store.add("masks", m)?;
            let wi = store.add("words", w)?;
            let ti = store.add("log_tau", Tensor::new(vec![1], vec![log_tau])?)?;
            let r = grad_check_params(
                &store,
                |t, _| {
                    let (mv, wv, lt) = (t.param(mi), t.param(wi), t.param(ti));
                    let tau = temperature(t, lt)?;
                    mc_loss(t, mv, wv, &pairs, tau, include)
                },
                STEP,
                None,
            )?;
            Ok(r.max_rel_err)
        }));
    }
    out.push(check("sample_loss", Kind::Loss, 2, |rng| {
        let gen = GenConfig {
            frames: 2,
            feature_dim: SAMPLE_D,
            ..GenConfig::default()
        };
        let cfg = ModelConfig {
            dim: SAMPLE_D,
            heads: H,
            include_positive_in_denominator: rng.random_bool(0.5),
            detach_words: false,
            init_seed: rng.random(),
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::standard();
        let sample = Sample::from_video(&gen_video(&gen, rng.random_range(0..1000))?, &vocab, &cfg)?;
        let model = Model::new(cfg, vocab)?;
        let coords: Vec<_> = model
            .store
            .ids()
            .flat_map(|id| {
                let n = model.store.get(id).numel();
                [0, n / 2, n - 1].into_iter().map(move |i| (id, i))
            })
            .collect();
        let r = grad_check_params(&model.store, |t, _| Ok(sample_loss(t, &model, &sample)?.total), STEP, Some(&coords))?;
        Ok(r.max_rel_err)
    }));
    out
}

/// Deliberately wrong backward (`2x²` for the derivative of `x³`), used to
/// confirm that the checker catches a broken op.
fn faulty_op() -> Check {
    op("faulty_cube", |t, x| t.map(x, |v| v * v * v, |v| 2.0 * v * v))
}

pub fn registry(inject_fault: bool) -> Vec<Check> {
    let mut all = tape_ops();
    all.extend(layers());
    all.extend(modules());
    all.extend(losses());
    if inject_fault {
        all.push(faulty_op());
    }
    all
}
