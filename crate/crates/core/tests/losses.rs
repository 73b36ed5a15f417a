mod common;

use common::*;
use proptest::prelude::*;
use segcap_core::losses::{
    caption_ce, fa_loss, mask_loss, mc_loss, temperature, total_loss, ContrastivePairs, MaskTargets, PROB_EPS,
};
use segcap_core::numerics::{grad_check, Tape, Tensor};
use segcap_core::Error;

fn scalar(tape: &mut Tape, x: f64) -> segcap_core::Var {
    tape.constant(Tensor::new(vec![1, 1], vec![x]).unwrap())
}

fn nll_oracle(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut s = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        s += -(row[t] - m - z.ln());
    }
    s / targets.len() as f64
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[5, 64]));
    let v = caption_ce(&mut tape, l, &[3, 4, 5, 6, 63]).unwrap();
    assert!((tape.value(v).item().unwrap() - 64f64.ln()).abs() <= 1e-9);
}

#[test]
fn confident_logits_give_near_zero() {
    let targets = [4, 7, 9];
    let mut rows = vec![vec![0.0; 12]; 3];
    for (r, &t) in rows.iter_mut().zip(&targets) {
        r[t] = 20.0;
    }
    let mut tape = Tape::new();
    let l = tape.constant(tensor(&rows));
    let v = caption_ce(&mut tape, l, &targets).unwrap();
    assert!(tape.value(v).item().unwrap() <= 1e-7);
}

#[test]
fn caption_ce_matches_scalar_oracle_and_skips_pad() {
    let rows = random_rows(&mut rng(1), 4, 10);
    let targets = [3, 0, 8, 5];
    let mut tape = Tape::new();
    let l = tape.constant(tensor(&rows));
    let v = caption_ce(&mut tape, l, &targets).unwrap();
    let kept: Vec<Vec<f64>> = vec![rows[0].clone(), rows[2].clone(), rows[3].clone()];
    assert!((tape.value(v).item().unwrap() - nll_oracle(&kept, &[3, 8, 5])).abs() < 1e-12);
    let all_pad = caption_ce(&mut tape, l, &[0; 4]);
    assert!(matches!(all_pad, Err(Error::Empty(_))));
    assert!(caption_ce(&mut tape, l, &[1, 2]).is_err());
}

#[test]
fn mask_loss_hand_example() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[1, 4]));
    let t = MaskTargets::from_pixels(&[vec![true; 4]]).unwrap();
    let v = mask_loss(&mut tape, l, &t).unwrap();
    let want = 2f64.ln() + 2.0 / 7.0;
    assert!((tape.value(v).item().unwrap() - want).abs() < 1e-12);
}

#[test]
fn mask_loss_perfect_predictions() {
    let gt = vec![vec![true, false, false, true], vec![false; 4]];
    let logits: Vec<Vec<f64>> = gt.iter().map(|g| g.iter().map(|&b| if b { 20.0 } else { -20.0 }).collect()).collect();
    let mut tape = Tape::new();
    let l = tape.constant(tensor(&logits));
    let v = mask_loss(&mut tape, l, &MaskTargets::from_pixels(&gt).unwrap()).unwrap();
    assert!(tape.value(v).item().unwrap() <= 1e-6);
    let empty = tape.constant(Tensor::zeros(&[0, 4]));
    assert!(mask_loss(&mut tape, empty, &MaskTargets::from_pixels(&[]).unwrap()).is_err());
}

#[test]
fn grouped_mask_targets_equal_per_pixel_loss() {
    // Pixels 0,1 share one logit and pixels 2,3,4 another.
    let z = [0.7, -1.3];
    let gt = [true, false, true, true, false];
    let groups = [0, 0, 1, 1, 1];
    let mut tape = Tape::new();
    let per_pixel = tape.constant(Tensor::new(vec![1, 5], groups.iter().map(|&g| z[g]).collect()).unwrap());
    let a = mask_loss(&mut tape, per_pixel, &MaskTargets::from_pixels(&[gt.to_vec()]).unwrap()).unwrap();
    let grouped = tape.constant(Tensor::new(vec![1, 2], z.to_vec()).unwrap());
    let t = MaskTargets {
        fg: Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
        bg: Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
        pixels: 5,
    };
    let b = mask_loss(&mut tape, grouped, &t).unwrap();
    assert!((tape.value(a).item().unwrap() - tape.value(b).item().unwrap()).abs() < 1e-12);
}

#[test]
fn fa_loss_examples() {
    let y = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let half = tape.constant(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
    let v = fa_loss(&mut tape, half, &y).unwrap();
    assert!((tape.value(v).item().unwrap() - 2f64.ln()).abs() <= 1e-9);
    let exact = tape.constant(y.clone());
    let v = fa_loss(&mut tape, exact, &y).unwrap();
    assert!(tape.value(v).item().unwrap() <= 2e-6);
    let p = [0.2, 0.9, 0.4, 0.35, 0.6, 0.05];
    let vv = tape.constant(Tensor::new(vec![2, 3], p.to_vec()).unwrap());
    let v = fa_loss(&mut tape, vv, &y).unwrap();
    let want: f64 = p
        .iter()
        .zip(y.data())
        .map(|(&p, &t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
        .sum::<f64>()
        / 6.0;
    assert!((tape.value(v).item().unwrap() - want).abs() < 1e-12);
    let bad = tape.constant(Tensor::new(vec![2, 3], vec![1.5; 6]).unwrap());
    assert!(matches!(fa_loss(&mut tape, bad, &y), Err(Error::Contract { .. })));
    let wrong = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(fa_loss(&mut tape, wrong, &y).is_err());
    assert!(PROB_EPS == 1e-7);
}

#[test]
fn total_loss_examples() {
    let mut tape = Tape::new();
    let [a, b, c, d] = [1.0, 2.0, 3.0, 4.0].map(|x| scalar(&mut tape, x));
    let t = total_loss(&mut tape, a, b, c, d, 2.0).unwrap();
    assert_eq!(tape.value(t).item().unwrap(), 14.0);
    let t0 = total_loss(&mut tape, a, b, c, d, 0.0).unwrap();
    assert_eq!(tape.value(t0).item().unwrap(), 6.0);
    assert!(total_loss(&mut tape, a, b, c, d, f64::NAN).is_err());
}

/// Term-by-term evaluation of the contrastive objective.
fn mc_oracle(m: &[Vec<f64>], w: &[Vec<f64>], pairs: &[(usize, usize)], tau: f64, incl: bool) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau;
    let side = |a: &[Vec<f64>], b: &[Vec<f64>], pos: &dyn Fn(usize) -> Vec<usize>| {
        let mut total = 0.0;
        for i in 0..a.len() {
            let p = pos(i);
            let den: f64 = (0..b.len()).filter(|&j| j != i).map(|j| dot(&a[i], &b[j]).exp()).sum();
            let mut acc = 0.0;
            for &s in &p {
                let num = dot(&a[i], &b[s]).exp();
                let d = if incl { den + num } else { den };
                acc += -(num / d).ln();
            }
            total += acc / p.len() as f64;
        }
        total
    };
    let mp = |i: usize| pairs.iter().filter(|p| p.0 == i).map(|p| p.1).collect::<Vec<_>>();
    let wp = |j: usize| pairs.iter().filter(|p| p.1 == j).map(|p| p.0).collect::<Vec<_>>();
    side(m, w, &mp) + side(w, m, &wp)
}

fn run_mc(m: &[Vec<f64>], w: &[Vec<f64>], pairs: &[(usize, usize)], tau: f64, incl: bool) -> f64 {
    let mut tape = Tape::new();
    let mv = tape.constant(tensor(&m.to_vec()));
    let wv = tape.constant(tensor(&w.to_vec()));
    let t = scalar(&mut tape, tau);
    let p = ContrastivePairs::from_pairs(m.len(), w.len(), pairs);
    let l = mc_loss(&mut tape, mv, wv, &p, t, incl).unwrap();
    tape.value(l).item().unwrap()
}

#[test]
fn identical_embeddings_give_zero_verbatim() {
    let e = vec![vec![0.3, -0.2, 0.5]; 2];
    let v = run_mc(&e, &e, &[(0, 0), (1, 1)], 1.0, false);
    assert!(v.abs() <= 1e-9);
    // Standard variant: each of four terms is ln 2.
    let s = run_mc(&e, &e, &[(0, 0), (1, 1)], 1.0, true);
    assert!((s - 4.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn orthonormal_embeddings_enumerated() {
    let eye: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let pairs = [(0, 0), (1, 1), (2, 2)];
    // Every term is −ln(e / 2).
    let want = 6.0 * -(1f64.exp() / 2.0).ln();
    assert!((run_mc(&eye, &eye, &pairs, 1.0, false) - want).abs() < 1e-12);
    assert!((mc_oracle(&eye, &eye, &pairs, 1.0, false) - want).abs() < 1e-12);
}

#[test]
fn mc_matches_oracle_with_shared_positives() {
    let m = random_rows(&mut rng(2), 3, 4);
    let w = random_rows(&mut rng(3), 4, 4);
    let pairs = [(0, 0), (0, 1), (1, 2), (2, 3), (2, 0)];
    for incl in [false, true] {
        let got = run_mc(&m, &w, &pairs, 0.3, incl);
        assert!((got - mc_oracle(&m, &w, &pairs, 0.3, incl)).abs() < 1e-10);
    }
}

#[test]
fn mc_rejects_bad_batches() {
    let mut tape = Tape::new();
    let one = tape.constant(Tensor::zeros(&[1, 3]));
    let two = tape.constant(Tensor::zeros(&[2, 3]));
    let t = scalar(&mut tape, 1.0);
    let p = ContrastivePairs::from_pairs(1, 2, &[(0, 0)]);
    assert!(matches!(mc_loss(&mut tape, one, two, &p, t, false), Err(Error::Contract { .. })));
    let lonely = ContrastivePairs::from_pairs(2, 2, &[(0, 0), (1, 0)]);
    assert!(matches!(mc_loss(&mut tape, two, two, &lonely, t, false), Err(Error::Contract { .. })));
}

#[test]
fn temperature_is_clamped() {
    let mut tape = Tape::new();
    for (lt, want) in [(0.07f64.ln(), 0.07), (-10.0, 0.01), (3.0, 1.0)] {
        let x = scalar(&mut tape, lt);
        let t = temperature(&mut tape, x).unwrap();
        assert!((tape.value(t).item().unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn losses_pass_gradient_checks() {
    let mut r = rng(4);
    for trial in 0..10 {
        let x = tensor(&random_rows(&mut r, 3, 6));
        let targets = [1 + trial % 5, 0, 5];
        let err = grad_check(|t, v| caption_ce(t, v, &targets), &x, 1e-5).unwrap();
        assert!(err <= 1e-4, "caption_ce {err}");

        let gt = MaskTargets::from_pixels(&[
            (0..6).map(|k| (k + trial) % 3 == 0).collect(),
            (0..6).map(|k| k % 2 == 0).collect(),
            vec![false; 6],
        ])
        .unwrap();
        let err = grad_check(|t, v| mask_loss(t, v, &gt), &x, 1e-5).unwrap();
        assert!(err <= 1e-4, "mask_loss {err}");

        let y = Tensor::new(vec![3, 6], (0..18).map(|k| ((k + trial) % 4 == 0) as u8 as f64).collect()).unwrap();
        let err = grad_check(
            |t, v| {
                let p = t.sigmoid(v)?;
                fa_loss(t, p, &y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "fa_loss {err}");

        let w = tensor(&random_rows(&mut r, 4, 6));
        let pairs = ContrastivePairs::from_pairs(3, 4, &[(0, 0), (1, 1), (2, 2), (2, 3)]);
        for incl in [false, true] {
            let err = grad_check(
                |t, v| {
                    let wv = t.constant(w.clone());
                    let tau = scalar(t, 0.5);
                    mc_loss(t, v, wv, &pairs, tau, incl)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "mc_loss {err}");
        }
        let lt = Tensor::new(vec![1, 1], vec![-0.8]).unwrap();
        let mv = x.clone();
        let err = grad_check(
            |t, v| {
                let m = t.constant(mv.clone());
                let wv = t.constant(w.clone());
                let tau = temperature(t, v)?;
                mc_loss(t, m, wv, &pairs, tau, false)
            },
            &lt,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "mc_loss τ {err}");
    }
}

#[test]
fn total_gradient_is_weighted_sum() {
    let x = tensor(&random_rows(&mut rng(5), 1, 4));
    let err = grad_check(
        |t, v| {
            let a = t.sum(v)?;
            let sq = t.mul(v, v)?;
            let b = t.sum(sq)?;
            let e = t.exp(v)?;
            let c = t.mean(e)?;
            let d = t.sigmoid(v)?;
            let d = t.sum(d)?;
            total_loss(t, a, b, c, d, 2.0)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4);
}

proptest! {
    #[test]
    fn fa_loss_is_non_negative(seed in any::<u64>()) {
        let p: Vec<f64> = random_rows(&mut rng(seed), 2, 4).remove(0).iter().chain(random_rows(&mut rng(seed ^ 9), 1, 4)[0].iter()).map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let y = Tensor::new(vec![2, 4], (0..8).map(|k| ((seed >> k) & 1) as f64).collect()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![2, 4], p).unwrap());
        let l = fa_loss(&mut tape, v, &y).unwrap();
        prop_assert!(tape.value(l).item().unwrap() >= 0.0);
    }

    #[test]
    fn total_is_linear_in_lambda(parts in prop::array::uniform4(-5.0f64..5.0), lambda in 0.0f64..10.0) {
        let mut tape = Tape::new();
        let [a, b, c, d] = parts.map(|x| scalar(&mut tape, x));
        let t = total_loss(&mut tape, a, b, c, d, lambda).unwrap();
        let t0 = total_loss(&mut tape, a, b, c, d, 0.0).unwrap();
        let diff = tape.value(t).item().unwrap() - tape.value(t0).item().unwrap();
        prop_assert!((diff - lambda * parts[3]).abs() < 1e-9);
    }

    #[test]
    fn permuting_negatives_keeps_mc(seed in any::<u64>()) {
        let m = random_rows(&mut rng(seed), 3, 3);
        let w = random_rows(&mut rng(seed ^ 5), 3, 3);
        let base = run_mc(&m, &w, &[(0, 0), (1, 1), (2, 2)], 0.5, false);
        // Swapping items 1 and 2 on both sides relabels the same problem.
        let m2 = vec![m[0].clone(), m[2].clone(), m[1].clone()];
        let w2 = vec![w[0].clone(), w[2].clone(), w[1].clone()];
        let swapped = run_mc(&m2, &w2, &[(0, 0), (1, 1), (2, 2)], 0.5, false);
        prop_assert!((base - swapped).abs() < 1e-9);
    }

    #[test]
    fn lowering_a_negative_similarity_lowers_mc(seed in any::<u64>(), a in -2.0f64..2.0, drop in 0.01f64..1.0) {
        // A private coordinate shared only by mask 0 and word 1 moves m0·s1 alone.
        let mut m = random_rows(&mut rng(seed), 3, 4);
        let mut w = random_rows(&mut rng(seed ^ 7), 3, 4);
        for r in m.iter_mut().chain(w.iter_mut()) {
            r[3] = 0.0;
        }
        m[0][3] = 1.0;
        w[1][3] = a;
        let pairs = [(0, 0), (1, 1), (2, 2)];
        let before = run_mc(&m, &w, &pairs, 0.5, false);
        w[1][3] = a - drop;
        let after = run_mc(&m, &w, &pairs, 0.5, false);
        prop_assert!(after < before);
    }
}
