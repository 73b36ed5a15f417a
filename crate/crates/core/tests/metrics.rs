mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use segcap_core::data::{gen_video, GenConfig};
use segcap_core::heads::Vocabulary;
use segcap_core::metrics::{
    boundary_f, boundary_tolerance, caption_overlap, class_ap, coco_thresholds, eleven_point_ap, instance_map, jf_mean,
    phrase_similarity, region_j, summarize, EvalRecord, GtEntity, PredInstance, VideoPrediction, VideoTruth,
};
use segcap_core::model::{ModelConfig, Sample};
use segcap_core::Mask;

fn random_mask(r: &mut impl Rng, h: usize, w: usize, density: f64) -> Mask {
    let bits = (0..h * w).map(|_| r.random_bool(density)).collect();
    Mask::from_bits(h, w, bits).unwrap()
}

fn rect(h: usize, w: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> Mask {
    Mask::from_fn(h, w, |y, x| y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw)
}

#[test]
fn region_j_matches_pixel_counts() {
    let mut r = rng(1);
    for _ in 0..200 {
        let a = random_mask(&mut r, 16, 16, 0.4);
        let b = random_mask(&mut r, 16, 16, 0.4);
        let (mut i, mut u) = (0, 0);
        for k in 0..256 {
            let (x, y) = (a.bits()[k], b.bits()[k]);
            i += (x && y) as usize;
            u += (x || y) as usize;
        }
        let want = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        assert_eq!(region_j(&a, &b).unwrap(), want);
    }
    let e = Mask::empty(4, 4);
    assert_eq!(region_j(&e, &e).unwrap(), 1.0);
    assert_eq!(region_j(&rect(4, 4, 0, 0, 2, 2), &rect(4, 4, 2, 2, 2, 2)).unwrap(), 0.0);
    assert!(region_j(&e, &Mask::empty(4, 5)).is_err());
}

/// Pixels of `m` with a 4-neighbour outside the mask or the image.
fn boundary_oracle(m: &Mask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Maximum matching by simple augmenting paths, one left vertex at a time.
fn max_matching_oracle(adj: &[Vec<usize>], right: usize) -> usize {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                    owner[v] = Some(u);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; right];
    (0..adj.len()).filter(|&u| augment(u, adj, &mut vec![false; right], &mut owner)).count()
}

fn boundary_f_oracle(p: &Mask, g: &Mask, tol: i64) -> f64 {
    let bp = boundary_oracle(p);
    let bg = boundary_oracle(g);
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let adj: Vec<Vec<usize>> = bp
        .iter()
        .map(|a| (0..bg.len()).filter(|&j| (a.0 - bg[j].0).abs() <= tol && (a.1 - bg[j].1).abs() <= tol).collect())
        .collect();
    let m = max_matching_oracle(&adj, bg.len()) as f64;
    let (pr, rc) = (m / bp.len() as f64, m / bg.len() as f64);
    if pr + rc == 0.0 {
        0.0
    } else {
        2.0 * pr * rc / (pr + rc)
    }
}

#[test]
fn boundary_f_matches_exhaustive_matching() {
    let mut r = rng(2);
    for k in 0..50 {
        let (p, g) = if k == 0 {
            (rect(8, 8, 1, 1, 5, 5), rect(8, 8, 2, 2, 5, 5))
        } else {
            let a = rect(8, 8, r.random_range(0..4), r.random_range(0..4), r.random_range(1..5), r.random_range(1..5));
            let b = if k % 2 == 0 {
                random_mask(&mut r, 6, 6, 0.5)
            } else {
                rect(8, 8, r.random_range(0..5), r.random_range(0..5), r.random_range(1..4), r.random_range(1..4))
            };
            if b.height() == 6 {
                (random_mask(&mut r, 6, 6, 0.5), b)
            } else {
                (a, b)
            }
        };
        for tol in [0usize, 1, 2] {
            let got = boundary_f(&p, &g, tol).unwrap();
            assert!((got - boundary_f_oracle(&p, &g, tol as i64)).abs() <= 1e-9, "pair {k} tol {tol}");
        }
    }
}

#[test]
fn boundary_f_edge_cases() {
    let a = rect(8, 8, 1, 1, 4, 4);
    assert_eq!(boundary_f(&a, &a, 1).unwrap(), 1.0);
    assert_eq!(boundary_f(&Mask::empty(8, 8), &a, 1).unwrap(), 0.0);
    assert_eq!(boundary_f(&Mask::empty(8, 8), &Mask::empty(8, 8), 1).unwrap(), 1.0);
    assert!(boundary_f(&a, &Mask::empty(8, 7), 1).is_err());
    assert_eq!(boundary_tolerance(64, 64), 1);
    assert_eq!(boundary_tolerance(480, 854), 7);
}

#[test]
fn phrase_similarity_examples() {
    assert_eq!(phrase_similarity(&["red", "canoe"], &["red", "canoe"]), 1.0);
    assert_eq!(phrase_similarity(&["red"], &["blue"]), 0.0);
    assert!((phrase_similarity(&["red", "canoe"], &["a", "Red", "canoe"]) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(phrase_similarity::<&str>(&[], &[]), 1.0);
}

#[test]
fn caption_overlap_examples() {
    let sp = |t: &str| t.starts_with('⟨');
    assert_eq!(caption_overlap(&["a", "b"], &["a", "b"], sp), 1.0);
    assert_eq!(caption_overlap(&["a", "b"], &["c", "d"], sp), 0.0);
    assert!((caption_overlap(&["a", "b", "c", "d"], &["a", "b", "e", "f"], sp) - 0.5).abs() < 1e-15);
    assert_eq!(caption_overlap(&["⟨SEG_C⟩", "a", "⟨/SEG_C⟩"], &["a"], sp), 1.0);
}

fn one_frame_record(pred: Vec<(Mask, Vec<f64>, f64)>, gt: Vec<(Mask, &[&str])>, tokens: &[&str], spans: Vec<(usize, usize)>) -> EvalRecord {
    EvalRecord {
        pred: VideoPrediction {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            spans,
            instances: pred.into_iter().map(|(m, v, c)| PredInstance { masks: vec![m], v, confidence: c }).collect(),
        },
        gt: VideoTruth {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            entities: gt
                .into_iter()
                .map(|(m, p)| GtEntity {
                    masks: vec![m],
                    phrase: p.iter().map(|s| s.to_string()).collect(),
                    class: p.last().unwrap().to_string(),
                })
                .collect(),
        },
    }
}

#[test]
fn jf_single_object_and_flat_average() {
    // J = 0.8 with a shape whose boundary F works out by construction.
    let g = rect(16, 16, 0, 0, 1, 5);
    let p = rect(16, 16, 0, 0, 1, 4);
    let r = one_frame_record(vec![(p.clone(), vec![1.0], 1.0)], vec![(g.clone(), &["x"])], &["x"], vec![(0, 1)]);
    let s = jf_mean(&[r]).unwrap();
    assert!((s.j - 0.8).abs() < 1e-12);
    let f = boundary_f(&p, &g, 1).unwrap();
    assert!((s.jf - (0.8 + f) / 2.0).abs() < 1e-12);

    // Three videos with different entity counts average flatly over (video, entity, frame).
    let mut r2 = rng(3);
    let mut recs = Vec::new();
    let mut flat = Vec::new();
    for n in 1..=3 {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..n {
            let m = random_mask(&mut r2, 8, 8, 0.3);
            // predictions are far from each other so matching is the identity
            let pm = m.clone();
            flat.push((region_j(&pm, &m).unwrap(), boundary_f(&pm, &m, 1).unwrap()));
            preds.push((pm, vec![1.0], 0.5));
            gts.push((m, &["x"][..]));
        }
        recs.push(one_frame_record(preds, gts, &["x"], vec![(0, 1)]));
    }
    let s = jf_mean(&recs).unwrap();
    let j = flat.iter().map(|x| x.0).sum::<f64>() / flat.len() as f64;
    assert!((s.j - j).abs() < 1e-12);
    assert!(jf_mean(&[]).is_err());
}

#[test]
fn eleven_point_ap_examples() {
    assert_eq!(eleven_point_ap(&[true, true], 2), 1.0);
    assert_eq!(eleven_point_ap(&[false, false], 2), 0.0);
    // TP, FP, TP with 2 GT: precision 1 up to recall .5, then 2/3 up to 1.
    let want = (6.0 * 1.0 + 5.0 * 2.0 / 3.0) / 11.0;
    assert!((eleven_point_ap(&[true, false, true], 2) - want).abs() < 1e-12);
}

#[test]
fn class_ap_hand_evaluated_curve() {
    // Three predictions, two GT objects of class "cube".
    let a = rect(8, 8, 0, 0, 4, 4);
    let b = rect(8, 8, 4, 4, 4, 4);
    let toks = ["red", "cube", "blue", "cube"];
    let spans = vec![(0, 2), (2, 4)];
    let v0 = vec![1.0, 1.0, 0.0, 0.0];
    let v1 = vec![0.0, 0.0, 1.0, 1.0];
    let r = one_frame_record(
        vec![
            (a.clone(), v0.clone(), 0.9),               // TP on a
            (rect(8, 8, 0, 4, 4, 4), v1.clone(), 0.8),  // misses everything
            (b.clone(), v1.clone(), 0.7),               // TP on b
        ],
        vec![(a, &["red", "cube"]), (b, &["blue", "cube"])],
        &toks,
        spans,
    );
    let s = class_ap(std::slice::from_ref(&r), &coco_thresholds()).unwrap();
    let want = (6.0 + 5.0 * 2.0 / 3.0) / 11.0;
    assert!((s.ap50 - want).abs() < 1e-12);
    assert!((s.ap - want).abs() < 1e-12);
    // A single prediction and class reduces to a 0/1 precision.
    let one = one_frame_record(vec![(rect(4, 4, 0, 0, 2, 2), vec![1.0], 1.0)], vec![(rect(4, 4, 0, 0, 2, 2), &["cube"])], &["cube"], vec![(0, 1)]);
    assert_eq!(class_ap(std::slice::from_ref(&one), &[0.5]).unwrap().ap, 1.0);
    let wrong = one_frame_record(vec![(rect(4, 4, 0, 0, 2, 2), vec![1.0], 1.0)], vec![(rect(4, 4, 0, 0, 2, 2), &["ball"])], &["cube"], vec![(0, 1)]);
    assert_eq!(class_ap(std::slice::from_ref(&wrong), &[0.5]).unwrap().ap, 0.0);
}

#[test]
fn instance_map_four_instance_ranking() {
    let m: Vec<Mask> = (0..4).map(|k| rect(8, 8, (k / 2) * 4, (k % 2) * 4, 4, 4)).collect();
    let toks = ["red", "cube", "blue", "ball", "green", "cone", "gray", "ring"];
    let spans = vec![(0, 2), (2, 4), (4, 6), (6, 8)];
    let onehot = |s: usize| (0..8).map(|j| if j / 2 == s { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    // Ranked by confidence: correct, wrong phrase, correct, wrong mask.
    let r = one_frame_record(
        vec![
            (m[0].clone(), onehot(0), 0.9),
            (m[1].clone(), onehot(2), 0.8),
            (m[2].clone(), onehot(2), 0.7),
            (Mask::empty(8, 8), onehot(3), 0.6),
        ],
        vec![
            (m[0].clone(), &["red", "cube"]),
            (m[1].clone(), &["blue", "ball"]),
            (m[2].clone(), &["green", "cone"]),
            (m[3].clone(), &["gray", "ring"]),
        ],
        &toks,
        spans,
    );
    // Hits: T F T F with 4 GT. Recall .25 at p 1, .5 at p 2/3.
    let want = (3.0 * 1.0 + 3.0 * 2.0 / 3.0) / 11.0;
    assert!((instance_map(std::slice::from_ref(&r)).unwrap() - want).abs() < 1e-12);
    // Shuffled V rows with perfect masks: every phrase is wrong.
    let mut shuffled = r.clone();
    for (i, inst) in shuffled.pred.instances.iter_mut().enumerate() {
        inst.masks = vec![m[i].clone()];
        inst.v = onehot((i + 1) % 4);
    }
    assert_eq!(instance_map(&[shuffled]).unwrap(), 0.0);
}

fn perfect_records() -> Vec<EvalRecord> {
    static CACHE: std::sync::OnceLock<Vec<EvalRecord>> = std::sync::OnceLock::new();
    CACHE.get_or_init(build_perfect_records).clone()
}

fn build_perfect_records() -> Vec<EvalRecord> {
    let vocab = Vocabulary::standard();
    let cfg = ModelConfig::default();
    (0..6)
        .map(|i| {
            let video = gen_video(&GenConfig::default(), i).unwrap();
            let sample = Sample::from_video(&video, &vocab, &cfg).unwrap();
            let gt = sample.truth();
            let n = gt.tokens.len();
            let spans: Vec<(usize, usize)> = sample.caption.spans.iter().map(|s| (s.start, s.end)).collect();
            let instances = sample
                .caption
                .spans
                .iter()
                .map(|s| PredInstance {
                    masks: sample.entity_masks[s.entity].clone(),
                    v: (0..n).map(|j| if j >= s.start && j < s.end { 1.0 } else { 0.0 }).collect(),
                    confidence: 0.9,
                })
                .collect();
            EvalRecord { pred: VideoPrediction { tokens: gt.tokens.clone(), spans, instances }, gt }
        })
        .collect()
}

#[test]
fn perfect_predictions_score_one() {
    let s = summarize(&perfect_records()).unwrap();
    for (name, v) in s.entries() {
        assert_eq!(v, 1.0, "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn region_j_is_symmetric_and_bounded(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_mask(&mut r, 8, 8, 0.5);
        let b = random_mask(&mut r, 8, 8, 0.5);
        let j = region_j(&a, &b).unwrap();
        prop_assert_eq!(j, region_j(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&j));
        let f = boundary_f(&a, &b, 1).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn adding_correct_pixels_never_lowers_j(seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_mask(&mut r, 8, 8, 0.5);
        let p = random_mask(&mut r, 8, 8, 0.5);
        let mut q = p.clone();
        for y in 0..8 {
            for x in 0..8 {
                if g.get(y, x) && r.random_bool(0.5) {
                    q.set(y, x, true);
                }
            }
        }
        prop_assert!(region_j(&q, &g).unwrap() >= region_j(&p, &g).unwrap());
    }

    #[test]
    fn grounding_is_harder_than_class_ap50(seed in any::<u64>()) {
        let mut recs = perfect_records();
        let mut r = rng(seed);
        for rec in &mut recs {
            for inst in &mut rec.pred.instances {
                inst.confidence = r.random();
                if r.random_bool(0.3) {
                    inst.masks.iter_mut().for_each(|m| *m = Mask::empty(m.height(), m.width()));
                }
                if r.random_bool(0.3) {
                    inst.v.iter_mut().for_each(|x| *x = r.random());
                }
            }
        }
        let ap50 = class_ap(&recs, &[0.5]).unwrap().ap50;
        prop_assert!(instance_map(&recs).unwrap() <= ap50 + 1e-12);
    }
}
