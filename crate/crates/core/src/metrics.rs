//! Segmentation, grounding and caption metrics.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::hungarian_match;
use crate::mask::Mask;

/// Region similarity: intersection over union, 1 when both masks are empty.
pub fn region_j(pred: &Mask, gt: &Mask) -> Result<f64> {
    let inter = pred.intersection(gt)?;
    let union = pred.union(gt)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Boundary tolerance in pixels for an image of the given size.
pub fn boundary_tolerance(height: usize, width: usize) -> usize {
    let diag = libm::sqrt((height * height + width * width) as f64);
    (libm::round(0.0075 * diag) as usize).max(1)
}

/// Boundary F-measure. Boundary pixels are matched one-to-one when their
/// Chebyshev distance is at most `tolerance`.
pub fn boundary_f(pred: &Mask, gt: &Mask, tolerance: usize) -> Result<f64> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape("boundary_f", "mask sizes differ"));
    }
    let bp = pred.boundary();
    let bg = gt.boundary();
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let tol = tolerance as i64;
    let adj: Vec<Vec<usize>> = bp
        .iter()
        .map(|&(py, px)| {
            bg.iter()
                .enumerate()
                .filter(|(_, &(gy, gx))| {
                    (py as i64 - gy as i64).abs() <= tol && (px as i64 - gx as i64).abs() <= tol
                })
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let matched = max_bipartite_matching(&adj, bg.len()) as f64;
    let precision = matched / bp.len() as f64;
    let recall = matched / bg.len() as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Hopcroft–Karp maximum matching size; `adj[u]` lists right vertices of `u`.
pub fn max_bipartite_matching(adj: &[Vec<usize>], right: usize) -> usize {
    const NIL: usize = usize::MAX;
    let left = adj.len();
    let mut match_l = vec![NIL; left];
    let mut match_r = vec![NIL; right];
    let mut dist = vec![0usize; left];
    let mut total = 0;
    loop {
        // BFS layering from free left vertices
        let mut queue = VecDeque::new();
        let mut found = false;
        for u in 0..left {
            if match_l[u] == NIL {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = usize::MAX;
            }
        }
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                let w = match_r[v];
                if w == NIL {
                    found = true;
                } else if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        if !found {
            break;
        }
        fn dfs(u: usize, adj: &[Vec<usize>], ml: &mut [usize], mr: &mut [usize], dist: &mut [usize]) -> bool {
            for &v in &adj[u] {
                let w = mr[v];
                if w == usize::MAX || (dist[w] == dist[u] + 1 && dfs(w, adj, ml, mr, dist)) {
                    ml[u] = v;
                    mr[v] = u;
                    return true;
                }
            }
            dist[u] = usize::MAX;
            false
        }
        for u in 0..left {
            if match_l[u] == NIL && dfs(u, adj, &mut match_l, &mut match_r, &mut dist) {
                total += 1;
            }
        }
    }
    total
}

/// Token Jaccard similarity over lowercased tokens; 1 when both are empty.
pub fn phrase_similarity<S: AsRef<str>>(a: &[S], b: &[S]) -> f64 {
    let sa: Vec<String> = lower_set(a);
    let sb: Vec<String> = lower_set(b);
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.iter().filter(|t| sb.contains(t)).count();
    let union = sa.len() + sb.len() - inter;
    inter as f64 / union as f64
}

fn lower_set<S: AsRef<str>>(xs: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for x in xs {
        let l = x.as_ref().to_lowercase();
        if !out.contains(&l) {
            out.push(l);
        }
    }
    out
}

/// Bag-of-tokens F1 between two token lists, ignoring tokens for which
/// `is_special` holds. 1 when both are empty after filtering.
pub fn caption_overlap<S: AsRef<str>>(pred: &[S], gt: &[S], is_special: impl Fn(&str) -> bool) -> f64 {
    let count = |xs: &[S]| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for x in xs {
            if !is_special(x.as_ref()) {
                *m.entry(String::from(x.as_ref())).or_default() += 1;
            }
        }
        m
    };
    let (cp, cg) = (count(pred), count(gt));
    let np: usize = cp.values().sum();
    let ng: usize = cg.values().sum();
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let overlap: usize = cp.iter().map(|(k, &v)| v.min(cg.get(k).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / np as f64;
    let r = overlap as f64 / ng as f64;
    2.0 * p * r / (p + r)
}

/// One predicted object track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredInstance {
    /// One mask per frame.
    pub masks: Vec<Mask>,
    /// Referring probabilities over caption positions.
    pub v: Vec<f64>,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    /// Content tokens of the generated caption (tags removed).
    pub tokens: Vec<String>,
    /// Tagged spans of the generated caption as `[start, end)` token ranges.
    pub spans: Vec<(usize, usize)>,
    pub instances: Vec<PredInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtEntity {
    pub masks: Vec<Mask>,
    pub phrase: Vec<String>,
    pub class: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoTruth {
    pub tokens: Vec<String>,
    pub entities: Vec<GtEntity>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pred: VideoPrediction,
    pub gt: VideoTruth,
}

/// Sum of per-frame intersections over sum of per-frame unions.
pub fn spatio_temporal_iou(a: &[Mask], b: &[Mask]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("spatio_temporal_iou", "frame counts differ"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += x.intersection(y)?;
        union += x.union(y)?;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

impl VideoPrediction {
    /// Span with the highest mean of `v` over its positions (first on ties).
    pub fn best_span(&self, v: &[f64]) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for &(s, e) in &self.spans {
            if e <= s {
                continue;
            }
            let mean = (s..e).map(|j| v.get(j).copied().unwrap_or(0.0)).sum::<f64>() / (e - s) as f64;
            if best.is_none_or(|(_, b)| mean > b) {
                best = Some(((s, e), mean));
            }
        }
        best.map(|(s, _)| s)
    }

    /// Tokens of the instance's most relevant span.
    pub fn phrase(&self, instance: usize) -> Vec<String> {
        match self.best_span(&self.instances[instance].v) {
            Some((s, e)) => self.tokens[s..e.min(self.tokens.len())].to_vec(),
            None => Vec::new(),
        }
    }

    /// Head noun (last token) of the instance's most relevant span.
    pub fn class(&self, instance: usize) -> String {
        self.phrase(instance).pop().unwrap_or_default()
    }
}

/// GT entity → prediction assignment maximising spatio-temporal IoU.
/// Entry `k` is `None` when entity `k` has no prediction.
pub fn assign_tracks(record: &EvalRecord) -> Result<Vec<Option<usize>>> {
    let ng = record.gt.entities.len();
    let np = record.pred.instances.len();
    if ng == 0 {
        return Ok(Vec::new());
    }
    let cols = np.max(ng);
    let mut cost = vec![0.0; ng * cols];
    for (k, e) in record.gt.entities.iter().enumerate() {
        for (j, p) in record.pred.instances.iter().enumerate() {
            cost[k * cols + j] = -spatio_temporal_iou(&p.masks, &e.masks)?;
        }
    }
    let a = hungarian_match(&cost, ng, cols)?;
    Ok(a.into_iter().map(|j| if j < np { Some(j) } else { None }).collect())
}

/// Region/boundary scores averaged over every (video, entity, frame).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JfScores {
    pub jf: f64,
    pub j: f64,
    pub f: f64,
}

pub fn jf_mean(records: &[EvalRecord]) -> Result<JfScores> {
    let (mut sj, mut sf, mut n) = (0.0, 0.0, 0usize);
    for r in records {
        let assign = assign_tracks(r)?;
        for (k, e) in r.gt.entities.iter().enumerate() {
            for (t, gt) in e.masks.iter().enumerate() {
                let empty;
                let pred = match assign[k] {
                    Some(j) => r.pred.instances[j]
                        .masks
                        .get(t)
                        .ok_or(Error::shape("jf_mean", "prediction has fewer frames"))?,
                    None => {
                        empty = Mask::empty(gt.height(), gt.width());
                        &empty
                    }
                };
                let tol = boundary_tolerance(gt.height(), gt.width());
                sj += region_j(pred, gt)?;
                sf += boundary_f(pred, gt, tol)?;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("jf_mean"));
    }
    let (j, f) = (sj / n as f64, sf / n as f64);
    Ok(JfScores { jf: (j + f) / 2.0, j, f })
}

/// 11-point interpolated average precision from a ranked TP/FP list.
pub fn eleven_point_ap(ranked_tp: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return if ranked_tp.is_empty() { 1.0 } else { 0.0 };
    }
    let mut points = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    for k in 0..=10 {
        let r = k as f64 / 10.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        ap += p;
    }
    ap / 11.0
}

/// Every prediction of every video, ordered by confidence (descending),
/// then video, then instance index.
fn ranked(records: &[EvalRecord]) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(v, r)| (0..r.pred.instances.len()).map(move |i| (v, i)))
        .collect();
    all.sort_by(|a, b| {
        let ca = records[a.0].pred.instances[a.1].confidence;
        let cb = records[b.0].pred.instances[b.1].confidence;
        cb.total_cmp(&ca).then(a.cmp(b))
    });
    all
}

fn iou_table(records: &[EvalRecord]) -> Result<Vec<Vec<Vec<f64>>>> {
    records
        .iter()
        .map(|r| {
            r.pred
                .instances
                .iter()
                .map(|p| r.gt.entities.iter().map(|e| spatio_temporal_iou(&p.masks, &e.masks)).collect())
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApScores {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// Class-level AP over one pooled confidence ranking.
pub fn class_ap(records: &[EvalRecord], thresholds: &[f64]) -> Result<ApScores> {
    let order = ranked(records);
    let ious = iou_table(records)?;
    let classes: Vec<Vec<String>> = records
        .iter()
        .map(|r| (0..r.pred.instances.len()).map(|i| r.pred.class(i)).collect())
        .collect();
    let total_gt: usize = records.iter().map(|r| r.gt.entities.len()).sum();
    let at = |theta: f64| {
        let mut used: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.gt.entities.len()]).collect();
        let mut hits = Vec::with_capacity(order.len());
        for &(v, i) in &order {
            let mut best: Option<(usize, f64)> = None;
            for (k, e) in records[v].gt.entities.iter().enumerate() {
                if used[v][k] || e.class != classes[v][i] {
                    continue;
                }
                let iou = ious[v][i][k];
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((k, iou));
                }
            }
            let hit = match best {
                Some((k, iou)) if iou >= theta - 1e-12 => {
                    used[v][k] = true;
                    true
                }
                _ => false,
            };
            hits.push(hit);
        }
        eleven_point_ap(&hits, total_gt)
    };
    let ap = if thresholds.is_empty() {
        0.0
    } else {
        thresholds.iter().map(|&t| at(t)).sum::<f64>() / thresholds.len() as f64
    };
    Ok(ApScores {
        ap,
        ap50: at(0.5),
        ap75: at(0.75),
    })
}

/// Instance-level AP: a prediction counts when its best unmatched
/// ground-truth overlap reaches 0.5 and its grounded phrase has similarity
/// above 0.5 with that entity's phrase. Entities are consumed only by hits.
pub fn instance_map(records: &[EvalRecord]) -> Result<f64> {
    let order = ranked(records);
    let ious = iou_table(records)?;
    let total_gt: usize = records.iter().map(|r| r.gt.entities.len()).sum();
    let mut used: Vec<Vec<bool>> = records.iter().map(|r| vec![false; r.gt.entities.len()]).collect();
    let mut hits = Vec::with_capacity(order.len());
    for &(v, i) in &order {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..records[v].gt.entities.len() {
            if used[v][k] {
                continue;
            }
            let iou = ious[v][i][k];
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((k, iou));
            }
        }
        let hit = match best {
            Some((k, iou)) if iou >= 0.5 => {
                let phrase = records[v].pred.phrase(i);
                if phrase_similarity(&phrase, &records[v].gt.entities[k].phrase) > 0.5 {
                    used[v][k] = true;
                    true
                } else {
                    false
                }
            }
            _ => false,
        };
        hits.push(hit);
    }
    Ok(eleven_point_ap(&hits, total_gt))
}

/// Every reported metric over one evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub instance_map: f64,
    pub caption_f1: f64,
}

impl EvalSummary {
    /// `(name, value)` pairs in report order.
    pub fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("J", self.j),
            ("F", self.f),
            ("J&F", self.jf),
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("instance_mAP", self.instance_map),
            ("caption_F1", self.caption_f1),
        ]
    }
}

/// Computes all metrics; caption F1 is the mean per-video token overlap
/// with tags and special tokens excluded.
pub fn summarize(records: &[EvalRecord]) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::Empty("summarize"));
    }
    let jf = jf_mean(records)?;
    let ap = class_ap(records, &coco_thresholds())?;
    let special = |t: &str| t.starts_with('⟨');
    let caption_f1 = records
        .iter()
        .map(|r| caption_overlap(&r.pred.tokens, &r.gt.tokens, special))
        .sum::<f64>()
        / records.len() as f64;
    Ok(EvalSummary {
        j: jf.j,
        f: jf.f,
        jf: jf.jf,
        ap: ap.ap,
        ap50: ap.ap50,
        ap75: ap.ap75,
        instance_map: instance_map(records)?,
        caption_f1,
    })
}
