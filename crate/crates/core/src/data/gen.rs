use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::caption::{SegCaption, Span, SpanKind};
use super::{AnnotatedVideo, CaptionPair, GenConfig, COLORS, PREDICATES, SHAPES};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::scenegraph::{Edge, Node, PromptBox, SceneGraph};

/// Used entries of node and edge feature vectors; the rest is zero.
pub(crate) const FEATURE_WIDTH: usize = 18;

/// Geometry of one object in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub cx: f64,
    pub cy: f64,
    pub vx: f64,
    pub vy: f64,
    pub radius: f64,
    pub color: usize,
    pub shape: usize,
}

impl ObjectState {
    fn distance(&self, other: &ObjectState) -> f64 {
        libm::hypot(other.cx - self.cx, other.cy - self.cy)
    }

    fn covers(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let r = self.radius;
        match self.shape {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= 0.9 * r && dy.abs() <= 0.9 * r,
            _ => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// `a` is left of `b`: clearly smaller x, and the offset is mostly horizontal.
pub fn left_of(a: &ObjectState, b: &ObjectState) -> bool {
    let (dx, dy) = (b.cx - a.cx, b.cy - a.cy);
    dx > 4.0 && dx.abs() >= dy.abs()
}

/// `a` is above `b` (image rows grow downward).
pub fn above(a: &ObjectState, b: &ObjectState) -> bool {
    let (dx, dy) = (b.cx - a.cx, b.cy - a.cy);
    dy > 4.0 && dy.abs() > dx.abs()
}

pub fn touching(a: &ObjectState, b: &ObjectState) -> bool {
    a.distance(b) <= a.radius + b.radius + 1.0
}

/// The relative velocity of `a` points toward `b` at more than 0.5 px/frame.
pub fn moving_toward(a: &ObjectState, b: &ObjectState) -> bool {
    let d = a.distance(b);
    if d == 0.0 {
        return false;
    }
    let (ux, uy) = ((b.cx - a.cx) / d, (b.cy - a.cy) / d);
    (a.vx - b.vx) * ux + (a.vy - b.vy) * uy > 0.5
}

pub fn within_gate(a: &ObjectState, b: &ObjectState, gate: f64) -> bool {
    a.distance(b) < gate
}

fn holds(predicate: usize, a: &ObjectState, b: &ObjectState) -> bool {
    match predicate {
        0 => left_of(a, b),
        1 => above(a, b),
        2 => touching(a, b),
        _ => moving_toward(a, b),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Relation {
    Touches,
    MovesToward,
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    fn words(self) -> &'static [&'static str] {
        match self {
            Relation::Touches => &["touches"],
            Relation::MovesToward => &["moves", "toward"],
            Relation::LeftOf => &["is", "left", "of"],
            Relation::RightOf => &["is", "right", "of"],
            Relation::Above => &["is", "above"],
            Relation::Below => &["is", "below"],
        }
    }
}

/// Highest-priority relation of `p` to `n` holding in every frame.
fn stable_relation(p: &[ObjectState], n: &[ObjectState]) -> Option<Relation> {
    let all = |f: &dyn Fn(&ObjectState, &ObjectState) -> bool| p.iter().zip(n).all(|(a, b)| f(a, b));
    if all(&touching) {
        Some(Relation::Touches)
    } else if all(&moving_toward) {
        Some(Relation::MovesToward)
    } else if all(&left_of) {
        Some(Relation::LeftOf)
    } else if all(&|a, b| left_of(b, a)) {
        Some(Relation::RightOf)
    } else if all(&above) {
        Some(Relation::Above)
    } else if all(&|a, b| above(b, a)) {
        Some(Relation::Below)
    } else {
        None
    }
}

fn label(s: &ObjectState) -> String {
    format!("{} {}", COLORS[s.color].name, SHAPES[s.shape])
}

/// Caption for `prompt` if its neighbourhood is stable: 1–2 objects inside
/// the gate in every frame, all others outside it in every frame, each
/// neighbour with a relation holding throughout.
fn describe(tracks: &[Vec<ObjectState>], prompt: usize, gate: f64) -> Option<(SegCaption, Vec<usize>)> {
    let mut neighbours = Vec::new();
    for (j, t) in tracks.iter().enumerate() {
        if j == prompt {
            continue;
        }
        let near = tracks[prompt].iter().zip(t).map(|(a, b)| within_gate(a, b, gate)).collect::<Vec<_>>();
        if near.iter().all(|&x| x) {
            neighbours.push(j);
        } else if near.iter().any(|&x| x) {
            return None;
        }
    }
    if neighbours.is_empty() || neighbours.len() > 2 {
        return None;
    }
    neighbours.sort_by_key(|&j| tracks[j][0].color);
    let mut tokens: Vec<String> = Vec::new();
    let mut spans = Vec::new();
    let mut push_entity = |tokens: &mut Vec<String>, s: &ObjectState, kind| {
        let start = tokens.len();
        tokens.push("the".into());
        tokens.push(COLORS[s.color].name.into());
        tokens.push(SHAPES[s.shape].into());
        let entity = spans.len();
        spans.push(Span { start, end: tokens.len(), kind, entity });
    };
    push_entity(&mut tokens, &tracks[prompt][0], SpanKind::Central);
    for (k, &j) in neighbours.iter().enumerate() {
        let rel = stable_relation(&tracks[prompt], &tracks[j])?;
        if k > 0 {
            tokens.push("and".into());
        }
        tokens.extend(rel.words().iter().map(|w| w.to_string()));
        push_entity(&mut tokens, &tracks[j][0], SpanKind::Association);
    }
    let mut entities = vec![prompt];
    entities.extend(neighbours);
    Some((SegCaption { tokens, spans }, entities))
}

fn sample_velocity(rng: &mut ChaCha8Rng, max_speed: f64) -> (f64, f64) {
    let speed = rng.random_range(0.0..=max_speed);
    let angle = rng.random_range(0.0..core::f64::consts::TAU);
    (speed * libm::cos(angle), speed * libm::sin(angle))
}

fn unroll(cx: f64, cy: f64, v: (f64, f64), radius: f64, color: usize, shape: usize, frames: usize) -> Vec<ObjectState> {
    (0..frames)
        .map(|t| ObjectState {
            cx: cx + v.0 * t as f64,
            cy: cy + v.1 * t as f64,
            vx: v.0,
            vy: v.1,
            radius,
            color,
            shape,
        })
        .collect()
}

/// Candidate layout: the prompt is track 0, neighbours follow, then distractors.
fn propose(rng: &mut ChaCha8Rng, cfg: &GenConfig, count: usize) -> Vec<Vec<ObjectState>> {
    let mut colors: Vec<usize> = (0..COLORS.len()).collect();
    colors.shuffle(rng);
    let size = cfg.size as f64;
    let radius = |rng: &mut ChaCha8Rng| rng.random_range(cfg.min_radius..=cfg.max_radius);
    let shape = |rng: &mut ChaCha8Rng| rng.random_range(0..SHAPES.len());
    let rp = radius(rng);
    let (px, py) = (rng.random_range(0.25 * size..0.75 * size), rng.random_range(0.25 * size..0.75 * size));
    let vp = sample_velocity(rng, cfg.max_speed);
    let sp = shape(rng);
    let mut tracks = vec![unroll(px, py, vp, rp, colors[0], sp, cfg.frames)];
    let neighbours = rng.random_range(1..=(count - 1).min(2));
    for k in 0..count - 1 {
        let rn = radius(rng);
        let sn = shape(rng);
        if k < neighbours {
            let kind = rng.random_range(0..4);
            let (angle, dist, v) = match kind {
                0 => {
                    let a = rng.random_range(0.0..core::f64::consts::TAU);
                    (a, rp + rn - 1.0, vp)
                }
                1 => {
                    let a: f64 = rng.random_range(0.0..core::f64::consts::TAU);
                    let speed = rng.random_range(0.6..0.9);
                    let v = (vp.0 - speed * libm::cos(a), vp.1 - speed * libm::sin(a));
                    (a, rp + rn + rng.random_range(9.0..13.0), v)
                }
                _ => {
                    let base = if kind == 2 { 0.0 } else { core::f64::consts::FRAC_PI_2 };
                    let flip = if rng.random_bool(0.5) { core::f64::consts::PI } else { 0.0 };
                    let a = base + flip + rng.random_range(-0.3..0.3);
                    let jitter = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
                    (a, rp + rn + rng.random_range(3.0..9.0), (vp.0 + jitter.0, vp.1 + jitter.1))
                }
            };
            let (cx, cy) = (px + dist * libm::cos(angle), py + dist * libm::sin(angle));
            tracks.push(unroll(cx, cy, v, rn, colors[k + 1], sn, cfg.frames));
        } else {
            let (cx, cy) = (rng.random_range(0.0..size), rng.random_range(0.0..size));
            let v = sample_velocity(rng, cfg.max_speed);
            tracks.push(unroll(cx, cy, v, rn, colors[k + 1], sn, cfg.frames));
        }
    }
    tracks
}

fn in_bounds(t: &[ObjectState], size: f64) -> bool {
    t.iter().all(|s| s.cx - s.radius >= 1.0 && s.cy - s.radius >= 1.0 && s.cx + s.radius <= size - 1.0 && s.cy + s.radius <= size - 1.0)
}

struct Rendered {
    frames: Vec<Vec<f64>>,
    masks: Vec<Vec<Mask>>,
}

/// Paints objects in `order` (later ones on top) on a black background.
fn render(tracks: &[Vec<ObjectState>], order: &[usize], size: usize, frames: usize) -> Rendered {
    let mut out_frames = Vec::with_capacity(frames);
    let mut masks = vec![Vec::with_capacity(frames); tracks.len()];
    for t in 0..frames {
        let mut owner = vec![usize::MAX; size * size];
        for &o in order {
            let s = &tracks[o][t];
            let y0 = libm::floor(s.cy - s.radius - 1.0).max(0.0) as usize;
            let y1 = (libm::ceil(s.cy + s.radius + 1.0) as usize).min(size);
            let x0 = libm::floor(s.cx - s.radius - 1.0).max(0.0) as usize;
            let x1 = (libm::ceil(s.cx + s.radius + 1.0) as usize).min(size);
            for y in y0..y1 {
                for x in x0..x1 {
                    if s.covers(x as f64 + 0.5, y as f64 + 0.5) {
                        owner[y * size + x] = o;
                    }
                }
            }
        }
        let mut rgb = vec![0.0; size * size * 3];
        for (p, &o) in owner.iter().enumerate() {
            if o != usize::MAX {
                rgb[p * 3..p * 3 + 3].copy_from_slice(&COLORS[tracks[o][t].color].rgb);
            }
        }
        for (o, m) in masks.iter_mut().enumerate() {
            m.push(Mask::from_bits(size, size, owner.iter().map(|&w| w == o).collect()).expect("size matches"));
        }
        out_frames.push(rgb);
    }
    Rendered { frames: out_frames, masks }
}

fn full_area(s: &ObjectState, size: usize) -> usize {
    let mut n = 0;
    for y in 0..size {
        for x in 0..size {
            if s.covers(x as f64 + 0.5, y as f64 + 0.5) {
                n += 1;
            }
        }
    }
    n
}

fn node_feature(s: &ObjectState, m: &Mask, dim: usize, size: usize) -> Result<Vec<f64>> {
    let b = m.bbox()?;
    let z = size as f64;
    let mut f = vec![0.0; dim];
    f[s.color] = 1.0;
    f[6 + s.shape] = 1.0;
    f[9] = b.x0 as f64 / z;
    f[10] = b.y0 as f64 / z;
    f[11] = b.x1 as f64 / z;
    f[12] = b.y1 as f64 / z;
    f[13] = s.cx / z;
    f[14] = s.cy / z;
    f[15] = s.vx;
    f[16] = s.vy;
    f[17] = 1.0;
    Ok(f)
}

fn edge_feature(predicate: usize, a: &ObjectState, b: &ObjectState, dim: usize, size: usize) -> Vec<f64> {
    let z = size as f64;
    let mut f = vec![0.0; dim];
    f[predicate] = 1.0;
    f[4] = (b.cx - a.cx) / z;
    f[5] = (b.cy - a.cy) / z;
    f[6] = a.distance(b) / z;
    f[7] = (a.vx - b.vx) - 0.0;
    f[8] = a.vy - b.vy;
    f[9] = 1.0;
    f
}

fn build_graphs(
    tracks: &[Vec<ObjectState>],
    ids: &[u32],
    masks: &[Vec<Mask>],
    cfg: &GenConfig,
) -> Result<Vec<SceneGraph>> {
    let mut graphs = Vec::with_capacity(cfg.frames);
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    order.sort_by_key(|&o| ids[o]);
    for t in 0..cfg.frames {
        let visible: Vec<usize> = order.iter().copied().filter(|&o| !masks[o][t].is_empty()).collect();
        let mut nodes = Vec::with_capacity(visible.len());
        for &o in &visible {
            nodes.push(Node {
                id: ids[o],
                class_label: label(&tracks[o][t]),
                bbox: masks[o][t].bbox()?,
                feature: node_feature(&tracks[o][t], &masks[o][t], cfg.feature_dim, cfg.size)?,
            });
        }
        let mut edges = Vec::new();
        for &a in &visible {
            for &b in &visible {
                let (sa, sb) = (&tracks[a][t], &tracks[b][t]);
                if a == b || !within_gate(sa, sb, cfg.gate) {
                    continue;
                }
                for (p, name) in PREDICATES.iter().enumerate() {
                    if holds(p, sa, sb) {
                        edges.push(Edge {
                            subject_id: ids[a],
                            object_id: ids[b],
                            predicate: name.to_string(),
                            feature: edge_feature(p, sa, sb, cfg.feature_dim, cfg.size),
                        });
                    }
                }
            }
        }
        graphs.push(SceneGraph { frame_index: t, nodes, edges });
    }
    Ok(graphs)
}

const ATTEMPTS_PER_COUNT: usize = 4000;

/// Renders video `index` of the benchmark seeded by `cfg.seed`.
pub fn gen_video(cfg: &GenConfig, index: u64) -> Result<AnnotatedVideo> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let size = cfg.size;
    let mut count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    loop {
        for _ in 0..ATTEMPTS_PER_COUNT {
            let tracks = propose(&mut rng, cfg, count);
            if !tracks.iter().all(|t| in_bounds(t, size as f64)) {
                continue;
            }
            let Some((caption, entities)) = describe(&tracks, 0, cfg.gate) else { continue };
            let mut order: Vec<usize> = (1..count).collect();
            order.shuffle(&mut rng);
            order.push(0);
            let rendered = render(&tracks, &order, size, cfg.frames);
            let visible_enough = tracks.iter().enumerate().all(|(o, tr)| {
                let area = full_area(&tr[0], size).max(1);
                rendered.masks[o].iter().all(|m| m.area() * 10 >= area * 4)
            });
            if !visible_enough {
                continue;
            }
            let mut ids: Vec<u32> = (0..count as u32).collect();
            ids.shuffle(&mut rng);
            let graphs = build_graphs(&tracks, &ids, &rendered.masks, cfg)?;
            let make_pair = |caption: SegCaption, entities: &[usize]| -> Result<CaptionPair> {
                let prompt = entities[0];
                Ok(CaptionPair {
                    prompt: PromptBox {
                        bbox: rendered.masks[prompt][0].bbox()?,
                        frame_index: 0,
                    },
                    prompt_object: ids[prompt],
                    caption,
                    entity_objects: entities.iter().map(|&e| ids[e]).collect(),
                    association_boxes: entities[1..]
                        .iter()
                        .map(|&e| rendered.masks[e][0].bbox())
                        .collect::<Result<_>>()?,
                })
            };
            let mut pairs = vec![make_pair(caption, &entities)?];
            for o in 1..count {
                if pairs.len() >= cfg.pairs_per_video {
                    break;
                }
                if let Some((c, e)) = describe(&tracks, o, cfg.gate) {
                    pairs.push(make_pair(c, &e)?);
                }
            }
            return Ok(AnnotatedVideo {
                height: size,
                width: size,
                frames: rendered.frames,
                object_ids: ids,
                object_labels: tracks.iter().map(|t| label(&t[0])).collect(),
                masks: rendered.masks,
                tracks,
                graphs,
                pairs,
            });
        }
        if count == cfg.min_objects {
            return Err(Error::Config(format!("no valid layout found for video {index}")));
        }
        count -= 1;
    }
}
