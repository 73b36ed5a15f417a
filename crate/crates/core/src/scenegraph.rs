//! Per-frame scene graphs, prompt binding and the prompt-centred subgraph.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Pixel box with exclusive ends: covers columns `x0..x1` and rows `y0..y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i32; 4]", into = "[i32; 4]")]
pub struct BBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl From<[i32; 4]> for BBox {
    fn from(v: [i32; 4]) -> Self {
        BBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] }
    }
}

impl From<BBox> for [i32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        if !b.is_proper() {
            return Err(Error::InvalidGraph(format!("degenerate box {:?}", <[i32; 4]>::from(b))));
        }
        Ok(b)
    }

    pub fn is_proper(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.x0 >= 0 && self.y0 >= 0 && self.x1 as i64 <= width as i64 && self.y1 as i64 <= height as i64
    }

    pub fn area(&self) -> i64 {
        if self.is_proper() {
            (self.x1 - self.x0) as i64 * (self.y1 - self.y0) as i64
        } else {
            0
        }
    }

    pub fn intersection(&self, other: &BBox) -> i64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0) as i64;
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0) as i64;
        w * h
    }

    /// Pixel-count IoU; 0 when both boxes are empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: u32,
    pub class_label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub subject_id: u32,
    pub object_id: u32,
    pub predicate: String,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub frame_index: usize,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub frame_index: usize,
}

impl SceneGraph {
    pub fn node(&self, id: u32) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: u32) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Checks ids, endpoints, boxes against the frame and feature widths.
    pub fn validate(&self, width: usize, height: usize, dim: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id) {
                return Err(Error::InvalidGraph(format!("duplicate node id {}", n.id)));
            }
            if !n.bbox.is_proper() || !n.bbox.inside(width, height) {
                return Err(Error::InvalidGraph(format!("node {} box out of frame", n.id)));
            }
            if n.feature.len() != dim || n.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidGraph(format!("node {} feature width", n.id)));
            }
        }
        for e in &self.edges {
            if e.subject_id == e.object_id {
                return Err(Error::InvalidGraph(format!("self edge on {}", e.subject_id)));
            }
            for id in [e.subject_id, e.object_id] {
                if !seen.contains(&id) {
                    return Err(Error::InvalidGraph(format!("dangling edge endpoint {id}")));
                }
            }
            if e.feature.len() != dim || e.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidGraph(format!("edge {}->{} feature width", e.subject_id, e.object_id)));
            }
        }
        Ok(())
    }

    /// `[L_o, dim]` node feature matrix in node order.
    pub fn node_features(&self, dim: usize) -> Result<Tensor> {
        stack(self.nodes.iter().map(|n| n.feature.as_slice()), self.nodes.len(), dim)
    }

    /// `[L_e, dim]` edge feature matrix in edge order.
    pub fn edge_features(&self, dim: usize) -> Result<Tensor> {
        stack(self.edges.iter().map(|e| e.feature.as_slice()), self.edges.len(), dim)
    }
}

fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>, n: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::shape("scene graph features", format!("row of {} for width {dim}", r.len())));
        }
        data.extend_from_slice(r);
    }
    Tensor::new(vec![n, dim], data)
}

/// Node whose box best overlaps the prompt; ties go to the smallest id.
pub fn locate_prompt_node(g: &SceneGraph, p: &PromptBox) -> Result<u32> {
    let mut best: Option<(f64, u32)> = None;
    for n in &g.nodes {
        let iou = n.bbox.iou(&p.bbox);
        best = match best {
            Some((b, id)) if b > iou || (b == iou && id < n.id) => Some((b, id)),
            _ => Some((iou, n.id)),
        };
    }
    match best {
        None => Err(Error::Empty("locate_prompt_node")),
        Some((iou, _)) if iou < 0.1 => Err(Error::PromptUnmatched { best_iou: iou }),
        Some((_, id)) => Ok(id),
    }
}

/// The prompt node, its 1-hop neighbours and the edges touching the prompt.
/// Nodes are sorted by id, edges by (subject, object, predicate).
pub fn coarse_subgraph(g: &SceneGraph, prompt_id: u32) -> Result<SceneGraph> {
    if g.node(prompt_id).is_none() {
        return Err(Error::UnknownNode(prompt_id));
    }
    let mut edges: Vec<Edge> = g
        .edges
        .iter()
        .filter(|e| e.subject_id == prompt_id || e.object_id == prompt_id)
        .cloned()
        .collect();
    edges.sort_by(|a, b| {
        (a.subject_id, a.object_id, &a.predicate).cmp(&(b.subject_id, b.object_id, &b.predicate))
    });
    let mut keep = BTreeSet::new();
    keep.insert(prompt_id);
    for e in &edges {
        keep.insert(e.subject_id);
        keep.insert(e.object_id);
    }
    let mut nodes = Vec::with_capacity(keep.len());
    for id in keep {
        nodes.push(g.node(id).ok_or(Error::UnknownNode(id))?.clone());
    }
    Ok(SceneGraph {
        frame_index: g.frame_index,
        nodes,
        edges,
    })
}

/// `(A_ps, A_po)`, each `[L_e, L_o]`: row `e` is one-hot on edge `e`'s
/// subject (resp. object) node.
pub fn adjacency_matrices(g: &SceneGraph) -> Result<(Tensor, Tensor)> {
    let (le, lo) = (g.edges.len(), g.nodes.len());
    let mut ps = vec![0.0; le * lo];
    let mut po = vec![0.0; le * lo];
    for (e, edge) in g.edges.iter().enumerate() {
        let s = g.node_index(edge.subject_id).ok_or(Error::UnknownNode(edge.subject_id))?;
        let o = g.node_index(edge.object_id).ok_or(Error::UnknownNode(edge.object_id))?;
        ps[e * lo + s] = 1.0;
        po[e * lo + o] = 1.0;
    }
    Ok((Tensor::new(vec![le, lo], ps)?, Tensor::new(vec![le, lo], po)?))
}

/// Copies `n` rows into `slots` zero-initialised rows and marks them valid.
pub fn pad_to_slots(features: &Tensor, slots: usize) -> Result<(Tensor, Vec<bool>)> {
    if features.rank() != 2 {
        return Err(Error::shape("pad_to_slots", format!("{:?}", features.shape())));
    }
    let (n, d) = (features.rows(), features.cols());
    if n > slots {
        return Err(Error::Capacity {
            op: "pad_to_slots",
            needed: n,
            capacity: slots,
        });
    }
    let mut data = features.data().to_vec();
    data.resize(slots * d, 0.0);
    let mask = (0..slots).map(|i| i < n).collect();
    Ok((Tensor::new(vec![slots, d], data)?, mask))
}
