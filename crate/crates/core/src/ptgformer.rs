//! Prompt-guided temporal graph encoder: association scoring, reinforcement,
//! temporal update across frames and edge-to-node fusion.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, AttentionParams, Mlp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scenegraph::{adjacency_matrices, coarse_subgraph, locate_prompt_node, PromptBox, SceneGraph};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptorParams {
    pub mhsa: AttentionParams,
    pub score: Mlp,
    /// Added to the prompt node's feature row before scoring; starts at zero.
    pub prompt_embedding: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemporalParams {
    pub mhca: AttentionParams,
    /// Adds the current features back onto the attention output.
    #[serde(default)]
    pub residual: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionParams {
    pub mlp_ps: Mlp,
    pub mlp_po: Mlp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PtgParams {
    pub adaptor: AdaptorParams,
    pub temporal: TemporalParams,
    pub fusion: FusionParams,
}

/// Which encoder components are active; switching one off gives the
/// ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtgVariant {
    /// Off: every association score is the constant 0.5.
    pub spatial: bool,
    /// Off: the temporal update is the identity for all frames.
    pub temporal: bool,
}

impl Default for PtgVariant {
    fn default() -> Self {
        PtgVariant {
            spatial: true,
            temporal: true,
        }
    }
}

impl PtgParams {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let half = (dim / 2).max(1);
        Ok(PtgParams {
            adaptor: AdaptorParams {
                mhsa: AttentionParams::new(store, "ptg.adaptor.mhsa", dim, heads, rng)?,
                score: Mlp::new(store, "ptg.adaptor.score", (dim, half, 1), Activation::Relu, rng)?,
                prompt_embedding: store.add_zeros("ptg.adaptor.prompt", &[1, dim])?,
            },
            temporal: TemporalParams {
                mhca: AttentionParams::new(store, "ptg.temporal.mhca", dim, heads, rng)?,
                residual: false,
            },
            fusion: FusionParams {
                mlp_ps: Mlp::new(store, "ptg.fusion.ps", (dim, dim, dim), Activation::Relu, rng)?,
                mlp_po: Mlp::new(store, "ptg.fusion.po", (dim, dim, dim), Activation::Relu, rng)?,
            },
        })
    }
}

/// Fixed-slot graph feature of one frame.
#[derive(Clone, Debug)]
pub struct GraphFeature {
    /// `[L, D]`; rows of invalid slots are exactly zero.
    pub values: Var,
    pub valid: Vec<bool>,
    /// Node id held by each valid slot, in slot order.
    pub node_ids: Vec<u32>,
    pub frame_index: usize,
    /// `[n, 1]` association scores of the valid slots.
    pub alpha: Var,
}

impl GraphFeature {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Per-node association strengths in (0, 1), as an `[L_o, 1]` column.
/// `f_e` may be `None` when the graph has no edges.
pub fn association_scores(tape: &mut Tape, f_o: Var, f_e: Option<Var>, p: &AdaptorParams) -> Result<Var> {
    let lo = tape.value(f_o).shape()[0];
    if lo == 0 {
        return Err(Error::Empty("association_scores"));
    }
    let tokens = match f_e {
        Some(e) if tape.value(e).shape()[0] > 0 => tape.concat_rows(&[f_o, e])?,
        _ => f_o,
    };
    let mixed = p.mhsa.mhsa(tape, tokens, None)?;
    let nodes = if tape.value(mixed).shape()[0] == lo {
        mixed
    } else {
        tape.rows(mixed, 0, lo)?
    };
    let s = p.score.forward(tape, nodes)?;
    tape.sigmoid(s)
}

/// Scales row `i` of `f_o` by `1 + α_i`.
pub fn reinforce(tape: &mut Tape, f_o: Var, alpha: Var) -> Result<Var> {
    let a = tape.value(alpha);
    if a.numel() != tape.value(f_o).shape()[0] {
        return Err(Error::shape(
            "reinforce",
            format!("{} scores for {:?}", a.numel(), tape.value(f_o).shape()),
        ));
    }
    if let Some(bad) = a.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract("reinforce", format!("association score {bad} outside [0, 1]")));
    }
    let scaled = tape.mul_col(f_o, alpha)?;
    tape.add(f_o, scaled)
}

/// Attention mask for the temporal update: a node seen in the previous
/// frame attends only to its own previous row, a new node to all of them.
pub fn temporal_mask(cur_ids: &[u32], prev_ids: &[u32]) -> Vec<bool> {
    let mut mask = Vec::with_capacity(cur_ids.len() * prev_ids.len());
    for id in cur_ids {
        let matched = prev_ids.contains(id);
        mask.extend(prev_ids.iter().map(|p| !matched || p == id));
    }
    mask
}

/// Cross-attends the current reinforced features to the previous frame's.
/// Without a previous frame the input is returned unchanged.
pub fn temporal_update(
    tape: &mut Tape,
    cur: Var,
    prev: Option<Var>,
    mask: Option<&[bool]>,
    p: &TemporalParams,
) -> Result<Var> {
    let Some(prev) = prev else { return Ok(cur) };
    if tape.value(prev).shape().get(1) != tape.value(cur).shape().get(1) {
        return Err(Error::shape(
            "temporal_update",
            format!("{:?} vs {:?}", tape.value(cur).shape(), tape.value(prev).shape()),
        ));
    }
    p.mhca.mhca(tape, cur, prev, prev, mask)
}

/// `f̃ + MLP_ps(A_psᵀ f_e) + MLP_po(A_poᵀ f_e)`. With no edges `f̃` is returned.
pub fn fuse(tape: &mut Tape, f_tilde: Var, f_e: Var, a_ps: &Tensor, a_po: &Tensor, p: &FusionParams) -> Result<Var> {
    let le = tape.value(f_e).shape()[0];
    if le == 0 {
        return Ok(f_tilde);
    }
    let lo = tape.value(f_tilde).shape()[0];
    for a in [a_ps, a_po] {
        if a.shape() != [le, lo] {
            return Err(Error::shape("fuse", format!("adjacency {:?} for {le} edges, {lo} nodes", a.shape())));
        }
    }
    let ps_t = tape.constant(a_ps.transpose());
    let po_t = tape.constant(a_po.transpose());
    let agg_s = tape.matmul(ps_t, f_e)?;
    let agg_o = tape.matmul(po_t, f_e)?;
    let term_s = p.mlp_ps.forward(tape, agg_s)?;
    let term_o = p.mlp_po.forward(tape, agg_o)?;
    let out = tape.add(f_tilde, term_s)?;
    tape.add(out, term_o)
}

/// Zero-pads `x` (`[n, D]`) to `[slots, D]`.
pub fn pad_rows(tape: &mut Tape, x: Var, slots: usize) -> Result<Var> {
    let n = tape.value(x).shape()[0];
    let d = tape.value(x).shape()[1];
    if n > slots {
        return Err(Error::Capacity {
            op: "pad_to_slots",
            needed: n,
            capacity: slots,
        });
    }
    if n == slots {
        return Ok(x);
    }
    let zeros = tape.constant(Tensor::zeros(&[slots - n, d]));
    if n == 0 {
        return Ok(zeros);
    }
    tape.concat_rows(&[x, zeros])
}

/// Encodes a clip of per-frame graphs into one padded feature per frame.
///
/// The prompt is bound to a node of the first graph; later frames follow
/// that node id. A frame where the prompt node is absent yields an
/// all-invalid feature.
pub fn ptg_forward(
    tape: &mut Tape,
    graphs: &[SceneGraph],
    prompt: &PromptBox,
    p: &PtgParams,
    slots: usize,
    dim: usize,
    variant: PtgVariant,
) -> Result<Vec<GraphFeature>> {
    let first = graphs.first().ok_or(Error::Empty("ptg_forward"))?;
    let prompt_id = locate_prompt_node(first, prompt)?;
    let mut out = Vec::with_capacity(graphs.len());
    let mut prev: Option<(Var, Vec<u32>)> = None;
    for g in graphs {
        if g.node(prompt_id).is_none() {
            let values = tape.constant(Tensor::zeros(&[slots, dim]));
            let alpha = tape.constant(Tensor::zeros(&[0, 1]));
            out.push(GraphFeature {
                values,
                valid: vec![false; slots],
                node_ids: Vec::new(),
                frame_index: g.frame_index,
                alpha,
            });
            prev = None;
            continue;
        }
        let sub = coarse_subgraph(g, prompt_id)?;
        let ids: Vec<u32> = sub.nodes.iter().map(|n| n.id).collect();
        if ids.len() > slots {
            return Err(Error::Capacity {
                op: "pad_to_slots",
                needed: ids.len(),
                capacity: slots,
            });
        }
        let f_o = tape.constant(sub.node_features(dim)?);
        let f_e = tape.constant(sub.edge_features(dim)?);
        let prompt_row = sub.node_index(prompt_id).expect("prompt kept by coarse_subgraph");
        let f_o = add_prompt_embedding(tape, f_o, prompt_row, p.adaptor.prompt_embedding)?;
        let alpha = if variant.spatial {
            association_scores(tape, f_o, Some(f_e), &p.adaptor)?
        } else {
            tape.constant(Tensor::full(&[ids.len(), 1], 0.5))
        };
        let f_hat = reinforce(tape, f_o, alpha)?;
        let f_tilde = match (&prev, variant.temporal) {
            (Some((pv, pids)), true) => {
                let mask = temporal_mask(&ids, pids);
                let attended = temporal_update(tape, f_hat, Some(*pv), Some(&mask), &p.temporal)?;
                if p.temporal.residual {
                    tape.add(attended, f_hat)?
                } else {
                    attended
                }
            }
            _ => f_hat,
        };
        let (a_ps, a_po) = adjacency_matrices(&sub)?;
        let fused = fuse(tape, f_tilde, f_e, &a_ps, &a_po, &p.fusion)?;
        let values = pad_rows(tape, fused, slots)?;
        out.push(GraphFeature {
            values,
            valid: (0..slots).map(|i| i < ids.len()).collect(),
            node_ids: ids.clone(),
            frame_index: g.frame_index,
            alpha,
        });
        prev = Some((f_hat, ids));
    }
    Ok(out)
}

fn add_prompt_embedding(tape: &mut Tape, f_o: Var, row: usize, embedding: ParamId) -> Result<Var> {
    let lo = tape.value(f_o).shape()[0];
    let indicator = tape.constant(Tensor::new(
        vec![lo, 1],
        (0..lo).map(|i| if i == row { 1.0 } else { 0.0 }).collect(),
    )?);
    let e = tape.param(embedding);
    let spread = tape.matmul(indicator, e)?;
    tape.add(f_o, spread)
}
