//! Graph-guided iterative query former with a bounded context memory.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{key_mask, AttentionParams, ParamId, ParamStore, Tape, Tensor, Var};
use crate::ptgformer::GraphFeature;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GiqParams {
    pub vg: AttentionParams,
    pub tq: AttentionParams,
    pub vlg: AttentionParams,
    /// Learnable language query `[L, D]`.
    pub query: ParamId,
    pub iterations: usize,
    /// Adds each stage's query back onto its attention output.
    #[serde(default)]
    pub residual: bool,
}

impl GiqParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        slots: usize,
        dim: usize,
        heads: usize,
        iterations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Config("query former needs at least one iteration".into()));
        }
        Ok(GiqParams {
            vg: AttentionParams::new(store, "giq.vg", dim, heads, rng)?,
            tq: AttentionParams::new(store, "giq.tq", dim, heads, rng)?,
            vlg: AttentionParams::new(store, "giq.vl", dim, heads, rng)?,
            query: store.add_uniform("giq.query", &[slots, dim], dim, rng)?,
            iterations,
            residual: false,
        })
    }
}

/// Bounded store of per-frame summary tokens, each a `[1, D]` tape value.
#[derive(Clone, Debug)]
pub struct ContextMemory {
    capacity: usize,
    tokens: Vec<Var>,
}

impl ContextMemory {
    pub fn new(capacity: usize) -> Self {
        ContextMemory {
            capacity,
            tokens: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn occupancy(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[Var] {
        &self.tokens
    }

    /// `[K, D]` snapshot with unoccupied rows zero.
    pub fn to_tensor(&self, tape: &Tape, dim: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.capacity * dim);
        for &t in &self.tokens {
            data.extend_from_slice(tape.value(t).data());
        }
        data.resize(self.capacity.max(self.tokens.len()) * dim, 0.0);
        Tensor::new(alloc::vec![self.capacity.max(self.tokens.len()), dim], data)
            .expect("memory tokens are finite")
    }
}

/// Output of one query-former pass.
#[derive(Clone, Copy, Debug)]
pub struct GiqOutput {
    /// Prompt-related visual feature of the last iteration, `[L, D]`.
    pub f_vg: Var,
    /// Prompt-related textual feature, `[L, D]`.
    pub f_vl: Var,
}

fn zero_invalid(tape: &mut Tape, x: Var, valid: &[bool]) -> Result<Var> {
    if valid.iter().all(|&v| v) {
        return Ok(x);
    }
    let keep = tape.constant(Tensor::new(
        alloc::vec![valid.len(), 1],
        valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )?);
    tape.mul_col(x, keep)
}

/// Slots attend over the visual tokens; invalid slots give zero rows.
pub fn visual_graph_attend(tape: &mut Tape, query: Var, valid: &[bool], f_v: Var, p: &GiqParams) -> Result<Var> {
    if tape.value(f_v).rank() != 2 || tape.value(f_v).shape()[0] == 0 {
        return Err(Error::Empty("visual_graph_attend"));
    }
    let out = p.vg.mhca(tape, query, f_v, f_v, None)?;
    zero_invalid(tape, out, valid)
}

/// Language query attends over the occupied memory rows; an empty memory
/// passes the query through unchanged.
pub fn textual_query_attend(tape: &mut Tape, f_q: Var, memory: &ContextMemory, p: &GiqParams) -> Result<Var> {
    if memory.tokens.is_empty() {
        return Ok(f_q);
    }
    let mem = if memory.tokens.len() == 1 {
        memory.tokens[0]
    } else {
        tape.concat_rows(&memory.tokens)?
    };
    p.tq.mhca(tape, f_q, mem, mem, None)
}

/// Visual slots attend over the context-conditioned query rows.
pub fn visual_language_attend(tape: &mut Tape, f_vg: Var, f_cq: Var, p: &GiqParams) -> Result<Var> {
    if tape.value(f_vg).shape() != tape.value(f_cq).shape() {
        return Err(Error::shape("visual_language_attend", "f_vg and f_cq differ in shape"));
    }
    p.vlg.mhca(tape, f_vg, f_cq, f_cq, None)
}

/// Runs the three attention stages `p.iterations` times. Later iterations
/// query the visual tokens with the previous `f_vl`.
pub fn giq_forward(
    tape: &mut Tape,
    f_g: &GraphFeature,
    f_v: Var,
    memory: &ContextMemory,
    p: &GiqParams,
) -> Result<GiqOutput> {
    let f_q = tape.param(p.query);
    let f_cq = textual_query_attend(tape, f_q, memory, p)?;
    let mut seed = f_g.values;
    let mut result = None;
    for _ in 0..p.iterations {
        let mut f_vg = visual_graph_attend(tape, seed, &f_g.valid, f_v, p)?;
        if p.residual {
            let sum = tape.add(f_vg, seed)?;
            f_vg = zero_invalid(tape, sum, &f_g.valid)?;
        }
        let mut f_vl = visual_language_attend(tape, f_vg, f_cq, p)?;
        if p.residual {
            f_vl = tape.add(f_vl, f_vg)?;
        }
        seed = f_vl;
        result = Some(GiqOutput { f_vg, f_vl });
    }
    result.ok_or(Error::Config("query former needs at least one iteration".into()))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb),
    }
}

/// Appends the mean of `f_vl`'s valid rows. A full memory first merges its
/// most similar adjacent pair (first pair on ties) into their average.
pub fn memory_update(tape: &mut Tape, memory: &mut ContextMemory, f_vl: Var, valid: &[bool]) -> Result<()> {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 || memory.capacity == 0 {
        return Ok(());
    }
    let weights: Vec<f64> = valid.iter().map(|&v| if v { 1.0 / n as f64 } else { 0.0 }).collect();
    let w = tape.constant(Tensor::new(alloc::vec![1, valid.len()], weights)?);
    let summary = tape.matmul(w, f_vl)?;
    while memory.tokens.len() >= memory.capacity {
        if memory.tokens.len() == 1 {
            memory.tokens.clear();
            break;
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for i in 0..memory.tokens.len() - 1 {
            let c = cosine(
                tape.value(memory.tokens[i]).data(),
                tape.value(memory.tokens[i + 1]).data(),
            );
            if c > best.0 {
                best = (c, i);
            }
        }
        let i = best.1;
        let sum = tape.add(memory.tokens[i], memory.tokens[i + 1])?;
        let avg = tape.scale(sum, 0.5)?;
        memory.tokens[i] = avg;
        memory.tokens.remove(i + 1);
    }
    memory.tokens.push(summary);
    Ok(())
}

/// Key mask letting every row of a `rows`-row query see only valid slots.
pub fn slot_mask(rows: usize, valid: &[bool]) -> Vec<bool> {
    key_mask(rows, valid)
}
