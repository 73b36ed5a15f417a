use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Minimum-cost assignment of each row (ground truth) to a distinct column
/// (prediction slot). `cost` is `rows × cols` row-major with `rows ≤ cols`.
///
/// Among optimal assignments the lexicographically smallest column
/// sequence is returned. Result `i` is the column given to row `i`.
pub fn hungarian_match(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if cost.len() != rows * cols {
        return Err(Error::shape("hungarian_match", "cost matrix size"));
    }
    if rows > cols {
        return Err(Error::Capacity {
            op: "hungarian_match",
            needed: rows,
            capacity: cols,
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { op: "hungarian_match" });
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    let (best, _) = solve(cost, rows, cols, &[]);
    let scale = cost.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * rows as f64;
    let mut fixed: Vec<(usize, usize)> = Vec::new();
    for r in 0..rows {
        let mut chosen = None;
        for c in 0..cols {
            if fixed.iter().any(|&(_, fc)| fc == c) {
                continue;
            }
            fixed.push((r, c));
            let (total, _) = solve(cost, rows, cols, &fixed);
            if total <= best + tol {
                chosen = Some(c);
                break;
            }
            fixed.pop();
        }
        if chosen.is_none() {
            // numerical corner: keep the unconstrained solution for this row
            let (_, a) = solve(cost, rows, cols, &fixed);
            fixed.push((r, a[r]));
        }
    }
    Ok(fixed.into_iter().map(|(_, c)| c).collect())
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &[f64], cols: usize, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum()
}

/// Shortest augmenting path Hungarian algorithm; rows in `fixed` are forced
/// to their given column by removing them from the problem.
fn solve(cost: &[f64], rows: usize, cols: usize, fixed: &[(usize, usize)]) -> (f64, Vec<usize>) {
    let free_rows: Vec<usize> = (0..rows).filter(|r| !fixed.iter().any(|&(fr, _)| fr == *r)).collect();
    let free_cols: Vec<usize> = (0..cols).filter(|c| !fixed.iter().any(|&(_, fc)| fc == *c)).collect();
    let n = free_rows.len();
    let m = free_cols.len();
    let mut assign = vec![usize::MAX; rows];
    let mut total = 0.0;
    for &(r, c) in fixed {
        assign[r] = c;
        total += cost[r * cols + c];
    }
    if n == 0 {
        return (total, assign);
    }
    let a = |i: usize, j: usize| cost[free_rows[i - 1] * cols + free_cols[j - 1]];
    // 1-based potentials formulation (e-maxx)
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    for j in 1..=m {
        if p[j] != 0 {
            let r = free_rows[p[j] - 1];
            assign[r] = free_cols[j - 1];
            total += cost[r * cols + free_cols[j - 1]];
        }
    }
    (total, assign)
}
