//! 2-D assignment: maximize `sum_o c(o, perm(o))` over permutations.
//!
//! Rows are measurements (or "persons"), columns objects. The auction solver
//! runs Bertsekas' forward auction with ε-scaling; the exhaustive solver is
//! the reference it is checked against.

use std::collections::VecDeque;

use itertools::Itertools;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest size accepted by [`brute_force_assign`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Final-phase ε times `M` is below this bound.
pub const AUCTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentSolution {
    /// `perm[o]` is the column assigned to row `o`.
    pub perm: Vec<usize>,
    pub total_logcost: f64,
}

impl AssignmentSolution {
    /// Column-to-row map.
    pub fn inverse(&self) -> Vec<usize> {
        invert(&self.perm)
    }
}

/// Inverse of a permutation given as an index map.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// True when `perm` is a bijection on `0..perm.len()`.
pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn check(cost: &DMatrix<f64>) -> Result<()> {
    if cost.nrows() != cost.ncols() {
        return Err(Error::NonSquare { rows: cost.nrows(), cols: cost.ncols() });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFiniteCost);
    }
    Ok(())
}

/// Total cost of a given permutation.
pub fn assignment_cost(cost: &DMatrix<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(o, &m)| cost[(o, m)]).sum()
}

/// Forward auction with ε-scaling.
///
/// ε starts at `range / M` and is divided by 4 until it drops below
/// `1e-6 / M`. Bids go to the lowest-index column among equally valued ones.
pub fn auction_assign(cost: &DMatrix<f64>) -> Result<AssignmentSolution> {
    check(cost)?;
    let n = cost.nrows();
    // Row-major copy for the inner loop.
    let flat: Vec<f64> = (0..n).flat_map(|o| (0..n).map(move |m| (o, m))).map(|(o, m)| cost[(o, m)]).collect();
    let perm = auction_row_major(&flat, n);
    let total_logcost = assignment_cost(cost, &perm);
    Ok(AssignmentSolution { perm, total_logcost })
}

/// Auction on a row-major `n x n` slice of finite values.
pub(crate) fn auction_row_major(cost: &[f64], n: usize) -> Vec<usize> {
    debug_assert_eq!(cost.len(), n * n);
    match n {
        0 => return Vec::new(),
        1 => return vec![0],
        _ => {}
    }
    let (lo, hi) = cost.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)));
    let eps_final = AUCTION_TOLERANCE / n as f64;
    let mut eps = ((hi - lo) / n as f64).max(eps_final);

    let mut prices = vec![0.0; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut queue = VecDeque::with_capacity(n);
    loop {
        owner.iter_mut().for_each(|o| *o = None);
        assigned.iter_mut().for_each(|a| *a = None);
        queue.clear();
        queue.extend(0..n);
        while let Some(person) = queue.pop_front() {
            let row = &cost[person * n..(person + 1) * n];
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            let mut second_val = f64::NEG_INFINITY;
            for (m, (&c, &p)) in row.iter().zip(&prices).enumerate() {
                let v = c - p;
                if v > best_val {
                    second_val = best_val;
                    best_val = v;
                    best = m;
                } else if v > second_val {
                    second_val = v;
                }
            }
            prices[best] += best_val - second_val + eps;
            if let Some(prev) = owner[best].replace(person) {
                assigned[prev] = None;
                queue.push_back(prev);
            }
            assigned[person] = Some(best);
        }
        if eps < eps_final {
            break;
        }
        eps /= 4.0;
    }
    assigned.into_iter().map(|a| a.expect("auction terminates with a full assignment")).collect()
}

/// Exact argmax over all `M!` permutations; ties resolve to the
/// lexicographically first permutation.
pub fn brute_force_assign(cost: &DMatrix<f64>) -> Result<AssignmentSolution> {
    check(cost)?;
    let n = cost.nrows();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge { size: n, limit: BRUTE_FORCE_LIMIT });
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in (0..n).permutations(n) {
        let total = assignment_cost(cost, &perm);
        if best.as_ref().is_none_or(|(_, b)| total > *b) {
            best = Some((perm, total));
        }
    }
    let (perm, total_logcost) = best.unwrap_or((Vec::new(), 0.0));
    Ok(AssignmentSolution { perm, total_logcost })
}
