//! Minimum-cost perfect matching between padded targets and predictions.

use crate::error::{Error, Result};

/// Largest size accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX: usize = 8;

/// Square matrix of finite assignment costs; rows are targets, columns are
/// predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("cost matrix is empty"));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::invalid(format!(
                "cost matrix is not square: row {i} has {} entries, expected {n}",
                r.len()
            )));
        }
        let entries: Vec<f64> = rows.into_iter().flatten().collect();
        if let Some(k) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "cost matrix entry ({}, {}) is not finite",
                k / n,
                k % n
            )));
        }
        Ok(Self { n, entries })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }

    pub fn cost_of(&self, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(t, &p)| self.get(t, p)).sum()
    }

    fn tolerance(&self) -> f64 {
        let scale = self.entries.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        1e-9 * (1.0 + scale * self.n as f64)
    }
}

/// `perm[t]` is the prediction matched to target `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchAssignment {
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

/// Exact assignment by shortest augmenting paths with dual potentials.
///
/// Among optimal assignments (costs equal within a small relative tolerance)
/// the lexicographically smallest permutation is returned.
pub fn hungarian(cost: &CostMatrix) -> MatchAssignment {
    let n = cost.n;
    let all: Vec<usize> = (0..n).collect();
    let optimum = solve(cost, &all, &all);
    let tol = cost.tolerance();

    let mut perm = Vec::with_capacity(n);
    let mut free: Vec<usize> = all.clone();
    let mut fixed = 0.0;
    for t in 0..n {
        let rows: Vec<usize> = (t + 1..n).collect();
        let mut chosen = None;
        for (pos, &j) in free.iter().enumerate() {
            let cols: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
            let rest = if rows.is_empty() {
                0.0
            } else {
                solve(cost, &rows, &cols)
            };
            if fixed + cost.get(t, j) + rest <= optimum + tol {
                chosen = Some(pos);
                break;
            }
        }
        // The optimum itself is always reachable, so some column qualifies.
        let pos = chosen.unwrap_or(0);
        let j = free.remove(pos);
        fixed += cost.get(t, j);
        perm.push(j);
    }
    let total_cost = cost.cost_of(&perm);
    MatchAssignment { perm, total_cost }
}

/// Optimal cost of the square sub-problem on `rows x cols`.
fn solve(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    let n = rows.len();
    debug_assert_eq!(n, cols.len());
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
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
            for j in 0..=n {
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
    (1..=n).map(|j| a(p[j], j)).sum()
}

/// Exhaustive minimum over all permutations in lexicographic order.
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<MatchAssignment> {
    let n = cost.n;
    if n > BRUTE_FORCE_MAX {
        return Err(Error::invalid(format!(
            "brute-force assignment limited to size {BRUTE_FORCE_MAX}, got {n}"
        )));
    }
    let perms: Vec<Vec<usize>> = itertools::Itertools::permutations(0..n, n).collect();
    let best = perms
        .iter()
        .map(|p| cost.cost_of(p))
        .fold(f64::INFINITY, f64::min);
    let tol = cost.tolerance();
    let perm = perms
        .into_iter()
        .find(|p| cost.cost_of(p) <= best + tol)
        .expect("at least one permutation");
    let total_cost = cost.cost_of(&perm);
    Ok(MatchAssignment { perm, total_cost })
}
