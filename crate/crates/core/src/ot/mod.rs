//! Exact Wasserstein-2 distances between grid measures.
//!
//! Masses are quantized to integer units of `1e-9` and the resulting
//! transportation problem is solved exactly with an integer network simplex.
//! The optimal spanning tree is then re-flowed with the unquantized weights;
//! when that flow is feasible (the usual, non-degenerate case) it is optimal
//! for the original problem and is reported, otherwise the quantized plan is.

mod oracle;
mod simplex;

pub use oracle::{assignment_oracle, OracleError};

use crate::measures::{GridMeasure, GroundCost};
use simplex::{SolveStatus, TransportSimplex};
use thiserror::Error;

/// Integer mass units per unit of probability.
pub const MASS_SCALE: f64 = 1e9;
/// Largest tolerated difference between the total masses of the inputs.
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtError {
    #[error("unbalanced input: total masses differ by {0:e}")]
    Unbalanced(f64),
    #[error("measure grid {mu:?} / {nu:?} does not match the ground cost grid {cost:?}")]
    GridMismatch {
        mu: (usize, usize),
        nu: (usize, usize),
        cost: (usize, usize),
    },
    #[error("infeasible: network simplex failed to reach an optimal basis (internal error)")]
    Infeasible,
}

/// Optimal coupling between the active (positive-mass) pixels of two
/// measures, stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// Grid index of each active source pixel.
    pub sources: Vec<usize>,
    /// Grid index of each active target pixel.
    pub targets: Vec<usize>,
    /// `(source slot, target slot, mass)` with positive mass, sorted.
    pub entries: Vec<(usize, usize, f64)>,
}

impl TransportPlan {
    /// Row sums indexed by source slot.
    pub fn source_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.sources.len()];
        for &(i, _, f) in &self.entries {
            out[i] += f;
        }
        out
    }

    /// Column sums indexed by target slot.
    pub fn target_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.targets.len()];
        for &(_, j, f) in &self.entries {
            out[j] += f;
        }
        out
    }

    /// Dense `grid x grid` matrix of the plan.
    pub fn dense(&self, grid_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; grid_size * grid_size];
        for &(i, j, f) in &self.entries {
            out[self.sources[i] * grid_size + self.targets[j]] += f;
        }
        out
    }

    /// Transport cost `sum gamma_ij C_ij` in pixel² units.
    pub fn cost(&self, cost: &GroundCost) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, f)| f * f64::from(cost.get(self.sources[i], self.targets[j])))
            .sum()
    }
}

/// Result of an exact solve.
#[derive(Debug, Clone, PartialEq)]
pub struct OtSolution {
    /// Wasserstein-2 distance in pixel units.
    pub distance: f64,
    /// Minimal total transport cost (squared distance).
    pub cost: f64,
    pub plan: TransportPlan,
    /// Whether the reported plan uses the unquantized weights.
    pub refined: bool,
    pub pivots: usize,
}

/// Largest-remainder apportionment of `weights` into integers summing to
/// exactly `MASS_SCALE`. Every entry stays within one unit of its exact value.
pub(crate) fn quantize(weights: &[f64]) -> Vec<i64> {
    let total = MASS_SCALE as i64;
    let scaled: Vec<f64> = weights.iter().map(|w| w * MASS_SCALE).collect();
    let mut q: Vec<i64> = scaled.iter().map(|s| s.floor() as i64).collect();
    let mut missing = total - q.iter().sum::<i64>();
    if missing != 0 {
        let mut order: Vec<usize> = (0..q.len()).collect();
        if missing > 0 {
            // largest fractional part first, ties by lowest index
            order.sort_by(|&a, &b| {
                let fa = scaled[a] - scaled[a].floor();
                let fb = scaled[b] - scaled[b].floor();
                fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
            });
            let mut k = 0;
            while missing > 0 {
                q[order[k % order.len()]] += 1;
                missing -= 1;
                k += 1;
            }
        } else {
            order.sort_by(|&a, &b| {
                let fa = scaled[a] - scaled[a].floor();
                let fb = scaled[b] - scaled[b].floor();
                fa.partial_cmp(&fb).unwrap().then(a.cmp(&b))
            });
            let mut k = 0;
            while missing < 0 {
                let i = order[k % order.len()];
                if q[i] > 0 {
                    q[i] -= 1;
                    missing += 1;
                }
                k += 1;
            }
        }
    }
    q
}

/// Exact Wasserstein-2 distance and optimal plan between two measures on the
/// grid of `cost`.
pub fn solve(mu: &GridMeasure, nu: &GridMeasure, cost: &GroundCost) -> Result<OtSolution, OtError> {
    if !cost.matches(mu) || !cost.matches(nu) {
        return Err(OtError::GridMismatch {
            mu: (mu.height(), mu.width()),
            nu: (nu.height(), nu.width()),
            cost: (cost.height(), cost.width()),
        });
    }
    let total_mu: f64 = mu.weights().iter().sum();
    let total_nu: f64 = nu.weights().iter().sum();
    if (total_mu - total_nu).abs() > BALANCE_TOL {
        return Err(OtError::Unbalanced(total_mu - total_nu));
    }

    let sources = mu.support();
    let targets = nu.support();
    let a: Vec<f64> = sources.iter().map(|&i| mu.weights()[i]).collect();
    let b: Vec<f64> = targets.iter().map(|&j| nu.weights()[j]).collect();
    let (a, b) = (normalized(&a), normalized(&b));
    let qa = quantize(&a);
    let qb = quantize(&b);

    let mut ns =
        TransportSimplex::new(&qa, &qb, |i, j| i64::from(cost.get(sources[i], targets[j])));
    let budget = 1000 * (sources.len() + targets.len()).pow(2) + 10_000;
    match ns.run(budget) {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible | SolveStatus::Unbounded => return Err(OtError::Infeasible),
    }

    let (entries, refined) = match ns.tree_flows(&a, &b, 1e-13) {
        Some(entries) => (entries, true),
        None => {
            let mut entries = Vec::new();
            for i in 0..sources.len() {
                for j in 0..targets.len() {
                    let f = ns.flow(i, j);
                    if f > 0 {
                        entries.push((i, j, f as f64 / MASS_SCALE));
                    }
                }
            }
            (entries, false)
        }
    };
    let plan = TransportPlan {
        sources,
        targets,
        entries,
    };
    let total = if refined {
        plan.cost(cost)
    } else {
        ns.total_cost() as f64 / MASS_SCALE
    };
    let total = total.max(0.0);
    Ok(OtSolution {
        distance: total.sqrt(),
        cost: total,
        plan,
        refined,
        pivots: ns.pivots(),
    })
}

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

/// Exact W2 distance in pixel units.
pub fn exact_w2(mu: &GridMeasure, nu: &GridMeasure, cost: &GroundCost) -> Result<f64, OtError> {
    solve(mu, nu, cost).map(|s| s.distance)
}
