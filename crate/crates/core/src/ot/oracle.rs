//! Independent check for the simplex solver: with `n` equal masses on each
//! side, the optimal coupling is a permutation (Birkhoff), so W2 reduces to a
//! linear assignment problem.

use crate::measures::GroundCost;
use thiserror::Error;

/// Up to this size every permutation is enumerated.
pub const EXHAUSTIVE_MAX: usize = 10;
/// Up to this size the Hungarian algorithm is used.
pub const HUNGARIAN_MAX: usize = 200;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("unequal support sizes: {src} sources vs {dst} targets")]
    UnequalSizes { src: usize, dst: usize },
    #[error("support size {0} outside the supported range 1..={HUNGARIAN_MAX}")]
    Size(usize),
}

/// W2 between the uniform measures on `src` and `dst` (grid indices),
/// computed by assignment search.
pub fn assignment_oracle(
    src: &[usize],
    dst: &[usize],
    cost: &GroundCost,
) -> Result<f64, OracleError> {
    if src.len() != dst.len() {
        return Err(OracleError::UnequalSizes {
            src: src.len(),
            dst: dst.len(),
        });
    }
    let n = src.len();
    if n == 0 || n > HUNGARIAN_MAX {
        return Err(OracleError::Size(n));
    }
    let c: Vec<i64> = src
        .iter()
        .flat_map(|&i| dst.iter().map(move |&j| i64::from(cost.get(i, j))))
        .collect();
    let best = if n <= EXHAUSTIVE_MAX {
        exhaustive(&c, n)
    } else {
        hungarian(&c, n)
    };
    Ok((best as f64 / n as f64).sqrt())
}

/// Minimum over all permutations (Heap's algorithm).
fn exhaustive(c: &[i64], n: usize) -> i64 {
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| -> i64 { p.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum() };
    let mut best = eval(&perm);
    let mut counters = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            best = best.min(eval(&perm));
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    best
}

/// O(n³) Hungarian algorithm with row/column potentials.
pub(crate) fn hungarian(c: &[i64], n: usize) -> i64 {
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
    (1..=n).map(|j| c[(p[j] - 1) * n + (j - 1)]).sum()
}
