//! Consumers of a distance: full pairwise matrices, Isomap embeddings and
//! exact-versus-surrogate latency benchmarks.

use crate::measures::{GridMeasure, GroundCost};
use crate::models::{Model, ModelError, ModelKind};
use crate::ot::{exact_w2, OtError};
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("pair ({i}, {j}): {source}")]
    Pair { i: usize, j: usize, source: OtError },
    #[error("surrogate: {0}")]
    Model(#[from] ModelError),
    #[error("item {index} is {got:?}, expected {expected:?}")]
    Grid {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("kNN graph is disconnected ({components} components); increase k")]
    Disconnected { components: usize },
    #[error("k_neighbors must be in 1..{n}, got {k}")]
    Neighbors { k: usize, n: usize },
    #[error("target dimension must be positive")]
    ZeroDim,
    #[error("distance matrix entry ({i}, {j}) is {value}")]
    BadEntry { i: usize, j: usize, value: f64 },
    #[error("need at least 10 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("repetitions must be positive")]
    ZeroReps,
}

/// Where a matrix came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Exact,
    Surrogate {
        kind: ModelKind,
        checkpoint: String,
    },
    /// Supplied directly, e.g. a Euclidean matrix in tests.
    External,
}

/// Symmetric `n x n` matrix with an exactly zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
    pub provenance: Provenance,
}

impl DistanceMatrix {
    /// Builds a matrix from its strict upper triangle in row-major order.
    pub fn from_upper(n: usize, upper: &[f64], provenance: Provenance) -> Self {
        assert_eq!(
            upper.len(),
            n * n.saturating_sub(1) / 2,
            "upper-triangle length"
        );
        let mut data = vec![0.0; n * n];
        let mut it = upper.iter();
        for i in 0..n {
            for j in i + 1..n {
                let v = *it.next().expect("length checked");
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Self {
            n,
            data,
            provenance,
        }
    }

    /// Euclidean distances between the rows of `points` (each of length `dim`).
    pub fn euclidean(points: &[f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let upper: Vec<f64> = upper_pairs(n)
            .map(|(i, j)| {
                let (a, b) = (
                    &points[i * dim..(i + 1) * dim],
                    &points[j * dim..(j + 1) * dim],
                );
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Self::from_upper(n, &upper, Provenance::External)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `n` on the first line, then one comma-separated row per line.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", self.n);
        for i in 0..self.n {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Parses the format written by [`to_csv`](Self::to_csv). The upper
    /// triangle is authoritative; the lower one must mirror it.
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let n: usize = lines
            .next()
            .ok_or("empty matrix file")?
            .trim()
            .parse()
            .map_err(|_| "first line must be the item count")?;
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            let line = lines
                .next()
                .ok_or(format!("expected {n} rows, found {i}"))?;
            let row: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| format!("row {}: {e}", i + 1))?;
            if row.len() != n {
                return Err(format!(
                    "row {} has {} entries, expected {n}",
                    i + 1,
                    row.len()
                ));
            }
            data.extend(row);
        }
        if lines.next().is_some() {
            return Err(format!("more than {n} rows"));
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(format!("diagonal entry {i} is not zero"));
            }
            for j in i + 1..n {
                if data[i * n + j] != data[j * n + i] {
                    return Err(format!("entries ({i}, {j}) and ({j}, {i}) differ"));
                }
            }
        }
        Ok(Self {
            n,
            data,
            provenance: Provenance::External,
        })
    }
}

fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

/// A way of measuring distances between grid measures.
#[derive(Debug, Clone, Copy)]
pub enum Backend<'a> {
    Exact(&'a GroundCost),
    Surrogate {
        model: &'a Model<f32>,
        checkpoint: &'a str,
    },
}

impl Backend<'_> {
    fn provenance(&self) -> Provenance {
        match self {
            Backend::Exact(_) => Provenance::Exact,
            Backend::Surrogate { model, checkpoint } => Provenance::Surrogate {
                kind: model.kind(),
                checkpoint: checkpoint.to_string(),
            },
        }
    }
}

fn check_grid(items: &[GridMeasure]) -> Result<(), DownstreamError> {
    let Some(first) = items.first() else {
        return Ok(());
    };
    let expected = (first.height(), first.width());
    for (index, m) in items.iter().enumerate() {
        let got = (m.height(), m.width());
        if got != expected {
            return Err(DownstreamError::Grid {
                index,
                expected,
                got,
            });
        }
    }
    Ok(())
}

fn surrogate_inputs(items: &[GridMeasure]) -> Vec<f32> {
    items
        .iter()
        .flat_map(|m| m.weights().iter().map(|&w| w as f32))
        .collect()
}

/// Distances for the given pairs, in order.
fn pair_values(
    items: &[GridMeasure],
    pairs: &[(usize, usize)],
    backend: &Backend,
) -> Result<Vec<f64>, DownstreamError> {
    match backend {
        Backend::Exact(cost) => pairs
            .par_iter()
            .map(|&(i, j)| {
                exact_w2(&items[i], &items[j], cost).map_err(|source| DownstreamError::Pair {
                    i,
                    j,
                    source,
                })
            })
            .collect(),
        Backend::Surrogate { model, .. } => {
            let emb = model.embed(&surrogate_inputs(items))?;
            Ok(pairs.iter().map(|&(i, j)| emb.distance(i, j)).collect())
        }
    }
}

/// All `n(n-1)/2` distances among `items`, each computed once and mirrored.
pub fn pairwise_matrix(
    items: &[GridMeasure],
    backend: &Backend,
) -> Result<DistanceMatrix, DownstreamError> {
    check_grid(items)?;
    let pairs: Vec<(usize, usize)> = upper_pairs(items.len()).collect();
    let upper = pair_values(items, &pairs, backend)?;
    Ok(DistanceMatrix::from_upper(
        items.len(),
        &upper,
        backend.provenance(),
    ))
}

/// Isomap coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub n: usize,
    pub dim: usize,
    /// Row-major `n x dim`.
    pub coords: Vec<f64>,
    /// Eigenvalues of the double-centered matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// Share of the spectrum's absolute mass carried by negative eigenvalues.
    pub negative_mass: f64,
}

impl Embedding {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// `index,x0,x1,...` with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index");
        for d in 0..self.dim {
            let _ = write!(s, ",x{d}");
        }
        s.push('\n');
        for i in 0..self.n {
            let _ = write!(s, "{i}");
            for v in self.row(i) {
                let _ = write!(s, ",{v:.17e}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dijkstra(adj: &[Vec<(usize, f64)>], src: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; adj.len()];
    dist[src] = 0.0;
    let mut heap = BinaryHeap::from([Entry(0.0, src)]);
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Entry(nd, v));
            }
        }
    }
    dist
}

fn components(adj: &[Vec<(usize, f64)>]) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut count = 0;
    for s in 0..adj.len() {
        if seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    count
}

/// Symmetrized kNN graph: an edge exists when either endpoint picks the other.
fn knn_graph(d: &DistanceMatrix, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = d.n();
    let mut chosen = vec![vec![false; n]; n];
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| d.get(i, a).total_cmp(&d.get(i, b)).then(a.cmp(&b)));
        for &j in &others[..k] {
            chosen[i][j] = true;
            chosen[j][i] = true;
        }
    }
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| chosen[i][j])
                .map(|j| (j, d.get(i, j)))
                .collect()
        })
        .collect()
}

/// Classical MDS of squared distances `sq` (row-major `n x n`).
fn classical_mds(n: usize, sq: &[f64], dim: usize) -> Embedding {
    let row_mean: Vec<f64> = (0..n)
        .map(|i| sq[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let total = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (sq[i * n + j] - row_mean[i] - row_mean[j] + total)
    });
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| {
        eig.eigenvalues[c]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&c))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let abs: f64 = eigenvalues.iter().map(|v| v.abs()).sum();
    let neg: f64 = eigenvalues.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    // numerically zero eigenvalues carry no geometry
    let floor = 1e-12
        * eigenvalues
            .first()
            .map_or(0.0, |v| v.abs())
            .max(f64::MIN_POSITIVE);
    let used = eigenvalues
        .iter()
        .take(dim)
        .take_while(|v| **v > floor)
        .count();
    let mut coords = vec![0.0; n * used];
    for (c, &col) in order.iter().take(used).enumerate() {
        let scale = eigenvalues[c].sqrt();
        let v = eig.eigenvectors.column(col);
        let pivot = (0..n)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i * used + c] = sign * scale * v[i];
        }
    }
    Embedding {
        n,
        dim: used,
        coords,
        eigenvalues,
        negative_mass: if abs > 0.0 { neg / abs } else { 0.0 },
    }
}

/// Isomap: kNN graph geodesics followed by classical MDS. The output
/// dimension is capped at the number of positive eigenvalues.
pub fn isomap_embed(
    d: &DistanceMatrix,
    k_neighbors: usize,
    dim: usize,
) -> Result<Embedding, DownstreamError> {
    let n = d.n();
    if dim == 0 {
        return Err(DownstreamError::ZeroDim);
    }
    if n <= 1 {
        return Ok(Embedding {
            n,
            dim: 0,
            coords: Vec::new(),
            eigenvalues: vec![0.0; n],
            negative_mass: 0.0,
        });
    }
    if k_neighbors == 0 || k_neighbors >= n {
        return Err(DownstreamError::Neighbors { k: k_neighbors, n });
    }
    for i in 0..n {
        for j in 0..n {
            let value = d.get(i, j);
            if !(value >= 0.0 && value.is_finite()) {
                return Err(DownstreamError::BadEntry { i, j, value });
            }
        }
    }
    let adj = knn_graph(d, k_neighbors);
    let parts = components(&adj);
    if parts > 1 {
        return Err(DownstreamError::Disconnected { components: parts });
    }
    let geo: Vec<Vec<f64>> = (0..n).into_par_iter().map(|s| dijkstra(&adj, s)).collect();
    // average the two directions so the input to MDS is exactly symmetric
    let sq: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            let g = 0.5 * (geo[i][j] + geo[j][i]);
            g * g
        })
        .collect();
    Ok(classical_mds(n, &sq, dim))
}

/// Per-pair wall-clock latency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchStats {
    pub pairs: usize,
    pub samples: usize,
    pub median_s: f64,
    pub p95_s: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times every unordered pair of `items`. The exact backend is timed pair by
/// pair on one thread; the surrogate encodes all items once per repetition
/// and reports that batch time divided by the pair count.
pub fn bench_backend(
    items: &[GridMeasure],
    backend: &Backend,
    reps: usize,
) -> Result<BenchStats, DownstreamError> {
    if reps == 0 {
        return Err(DownstreamError::ZeroReps);
    }
    check_grid(items)?;
    let pairs: Vec<(usize, usize)> = upper_pairs(items.len()).collect();
    if pairs.len() < 10 {
        return Err(DownstreamError::TooFewPairs(pairs.len()));
    }
    let mut samples = Vec::new();
    for _ in 0..reps {
        match backend {
            Backend::Exact(cost) => {
                for &(i, j) in &pairs {
                    let t = Instant::now();
                    exact_w2(&items[i], &items[j], cost)
                        .map_err(|source| DownstreamError::Pair { i, j, source })?;
                    samples.push(t.elapsed().as_secs_f64());
                }
            }
            Backend::Surrogate { model, .. } => {
                let t = Instant::now();
                let emb = model.embed(&surrogate_inputs(items))?;
                let sum: f64 = pairs.iter().map(|&(i, j)| emb.distance(i, j)).sum();
                std::hint::black_box(sum);
                samples.push(t.elapsed().as_secs_f64() / pairs.len() as f64);
            }
        }
    }
    samples.sort_by(f64::total_cmp);
    Ok(BenchStats {
        pairs: pairs.len(),
        samples: samples.len(),
        median_s: quantile(&samples, 0.5),
        p95_s: quantile(&samples, 0.95),
    })
}
