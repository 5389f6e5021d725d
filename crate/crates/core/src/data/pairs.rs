//! Class-stratified pair sampling, exact labeling and splitting.

use super::idx::ImageSet;
use crate::measures::{GridMeasure, GroundCost, MeasureError};
use crate::ot::{exact_w2, OtError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const CLASSES: u8 = 10;

#[derive(Debug, Error)]
pub enum PairError {
    #[error("class {class} has {available} distinct pairs available for combo ({a}, {b}), {needed} requested")]
    InsufficientImages {
        class: u8,
        a: u8,
        b: u8,
        available: usize,
        needed: usize,
    },
    #[error("class {0} has fewer than 2 images")]
    ClassTooSmall(u8),
    #[error("label {label} at index {index} is not a digit class")]
    BadLabel { index: usize, label: u8 },
    #[error("combo ({a}, {b}) has {count} records; at least 3 are needed to split")]
    SmallCombo { a: u8, b: u8, count: usize },
    #[error("record {record} references image {index}, but only {len} images exist")]
    IndexOutOfRange {
        record: usize,
        index: usize,
        len: usize,
    },
    #[error("pair ({idx_a}, {idx_b}): {source}")]
    Measure {
        idx_a: usize,
        idx_b: usize,
        source: MeasureError,
    },
    #[error("pair ({idx_a}, {idx_b}): {source}")]
    Solver {
        idx_a: usize,
        idx_b: usize,
        source: OtError,
    },
    #[error("could not build the worker pool: {0}")]
    Pool(String),
}

/// One image pair. `w2` is `NaN` until the pair is labeled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRecord {
    pub idx_a: usize,
    pub idx_b: usize,
    pub label_a: u8,
    pub label_b: u8,
    pub w2: f64,
}

impl PairRecord {
    pub fn combo(&self) -> (u8, u8) {
        (self.label_a, self.label_b)
    }

    pub fn is_labeled(&self) -> bool {
        !self.w2.is_nan()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

/// The 55 unordered class combinations `(i, j)`, `i <= j`, in lexicographic order.
pub fn combos() -> Vec<(u8, u8)> {
    (0..CLASSES)
        .flat_map(|i| (i..CLASSES).map(move |j| (i, j)))
        .collect()
}

fn by_class(labels: &[u8]) -> Result<Vec<Vec<usize>>, PairError> {
    let mut groups = vec![Vec::new(); CLASSES as usize];
    for (index, &label) in labels.iter().enumerate() {
        if label >= CLASSES {
            return Err(PairError::BadLabel { index, label });
        }
        groups[label as usize].push(index);
    }
    Ok(groups)
}

/// Samples `pairs_per_combo` distinct unordered pairs for each of the 55
/// class combinations, uniformly and without repeats. Records are grouped
/// by combo in lexicographic order; `idx_a != idx_b` always.
pub fn sample_pairs(
    labels: &[u8],
    pairs_per_combo: usize,
    seed: u64,
) -> Result<Vec<PairRecord>, PairError> {
    let groups = by_class(labels)?;
    for (class, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(PairError::ClassTooSmall(class as u8));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(55 * pairs_per_combo);
    for (a, b) in combos() {
        let (ga, gb) = (&groups[a as usize], &groups[b as usize]);
        let available = if a == b {
            ga.len() * (ga.len() - 1) / 2
        } else {
            ga.len() * gb.len()
        };
        if available < pairs_per_combo {
            let class = if a == b || ga.len() <= gb.len() { a } else { b };
            return Err(PairError::InsufficientImages {
                class,
                a,
                b,
                available,
                needed: pairs_per_combo,
            });
        }
        let mut seen = HashSet::with_capacity(pairs_per_combo);
        let mut push = |i: usize, j: usize, out: &mut Vec<PairRecord>| {
            let (i, j) = if a == b && i > j { (j, i) } else { (i, j) };
            if seen.insert((i, j)) {
                out.push(PairRecord {
                    idx_a: i,
                    idx_b: j,
                    label_a: a,
                    label_b: b,
                    w2: f64::NAN,
                });
            }
        };
        if 2 * pairs_per_combo > available {
            // dense request: enumerate and take a random subset
            let mut all = Vec::with_capacity(available);
            for (x, &i) in ga.iter().enumerate() {
                let rest: &[usize] = if a == b { &ga[x + 1..] } else { gb };
                all.extend(rest.iter().map(|&j| (i, j)));
            }
            let (chosen, _) = all.partial_shuffle(&mut rng, pairs_per_combo);
            for &(i, j) in chosen.iter() {
                push(i, j, &mut out);
            }
        } else {
            let start = out.len();
            while out.len() - start < pairs_per_combo {
                let i = ga[rng.gen_range(0..ga.len())];
                let j = gb[rng.gen_range(0..gb.len())];
                if i != j {
                    push(i, j, &mut out);
                }
            }
        }
    }
    Ok(out)
}

fn label_one(rec: &PairRecord, images: &ImageSet, cost: &GroundCost) -> Result<f64, PairError> {
    let (h, w) = (images.height, images.width);
    let (ia, ib) = (rec.idx_a, rec.idx_b);
    let err = |source| PairError::Measure {
        idx_a: ia,
        idx_b: ib,
        source,
    };
    let mu = GridMeasure::from_bytes(h, w, images.image(ia)).map_err(err)?;
    let nu = GridMeasure::from_bytes(h, w, images.image(ib)).map_err(err)?;
    exact_w2(&mu, &nu, cost).map_err(|source| PairError::Solver {
        idx_a: ia,
        idx_b: ib,
        source,
    })
}

/// Fills in the exact W2 of every record using `workers` threads (0 means
/// the global pool). Output order matches input order and does not depend
/// on the worker count.
pub fn label_pairs(
    records: &[PairRecord],
    images: &ImageSet,
    cost: &GroundCost,
    workers: usize,
) -> Result<Vec<PairRecord>, PairError> {
    for (record, r) in records.iter().enumerate() {
        for index in [r.idx_a, r.idx_b] {
            if index >= images.len() {
                return Err(PairError::IndexOutOfRange {
                    record,
                    index,
                    len: images.len(),
                });
            }
        }
    }
    let run = || {
        records
            .par_iter()
            .map(|r| label_one(r, images, cost).map(|w2| PairRecord { w2, ..*r }))
            .collect::<Result<Vec<_>, _>>()
    };
    if workers == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| PairError::Pool(e.to_string()))?
            .install(run)
    }
}

/// Validation (and test) records per combo: 5% rounded down, at least 1,
/// at most 50.
pub fn holdout_size(count: usize) -> usize {
    (count / 20).clamp(1, 50)
}

/// Assigns splits combo by combo: a seeded shuffle of each combo's records,
/// the first [`holdout_size`] go to validation, the next as many to test,
/// the rest to training.
pub fn split_dataset(records: &[PairRecord], seed: u64) -> Result<Vec<Split>, PairError> {
    let mut groups: Vec<((u8, u8), Vec<usize>)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match groups.iter_mut().find(|(c, _)| *c == r.combo()) {
            Some((_, v)) => v.push(i),
            None => groups.push((r.combo(), vec![i])),
        }
    }
    groups.sort_by_key(|(c, _)| *c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = vec![Split::Train; records.len()];
    for ((a, b), mut idx) in groups {
        if idx.len() < 3 {
            return Err(PairError::SmallCombo {
                a,
                b,
                count: idx.len(),
            });
        }
        let n = holdout_size(idx.len());
        idx.shuffle(&mut rng);
        for &i in &idx[..n] {
            splits[i] = Split::Val;
        }
        for &i in &idx[n..2 * n] {
            splits[i] = Split::Test;
        }
    }
    Ok(splits)
}
