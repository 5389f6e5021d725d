//! Minibatch Adam training against exact W2 labels, best-validation
//! checkpoint selection, evaluation metrics and report exports.

pub mod checkpoint;
pub mod report;

use crate::data::{ImageSet, PairDataset, Split};
use crate::measures::{GridMeasure, MeasureError};
use crate::models::{Arch, Model, ModelError, ModelKind, STAGE_NAMES};
use crate::nn::{adam_step, AdamConfig, ParamError, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("no learnable distance weights in the {0} model")]
    NoWeights(ModelKind),
    #[error("empty batch")]
    EmptyBatch,
    #[error("prediction and target lengths differ: {pred} vs {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("image {index}: {source}")]
    Image { index: usize, source: MeasureError },
    #[error("dataset references image {index}, but only {len} images were loaded")]
    MissingImage { index: usize, len: usize },
    #[error("dataset grid {dataset:?} does not match the images {images:?}")]
    Grid {
        dataset: (usize, usize),
        images: (usize, usize),
    },
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Optimization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Validation is evaluated every this many epochs (and after the last).
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            lr: 1e-3,
            batch: 256,
            epochs: 2000,
            seed: 0,
            eval_every: 5,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::Config(
                "evaluation cadence must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Seed for a model's initialization, distinct per kind; the data order
/// uses the master seed itself so every kind sees the same batches.
pub fn init_seed(master: u64, kind: ModelKind) -> u64 {
    let mut z = master ^ kind.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Encoder inputs for every image a dataset touches.
#[derive(Debug, Clone)]
pub struct ImageBank {
    pub side: usize,
    pub data: Vec<f32>,
}

impl ImageBank {
    pub fn len(&self) -> usize {
        self.data.len() / (self.side * self.side)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let p = self.side * self.side;
        &self.data[i * p..(i + 1) * p]
    }

    /// Rows `idx` stacked into one contiguous batch.
    pub fn gather(&self, idx: impl IntoIterator<Item = usize>) -> Vec<f32> {
        idx.into_iter()
            .flat_map(|i| self.row(i).iter().copied())
            .collect()
    }
}

/// Pairs as rows into an [`ImageBank`] with their W2 targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub w2: Vec<f64>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.w2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w2.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> PairSet {
        PairSet {
            a: idx.iter().map(|&i| self.a[i]).collect(),
            b: idx.iter().map(|&i| self.b[i]).collect(),
            w2: idx.iter().map(|&i| self.w2[i]).collect(),
        }
    }
}

/// A dataset materialized for training.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub bank: ImageBank,
    pub train: PairSet,
    pub val: PairSet,
    pub test: PairSet,
}

impl TrainData {
    pub fn split(&self, which: Split) -> &PairSet {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Matching architecture for the bank's resolution.
    pub fn arch(&self) -> Arch {
        Arch::for_side(self.bank.side)
    }
}

/// Converts every referenced image to its encoder input (the sum-to-one
/// measure weights), after optional `downscale` block pooling.
pub fn prepare(
    ds: &PairDataset,
    images: &ImageSet,
    downscale: usize,
) -> Result<TrainData, TrainError> {
    if (ds.meta.height, ds.meta.width) != (images.height, images.width) {
        return Err(TrainError::Grid {
            dataset: (ds.meta.height, ds.meta.width),
            images: (images.height, images.width),
        });
    }
    let set = if downscale > 1 {
        images.downscale(downscale)
    } else {
        images.clone()
    };
    if set.height != set.width {
        return Err(TrainError::Config("the encoder needs square images".into()));
    }
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut order = Vec::new();
    let mut sets = [PairSet::default(), PairSet::default(), PairSet::default()];
    for (r, s) in ds.records.iter().zip(&ds.splits) {
        let mut row = |index: usize| -> Result<usize, TrainError> {
            if index >= set.len() {
                return Err(TrainError::MissingImage {
                    index,
                    len: set.len(),
                });
            }
            Ok(*rows.entry(index).or_insert_with(|| {
                order.push(index);
                order.len() - 1
            }))
        };
        let (a, b) = (row(r.idx_a)?, row(r.idx_b)?);
        let k = match s {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        sets[k].a.push(a);
        sets[k].b.push(b);
        sets[k].w2.push(r.w2);
    }
    let mut data = Vec::with_capacity(order.len() * set.height * set.width);
    for &index in &order {
        let m = GridMeasure::from_bytes(set.height, set.width, set.image(index))
            .map_err(|source| TrainError::Image { index, source })?;
        data.extend(m.weights().iter().map(|&v| v as f32));
    }
    let [train, val, test] = sets;
    Ok(TrainData {
        bank: ImageBank {
            side: set.height,
            data,
        },
        train,
        val,
        test,
    })
}

/// Mean of squared differences.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != target.len() {
        return Err(TrainError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Test-style metrics over a set of predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub rel_mae: f64,
    pub mean_true: f64,
    /// `(true, predicted)` per pair.
    pub rows: Vec<(f64, f64)>,
}

impl MetricReport {
    pub fn from_predictions(truth: &[f64], pred: &[f64]) -> Result<Self, TrainError> {
        let mse = mse_loss(pred, truth)?;
        let n = truth.len() as f64;
        let mae = pred
            .iter()
            .zip(truth)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / n;
        let mean_true = truth.iter().sum::<f64>() / n;
        Ok(Self {
            mse,
            mae,
            rel_mae: mae / mean_true,
            mean_true,
            rows: truth.iter().copied().zip(pred.iter().copied()).collect(),
        })
    }
}

/// Model distances for every pair of `pairs`; each distinct image is
/// encoded once.
pub fn predict(
    model: &Model<f32>,
    bank: &ImageBank,
    pairs: &PairSet,
) -> Result<Vec<f64>, TrainError> {
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut order = Vec::new();
    for &i in pairs.a.iter().chain(&pairs.b) {
        local.entry(i).or_insert_with(|| {
            order.push(i);
            order.len() - 1
        });
    }
    if order.is_empty() {
        return Ok(Vec::new());
    }
    let emb = model.embed(&bank.gather(order.iter().copied()))?;
    Ok(pairs
        .a
        .iter()
        .zip(&pairs.b)
        .map(|(a, b)| emb.distance(local[a], local[b]))
        .collect())
}

/// Metrics of `model` on `pairs`.
pub fn evaluate(
    model: &Model<f32>,
    bank: &ImageBank,
    pairs: &PairSet,
) -> Result<MetricReport, TrainError> {
    let pred = predict(model, bank, pairs)?;
    MetricReport::from_predictions(&pairs.w2, &pred)
}

/// One recorded evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch (a full pass at epoch 0).
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest recorded validation MSE.
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub curve: Vec<CurvePoint>,
}

/// Trains `model` with minibatch Adam. Epoch 0 (the initial parameters) is
/// a checkpoint candidate; ties keep the earliest epoch.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    model: Model<f32>,
) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, data, model, |_| {})
}

/// [`train`] with a callback after every evaluation.
pub fn train_with(
    cfg: &TrainConfig,
    data: &TrainData,
    mut model: Model<f32>,
    mut on_eval: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let has_val = !data.val.is_empty();
    let val_mse = |m: &Model<f32>| -> Result<f64, TrainError> {
        if has_val {
            Ok(evaluate(m, &data.bank, &data.val)?.mse)
        } else {
            Ok(f64::NAN)
        }
    };
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let first = CurvePoint {
        epoch: 0,
        train_mse: evaluate(&model, &data.bank, &data.train)?.mse,
        val_mse: val_mse(&model)?,
    };
    on_eval(&first);
    let mut curve = vec![first];
    let mut best = (model.clone(), 0, first.val_mse);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch).enumerate() {
            let xa = data.bank.gather(idx.iter().map(|&i| data.train.a[i]));
            let xb = data.bank.gather(idx.iter().map(|&i| data.train.b[i]));
            let target: Vec<f32> = idx.iter().map(|&i| data.train.w2[i] as f32).collect();
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape);
            let d = model.pair_distances(&mut tape, &vars, &xa, &xb)?;
            let loss = tape.mse(d, &target);
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch });
            }
            let grads = tape.backward(loss);
            let g = model.params().collect_grads(&grads, &vars);
            if g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch });
            }
            adam_step(model.params_mut(), &g, &adam)?;
            loss_sum += f64::from(value) * idx.len() as f64;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let point = CurvePoint {
                epoch,
                train_mse: loss_sum / data.train.len() as f64,
                val_mse: val_mse(&model)?,
            };
            on_eval(&point);
            curve.push(point);
            if point.val_mse < best.2 {
                best = (model.clone(), epoch, point.val_mse);
            }
        }
    }
    if !has_val {
        best = (model, cfg.epochs, f64::NAN);
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        best_val: best.2,
        curve,
    })
}

/// One learned distance weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub index: usize,
    /// Stage name for DeepKENN, time `t_k` for ODE-KENN.
    pub label: String,
    pub lambda: f64,
}

/// Effective weights: six stage weights for DeepKENN, one per left time
/// endpoint for ODE-KENN.
pub fn export_weights(model: &Model<f32>) -> Result<Vec<WeightRow>, TrainError> {
    let lam = model.lambdas().ok_or(TrainError::NoWeights(model.kind()))?;
    let n = lam.len();
    Ok(lam
        .into_iter()
        .enumerate()
        .map(|(index, lambda)| WeightRow {
            index,
            label: match model.kind() {
                ModelKind::DeepKenn => STAGE_NAMES[index].to_string(),
                _ => format!("{}", index as f64 / n as f64),
            },
            lambda,
        })
        .collect())
}
