//! The shared CNN encoder and the three learned distances: the naive
//! final-layer distance, DeepKENN's weighted multi-stage distance and
//! ODE-KENN's weighted trajectory distance.

mod ode;

pub use ode::{joint_batch_solve, rk4_solve, Trajectory};

use crate::nn::{softplus, softplus_inv, Init, ParamError, ParamStore, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Guard inside every square root so coincident inputs keep finite gradients.
pub const SQRT_EPS: f64 = 1e-12;

/// Names of the feature stages, in encoder order.
pub const STAGE_NAMES: [&str; 6] = ["conv1", "conv2", "conv3", "fc1", "fc2", "head"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("expected images of {expected} pixels, got a buffer of {got} values")]
    InputShape { expected: usize, got: usize },
    #[error("batch sizes differ: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },
    #[error("trajectory blow-up: non-finite state after step {step}")]
    TrajectoryBlowUp { step: usize },
    #[error("an ODE solve needs at least one step")]
    NoSteps,
    #[error("unknown model kind `{0}` (expected naive, deepkenn or odekenn)")]
    UnknownKind(String),
    #[error("parameter layout does not match the architecture: {0}")]
    Layout(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Naive,
    DeepKenn,
    OdeKenn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Naive, ModelKind::DeepKenn, ModelKind::OdeKenn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Naive => "naive",
            ModelKind::DeepKenn => "deepkenn",
            ModelKind::OdeKenn => "odekenn",
        }
    }

    /// Small integer mixed into seeds so each kind gets its own initialization.
    pub fn tag(self) -> u64 {
        match self {
            ModelKind::Naive => 1,
            ModelKind::DeepKenn => 2,
            ModelKind::OdeKenn => 3,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(ModelKind::Naive),
            "deepkenn" => Ok(ModelKind::DeepKenn),
            "odekenn" => Ok(ModelKind::OdeKenn),
            _ => Err(ModelError::UnknownKind(s.to_string())),
        }
    }
}

/// Encoder geometry. Every convolution is stride 1 with "same" padding and
/// is followed by ReLU and, where enabled, 2x2 max pooling with floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub side: usize,
    pub channels: [usize; 3],
    pub kernels: [usize; 3],
    pub pools: [bool; 3],
    pub hidden: usize,
    pub embed: usize,
    pub steps: usize,
}

impl Arch {
    /// The 28x28 MNIST architecture.
    pub fn full() -> Self {
        Self::for_side(28)
    }

    /// Same layer widths on a `side x side` input.
    pub fn for_side(side: usize) -> Self {
        Self {
            side,
            channels: [8, 16, 32],
            kernels: [5, 3, 3],
            pools: [true; 3],
            hidden: 128,
            embed: 64,
            steps: 10,
        }
    }

    /// A shrunken 4x4 variant small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            side: 4,
            channels: [2, 3, 4],
            kernels: [3, 3, 3],
            pools: [true, true, false],
            hidden: 5,
            embed: 3,
            steps: 10,
        }
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    /// `(channels, side)` after each convolution block.
    fn conv_shapes(&self) -> [(usize, usize); 3] {
        let mut s = self.side;
        let mut out = [(0, 0); 3];
        for l in 0..3 {
            if self.pools[l] {
                s /= 2;
            }
            out[l] = (self.channels[l], s);
        }
        out
    }

    /// Flat widths of the five encoder stages.
    pub fn encoder_dims(&self) -> [usize; 5] {
        let c = self.conv_shapes();
        [
            c[0].0 * c[0].1 * c[0].1,
            c[1].0 * c[1].1 * c[1].1,
            c[2].0 * c[2].1 * c[2].1,
            self.hidden,
            self.embed,
        ]
    }

    /// Expected `(name, shape)` of every parameter of `kind`, in store order.
    pub fn layout(&self, kind: ModelKind) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        let mut cin = 1;
        for l in 0..3 {
            let (k, c) = (self.kernels[l], self.channels[l]);
            v.push((format!("conv{}.w", l + 1), vec![c, cin, k, k]));
            v.push((format!("conv{}.b", l + 1), vec![c]));
            cin = c;
        }
        let d = self.encoder_dims();
        v.push(("fc1.w".into(), vec![d[2], self.hidden]));
        v.push(("fc1.b".into(), vec![self.hidden]));
        v.push(("fc2.w".into(), vec![self.hidden, self.embed]));
        v.push(("fc2.b".into(), vec![self.embed]));
        let field = if kind == ModelKind::OdeKenn {
            "ode"
        } else {
            "head"
        };
        v.push((format!("{field}.w"), vec![self.embed, self.embed]));
        v.push((format!("{field}.b"), vec![self.embed]));
        match kind {
            ModelKind::Naive => {}
            ModelKind::DeepKenn => v.push(("stage.theta".into(), vec![6])),
            ModelKind::OdeKenn => v.push(("time.theta".into(), vec![self.steps])),
        }
        v
    }
}

const FIELD_W: usize = 10;
const FIELD_B: usize = 11;
const THETA: usize = 12;

/// Flattened per-stage features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<T> {
    pub stages: Vec<Vec<T>>,
}

impl<T> FeatureStack<T> {
    pub fn dims(&self) -> Vec<usize> {
        self.stages.iter().map(Vec::len).collect()
    }
}

/// Per-item vectors whose Euclidean differences reproduce the model distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings<T> {
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> Embeddings<T> {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Guarded distance between items `i` and `j`, accumulated in `f64`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let s: f64 = self
            .row(i)
            .iter()
            .zip(self.row(j))
            .map(|(&a, &b)| {
                let d = a.f64() - b.f64();
                d * d
            })
            .sum();
        (s + SQRT_EPS).sqrt()
    }
}

/// A distance model: architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    kind: ModelKind,
    arch: Arch,
    params: ParamStore<T>,
}

/// Inference batch size for the non-differentiable helpers.
const CHUNK: usize = 256;

impl<T: Real> Model<T> {
    /// Fresh model with seeded fan-in uniform initialization, zero biases
    /// and every distance weight starting at `softplus(theta) = 1`.
    pub fn new(kind: ModelKind, arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in arch.layout(kind) {
            let init = if name.ends_with(".b") {
                Init::Const(0.0)
            } else if name.ends_with(".theta") {
                Init::Const(softplus_inv(1.0))
            } else if name.starts_with("conv") {
                Init::He {
                    fan_in: shape[1] * shape[2] * shape[3],
                }
            } else if name == "fc1.w" {
                Init::He { fan_in: shape[0] }
            } else {
                Init::Xavier {
                    fan_in: shape[0],
                    fan_out: shape[1],
                }
            };
            params
                .init(&name, &shape, init, &mut rng)
                .expect("layout names are unique");
        }
        Self { kind, arch, params }
    }

    /// Wraps an existing store after checking names and shapes.
    pub fn from_params(
        kind: ModelKind,
        arch: Arch,
        params: ParamStore<T>,
    ) -> Result<Self, ModelError> {
        let layout = arch.layout(kind);
        if layout.len() != params.len() {
            return Err(ModelError::Layout(format!(
                "{kind} needs {} tensors, store has {}",
                layout.len(),
                params.len()
            )));
        }
        for (i, (name, shape)) in layout.iter().enumerate() {
            let (got_name, t) = (&params.names()[i], params.tensor(i));
            if got_name != name || t.shape() != &shape[..] {
                return Err(ModelError::Layout(format!(
                    "slot {i}: expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { kind, arch, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            kind: self.kind,
            arch: self.arch,
            params: self.params.cast(),
        }
    }

    /// Effective `lambda = softplus(theta)` weights, or `None` for the naive model.
    pub fn lambdas(&self) -> Option<Vec<f64>> {
        match self.kind {
            ModelKind::Naive => None,
            _ => Some(
                self.params
                    .tensor(THETA)
                    .data()
                    .iter()
                    .map(|t| softplus(t.f64()))
                    .collect(),
            ),
        }
    }

    fn batch_of(&self, x: &[T]) -> Result<usize, ModelError> {
        let p = self.arch.pixels();
        if x.is_empty() || x.len() % p != 0 {
            return Err(ModelError::InputShape {
                expected: p,
                got: x.len(),
            });
        }
        Ok(x.len() / p)
    }

    /// Records the encoder on `tape` for the `(B, 1, side, side)` input `x`.
    /// Returns the five flattened stage outputs.
    pub fn encode_on_tape(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Vec<Var> {
        let mut stages = Vec::with_capacity(5);
        let mut h = x;
        for l in 0..3 {
            h = tape.conv2d(h, vars[2 * l], vars[2 * l + 1], self.arch.kernels[l] / 2);
            h = tape.relu(h);
            if self.arch.pools[l] {
                h = tape.maxpool2(h);
            }
            stages.push(tape.flatten(h));
        }
        let f1 = tape.linear(stages[2], vars[6], vars[7]);
        let f1 = tape.relu(f1);
        stages.push(f1);
        let f2 = tape.linear(f1, vars[8], vars[9]);
        stages.push(f2);
        stages
    }

    /// `tanh(h W + b)`: the head of the naive and DeepKENN models and the
    /// vector field of ODE-KENN.
    pub fn field_on_tape(&self, tape: &mut Tape<T>, vars: &[Var], h: Var) -> Var {
        let l = tape.linear(h, vars[FIELD_W], vars[FIELD_B]);
        tape.tanh(l)
    }

    fn input_var(&self, tape: &mut Tape<T>, x: &[T]) -> Result<Var, ModelError> {
        let b = self.batch_of(x)?;
        let t = Tensor::new(vec![b, 1, self.arch.side, self.arch.side], x.to_vec())
            .expect("checked length");
        Ok(tape.input(t))
    }

    /// Weighted trajectory distance from two solved trajectories.
    pub fn trajectory_distance(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        tx: &Trajectory,
        ty: &Trajectory,
    ) -> Var {
        let n = tx.steps();
        let terms: Vec<Var> = (0..n)
            .map(|k| {
                let d = tape.sub(tx.states[k], ty.states[k]);
                tape.sq_norm_rows(d)
            })
            .collect();
        let lam = tape.softplus(vars[THETA]);
        let s = tape.weighted_sum(&terms, lam, &vec![T::c(tx.dt); n]);
        tape.sqrt_eps(s, T::c(SQRT_EPS))
    }

    /// Records the distances between rows of `xa` and `xb` (each a batch of
    /// flattened images) and returns the `(B)` distance node.
    pub fn pair_distances(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        xa: &[T],
        xb: &[T],
    ) -> Result<Var, ModelError> {
        let (ba, bb) = (self.batch_of(xa)?, self.batch_of(xb)?);
        if ba != bb {
            return Err(ModelError::BatchMismatch {
                left: ba,
                right: bb,
            });
        }
        let mut both = Vec::with_capacity(xa.len() + xb.len());
        both.extend_from_slice(xa);
        both.extend_from_slice(xb);
        let x = self.input_var(tape, &both)?;
        let mut stages = self.encode_on_tape(tape, vars, x);
        let split = |tape: &mut Tape<T>, v: Var| {
            let a = tape.slice_rows(v, 0, ba);
            let b = tape.slice_rows(v, ba, 2 * ba);
            (a, b)
        };
        let eps = T::c(SQRT_EPS);
        match self.kind {
            ModelKind::Naive => {
                let head = self.field_on_tape(tape, vars, stages[4]);
                let (a, b) = split(tape, head);
                let d = tape.sub(a, b);
                let s = tape.sq_norm_rows(d);
                Ok(tape.sqrt_eps(s, eps))
            }
            ModelKind::DeepKenn => {
                let head = self.field_on_tape(tape, vars, stages[4]);
                stages.push(head);
                let terms: Vec<Var> = stages
                    .iter()
                    .map(|&st| {
                        let (a, b) = split(tape, st);
                        let d = tape.sub(a, b);
                        tape.sq_norm_rows(d)
                    })
                    .collect();
                let lam = tape.softplus(vars[THETA]);
                let s = tape.weighted_sum(&terms, lam, &[T::one(); 6]);
                Ok(tape.sqrt_eps(s, eps))
            }
            ModelKind::OdeKenn => {
                let (h0a, h0b) = split(tape, stages[4]);
                let (ta, tb) = joint_batch_solve(tape, h0a, h0b, self.arch.steps, |t, h| {
                    self.field_on_tape(t, vars, h)
                })?;
                Ok(self.trajectory_distance(tape, vars, &ta, &tb))
            }
        }
    }

    /// Distances for a batch of pairs, without gradients.
    pub fn distances(&self, xa: &[T], xb: &[T]) -> Result<Vec<T>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let d = self.pair_distances(&mut tape, &vars, xa, xb)?;
        Ok(tape.value(d).data().to_vec())
    }

    /// Distance between two single images.
    pub fn distance(&self, a: &[T], b: &[T]) -> Result<T, ModelError> {
        Ok(self.distances(a, b)?[0])
    }

    /// Stage features of one image: the five encoder stages, plus the head
    /// output for the models that have one.
    pub fn encode(&self, image: &[T]) -> Result<FeatureStack<T>, ModelError> {
        if image.len() != self.arch.pixels() {
            return Err(ModelError::InputShape {
                expected: self.arch.pixels(),
                got: image.len(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let x = self.input_var(&mut tape, image)?;
        let mut stages = self.encode_on_tape(&mut tape, &vars, x);
        if self.kind != ModelKind::OdeKenn {
            let head = self.field_on_tape(&mut tape, &vars, stages[4]);
            stages.push(head);
        }
        Ok(FeatureStack {
            stages: stages
                .iter()
                .map(|&s| tape.value(s).data().to_vec())
                .collect(),
        })
    }

    fn embed_chunk(&self, x: &[T]) -> Result<(usize, Vec<T>), ModelError> {
        let b = self.batch_of(x)?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let xv = self.input_var(&mut tape, x)?;
        let stages = self.encode_on_tape(&mut tape, &vars, xv);
        let lam = self.lambdas();
        let parts: Vec<(Var, T)> = match self.kind {
            ModelKind::Naive => vec![(self.field_on_tape(&mut tape, &vars, stages[4]), T::one())],
            ModelKind::DeepKenn => {
                let head = self.field_on_tape(&mut tape, &vars, stages[4]);
                let lam = lam.expect("DeepKENN has weights");
                stages
                    .iter()
                    .chain(std::iter::once(&head))
                    .zip(lam)
                    .map(|(&v, l)| (v, T::c(l.sqrt())))
                    .collect()
            }
            ModelKind::OdeKenn => {
                let traj = rk4_solve(&mut tape, stages[4], self.arch.steps, |t, h| {
                    self.field_on_tape(t, &vars, h)
                })?;
                let lam = lam.expect("ODE-KENN has weights");
                (0..self.arch.steps)
                    .map(|k| (traj.states[k], T::c((lam[k] * traj.dt).sqrt())))
                    .collect()
            }
        };
        let dim: usize = parts.iter().map(|(v, _)| tape.value(*v).row_len()).sum();
        let mut out = Vec::with_capacity(b * dim);
        for r in 0..b {
            for (v, s) in &parts {
                out.extend(tape.value(*v).row(r).iter().map(|&e| e * *s));
            }
        }
        Ok((dim, out))
    }

    /// Embeds every image of `images` (concatenated flattened inputs) so
    /// that the model distance of two items is the guarded Euclidean
    /// distance of their embeddings. Chunks run in parallel; results do not
    /// depend on the chunking.
    pub fn embed(&self, images: &[T]) -> Result<Embeddings<T>, ModelError> {
        let p = self.arch.pixels();
        self.batch_of(images)?;
        let chunks: Vec<(usize, Vec<T>)> = images
            .par_chunks(CHUNK * p)
            .map(|c| self.embed_chunk(c))
            .collect::<Result<_, _>>()?;
        let dim = chunks[0].0;
        let data = chunks.into_iter().flat_map(|(_, d)| d).collect();
        Ok(Embeddings { dim, data })
    }
}
