use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use super::Real;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParamError {
    #[error("parameter `{0}` already exists")]
    Duplicate(String),
    #[error("no parameter named `{0}`")]
    Unknown(String),
    #[error("expected {expected} gradient tensors, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("gradient for `{name}` has {got} elements, parameter has {expected}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / fan_in)`, for layers followed by ReLU.
    He { fan_in: usize },
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    /// Every entry equal to the given value.
    Const(f64),
}

impl Init {
    fn sample<T: Real>(self, n: usize, rng: &mut impl Rng) -> Vec<T> {
        let bound = match self {
            Init::He { fan_in } => (6.0 / fan_in as f64).sqrt(),
            Init::Xavier { fan_in, fan_out } => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::Const(c) => return vec![T::c(c); n],
        };
        (0..n).map(|_| T::c(rng.gen_range(-bound..bound))).collect()
    }
}

/// Named parameters in insertion order, with Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    pub(crate) tensors: Vec<Tensor<T>>,
    pub(crate) m: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
    pub(crate) step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    /// Adds a tensor; returns its index.
    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<usize, ParamError> {
        if self.index_of(name).is_some() {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.m.push(vec![T::zero(); value.numel()]);
        self.v.push(vec![T::zero(); value.numel()]);
        self.names.push(name.to_string());
        self.tensors.push(value);
        Ok(self.tensors.len() - 1)
    }

    /// Adds a freshly initialized tensor of the given shape.
    pub fn init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<usize, ParamError> {
        let n = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), init.sample(n, rng)).expect("sampled to shape");
        self.insert(name, t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ParamError> {
        self.index_of(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ParamError> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(ParamError::Unknown(name.to_string())),
        }
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adam steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Records every parameter on `tape`; the returned handles follow store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Gradients for each parameter, zero where none flowed.
    pub fn collect_grads(&self, grads: &Gradients<T>, vars: &[Var]) -> Vec<Vec<T>> {
        self.tensors
            .iter()
            .zip(vars)
            .map(|(t, &v)| grads.get_or_zeros(v, t.numel()))
            .collect()
    }

    /// Converts values (and Adam state) to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::c(x.f64())).collect();
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            m: self.m.iter().map(conv).collect(),
            v: self.v.iter().map(conv).collect(),
            step: self.step,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}
