//! A small reverse-mode autodiff engine: tensors, a recording tape with the
//! handful of ops the distance models need, Adam, and a finite-difference
//! gradient checker.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

mod gemm;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use optim::{adam_step, AdamConfig};
pub use params::{Init, ParamError, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ShapeError, Tensor};

use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type of tensors.
pub trait Real: Float + Default + Debug + Display + Send + Sync + Sum + 'static {
    fn c(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 20.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Logistic sigmoid, the derivative of softplus.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
