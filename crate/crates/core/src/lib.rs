//! Learned surrogates of the Wasserstein-2 distance between images.
//!
//! The crate bundles everything needed to train and deploy them: grid
//! measures and an exact optimal-transport solver for ground truth, a small
//! tape-based autodiff engine, the three distance models (naive, DeepKENN,
//! ODE-KENN), the dataset pipeline, training/evaluation and the pairwise
//! matrix / Isomap tooling that consumes a trained surrogate.

pub mod data;
pub mod downstream;
pub mod measures;
pub mod models;
pub mod nn;
pub mod ot;
pub mod train;
