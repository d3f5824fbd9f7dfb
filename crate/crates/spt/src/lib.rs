//! Schema-as-parameterized-tools: schema tokens trained on a frozen language
//! model head, with dual-mode (retrieval/generation) constrained decoding.

pub mod baselines;
pub mod datagen;
pub mod decoder;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod registry;
pub mod trainer;
pub mod rng;
pub mod scalar;
pub mod textcore;

pub use error::{Result, SptError};
pub use scalar::Scalar;

/// Training-precision model parameters.
pub type ModelParamsF32 = model::ModelParams<f32>;
/// Double-precision parameters, used by gradient-check builds.
pub type ModelParamsF64 = model::ModelParams<f64>;
