//! Compiles read-arithmetic-write (RAW) programs into explicit transformer
//! weights, runs them, and compares in-context regression learners.
//!
//! * [`numerics`]: dense matrices, erf/GeLU, layer norm, least squares.
//! * [`transformer`]: the decoder-only interpreter and token encoding.
//! * [`compiler`]: RAW ops, their lowering to layers, and the SGD and
//!   Sherman–Morrison programs.
//! * [`predictors`]: reference regression algorithms behind one trait.
//! * [`metrics`]: SPD, ILWD, MSPD, R² linearity and Bayes risk.
//! * [`probe`]: position-attention probes over hidden traces.

pub mod compiler;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod predictors;
pub mod probe;
pub mod rng;
pub mod transformer;

pub use error::{CompileError, Error, Result};
pub use numerics::DenseMatrix;
