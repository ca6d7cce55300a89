//! Dense linear algebra and the scalar nonlinearities of the transformer.

mod linalg;
mod matrix;
mod special;

pub use linalg::{solve_least_squares, solve_square, PINV_RELATIVE_CUTOFF};
pub use matrix::{dot, norm_sq, DenseMatrix};
pub use special::{
    compensated_sum, erf, erfc, gelu, gelu_derivative, layer_norm, normal_cdf, normal_pdf, softmax,
    LAYER_NORM_MIN_VARIANCE,
};
pub(crate) use special::{normalize_with, population_variance};
