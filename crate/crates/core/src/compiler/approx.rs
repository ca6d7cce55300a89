//! Scalar forms of the nonlinearity tricks the compiled layers rely on.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{gelu, layer_norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MulScheme {
    /// `√(π/2)(G(x+y) − G(x) − G(y))`
    Gelu,
    /// Forward differences of tanh with step `δ`.
    TanhDerivative,
    /// `Q((x+y)/2) − Q((x−y)/2)` with the six-ReLU square approximation `Q`.
    ReluPiecewise,
}

/// Inputs with larger magnitude are outside the documented accuracy domain.
pub const MUL_DOMAIN: f64 = 0.1;

pub const TANH_DELTA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MulApprox {
    pub value: f64,
    /// Set when `|x|` or `|y|` exceeds [`MUL_DOMAIN`]; the value is still
    /// returned but carries no accuracy guarantee.
    pub out_of_domain: bool,
}

pub fn approx_mul(x: f64, y: f64, scheme: MulScheme) -> MulApprox {
    let value = match scheme {
        MulScheme::Gelu => gelu_mul(x, y),
        MulScheme::TanhDerivative => tanh_mul(x, y, TANH_DELTA),
        MulScheme::ReluPiecewise => relu_square((x + y) / 2.0) - relu_square((x - y) / 2.0),
    };
    MulApprox {
        value,
        out_of_domain: x.abs() > MUL_DOMAIN || y.abs() > MUL_DOMAIN,
    }
}

pub fn gelu_mul(x: f64, y: f64) -> f64 {
    (PI / 2.0).sqrt() * (gelu(x + y) - gelu(x) - gelu(y))
}

/// `−½[D(x+y) − D(x) − D(y) + 1]` with `D(u) = (tanh(u+δ) − tanh(u))/δ`.
pub fn tanh_mul(x: f64, y: f64, delta: f64) -> f64 {
    let d = |u: f64| ((u + delta).tanh() - u.tanh()) / delta;
    -0.5 * (d(x + y) - d(x) - d(y) + 1.0)
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Piecewise-linear fit of `u²` on `[−0.1, 0.1]` built from six ReLUs.
pub fn relu_square(u: f64) -> f64 {
    0.0375 * relu(u)
        + 0.0375 * relu(-u)
        + relu(0.05 * (u - 0.05))
        + relu(-0.05 * (u + 0.05))
        + relu(0.025 * (u - 0.025))
        + relu(-0.025 * (u + 0.025))
}

/// `GeLU(N + x) − N`.
pub fn gelu_bypass(x: f64, n: f64) -> f64 {
    gelu(n + x) - n
}

/// `√(2/L)·N·λ([x, N, −N − Σx, 0])` restricted to the `x` block, with
/// `L = len(x) + 3`.
pub fn layer_norm_bypass(x: &[f64], n: f64) -> Result<Vec<f64>> {
    let sum: f64 = x.iter().sum();
    let mut v = x.to_vec();
    v.extend([n, -n - sum, 0.0]);
    let l = v.len() as f64;
    let out = layer_norm(&v)?;
    Ok(out[..x.len()].iter().map(|z| (2.0 / l).sqrt() * n * z).collect())
}

/// `√(2/L)·M·N·λ([N·c, y/M, −N·c − Σy/M, 0])` restricted to the `y` block,
/// which approximates `y / c`.
pub fn layer_norm_divide(y: &[f64], c: f64, n: f64, m: f64) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = y.iter().map(|v| v / m).collect();
    let sum: f64 = scaled.iter().sum();
    let mut v = vec![n * c];
    v.extend(&scaled);
    v.extend([-n * c - sum, 0.0]);
    let l = v.len() as f64;
    let out = layer_norm(&v)?;
    Ok(out[1..=y.len()].iter().map(|z| (2.0 / l).sqrt() * m * n * z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_operand_cancels() {
        for y in [-0.1, -0.03, 0.0, 0.07] {
            assert!(approx_mul(0.0, y, MulScheme::Gelu).value.abs() <= 1e-12);
        }
    }

    #[test]
    fn small_product() {
        let r = approx_mul(0.01, 0.02, MulScheme::Gelu);
        assert!((r.value - 2e-4).abs() <= 2.0 * (1e-6 + 8e-6));
        assert!(!r.out_of_domain);
        assert!(approx_mul(0.5, 0.0, MulScheme::Gelu).out_of_domain);
    }

    #[test]
    fn relu_square_hits_its_knots() {
        assert_eq!(relu_square(0.0), 0.0);
        assert!((relu_square(0.05) - 0.0025).abs() < 1e-15);
        assert!((relu_square(-0.05) - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn bypass_examples() {
        assert!((gelu_bypass(0.3, 30.0) - 0.3).abs() < 1e-9);
        let out = layer_norm_divide(&[0.4], 2.0, 1e4, 1e2).unwrap();
        assert!((out[0] - 0.2).abs() < 2e-4);
        assert_eq!(layer_norm_divide(&[0.0], 2.0, 1e4, 1e2).unwrap(), vec![0.0]);
    }
}
