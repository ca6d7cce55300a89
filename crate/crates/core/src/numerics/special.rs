//! Scalar nonlinearities and the two vector normalizations used by the
//! transformer.
//!
//! `erf` follows Abramowitz & Stegun: the power series 7.1.6 for |x| < 3 and
//! the continued fraction 7.1.14 for erfc beyond it, evaluated with the
//! modified Lentz algorithm. Both branches reach full double precision on
//! their ranges (absolute error well under 1e-15). Off-the-shelf rational
//! approximations stop near 1e-13, which the GeLU product trick amplifies
//! by its output scale.

use std::f64::consts::{FRAC_2_SQRT_PI, PI, SQRT_2};

use crate::error::{Error, Result};

const SERIES_LIMIT: f64 = 3.0;

/// Inputs to [`layer_norm`] with variance below this are rejected.
pub const LAYER_NORM_MIN_VARIANCE: f64 = 1e-30;

/// 2/√π · e^{-x²} · Σ 2ⁿ x^{2n+1} / (1·3·…·(2n+1)); every term is positive.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
        // `<=` so that x = 0 terminates.
        if term <= sum * 1e-17 {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-x2).exp() * sum
}

/// erfc(x) for x ≥ SERIES_LIMIT:
/// e^{-x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + …)))).
fn erfc_continued_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 * 0.5;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * PI.sqrt())
}

pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x.abs() < SERIES_LIMIT {
        erf_series(x.abs()).copysign(x)
    } else if x > 0.0 {
        1.0 - erfc_continued_fraction(x)
    } else {
        erfc_continued_fraction(-x) - 1.0
    }
}

pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x >= SERIES_LIMIT {
        erfc_continued_fraction(x)
    } else if x <= -SERIES_LIMIT {
        2.0 - erfc_continued_fraction(-x)
    } else {
        1.0 - erf_series(x.abs()).copysign(x)
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// x/2 · (1 + erf(x/√2)), evaluated through erfc so the left tail keeps its
/// relative precision.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Mean-zero, unit population variance; no gain or shift.
pub fn layer_norm(v: &[f64]) -> Result<Vec<f64>> {
    let var = population_variance(v);
    if !(var >= LAYER_NORM_MIN_VARIANCE) {
        return Err(Error::InvalidArgument(format!(
            "layer_norm: degenerate variance {var:e}"
        )));
    }
    Ok(normalize_with(v, var))
}

pub(crate) fn population_variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mean = mean(v);
    let dev: Vec<f64> = v.iter().map(|x| x - mean).collect();
    compensated_sum(dev.iter().map(|d| d * d)) / v.len() as f64
}

pub(crate) fn normalize_with(v: &[f64], var: f64) -> Vec<f64> {
    let mean = mean(v);
    let inv = 1.0 / var.sqrt();
    v.iter().map(|x| (x - mean) * inv).collect()
}

fn mean(v: &[f64]) -> f64 {
    compensated_sum(v.iter().copied()) / v.len() as f64
}

/// Neumaier summation; hidden vectors mix ±1e4 bypass entries with values
/// near 1e-3, so plain summation would leak into the mean.
pub fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Gauss-Legendre (8 nodes per panel) integral of 2/√π e^{-t²}.
    fn erf_quadrature(x: f64) -> f64 {
        const NODES: [f64; 4] = [
            0.183_434_642_495_649_8,
            0.525_532_409_916_329_0,
            0.796_666_477_413_626_7,
            0.960_289_856_497_536_2,
        ];
        const WEIGHTS: [f64; 4] = [
            0.362_683_783_378_362_0,
            0.313_706_645_877_887_3,
            0.222_381_034_453_374_5,
            0.101_228_536_290_376_3,
        ];
        let panels = 400;
        let h = x / panels as f64;
        let mut total = 0.0;
        for p in 0..panels {
            let mid = (p as f64 + 0.5) * h;
            for (n, w) in NODES.iter().zip(WEIGHTS) {
                for s in [-1.0, 1.0] {
                    let t = mid + s * n * h / 2.0;
                    total += w * (-t * t).exp() * h / 2.0;
                }
            }
        }
        total * FRAC_2_SQRT_PI
    }

    #[test]
    fn erf_matches_tabulated_values() {
        let table = [
            (0.5, 0.520_499_877_813_046_5),
            (1.0, 0.842_700_792_949_714_9),
            (2.0, 0.995_322_265_018_952_7),
            (3.0, 0.999_977_909_503_001_4),
        ];
        for (x, want) in table {
            assert!((erf(x) - want).abs() < 1e-15, "erf({x})");
            assert!((erf(-x) + want).abs() < 1e-15, "erf(-{x})");
        }
    }

    #[test]
    fn erf_matches_quadrature_oracle() {
        let mut x = -6.0;
        while x <= 6.0 {
            let q = erf_quadrature(x);
            assert!((erf(x) - q).abs() < 1e-13, "x={x}: {} vs {q}", erf(x));
            x += 0.0625;
        }
    }

    #[test]
    fn erf_is_continuous_at_branch_switch() {
        let below = erf(SERIES_LIMIT - 1e-12);
        let above = erf(SERIES_LIMIT + 1e-12);
        assert!((below - above).abs() < 1e-14);
        let c_below = erfc(SERIES_LIMIT - 1e-12);
        let c_above = erfc(SERIES_LIMIT + 1e-12);
        assert!((c_below / c_above - 1.0).abs() < 1e-9);
    }

    #[test]
    fn erf_at_zero_and_symmetry() {
        assert_eq!(erf(0.0), 0.0);
        assert_eq!(gelu(0.0), 0.0);
        for x in [0.1, 1.7, 3.2, 6.0] {
            assert_eq!(erf(-x), -erf(x));
        }
    }

    #[test]
    fn erfc_tail_keeps_relative_precision() {
        // erfc(5) = 1.5374597944280348502e-12
        assert!((erfc(5.0) / 1.537_459_794_428_034_9e-12 - 1.0).abs() < 1e-13);
        assert!((erfc(-5.0) - (2.0 - 1.537_459_794_428_034_9e-12)).abs() < 1e-15);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        assert!(gelu(-10.0).abs() < 1e-9);
        let want = 0.5 * (1.0 + erf_quadrature(1.0 / SQRT_2));
        assert!((gelu(1.0) - want).abs() < 1e-13);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_derivative(x) - fd).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_examples() {
        assert!(layer_norm(&[1.0, 1.0, 1.0, 1.0]).is_err());
        let out = layer_norm(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(out, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let s = softmax(&[30.0, 0.0]);
        assert!(s[0] > 1.0 - 1e-12 && s[1] < 1e-12);
        assert_eq!(softmax(&[2000.0, -2000.0, 0.0]), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e4, 1e-3, -1e4, 1e-3];
        assert_eq!(compensated_sum(v.iter().copied()), 2e-3);
    }
}
