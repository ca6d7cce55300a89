use nalgebra::{DMatrix, DVector};

use super::matrix::{check_finite, DenseMatrix};
use crate::error::{Error, Result};

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Ridge solution `(XᵀX + λI)⁻¹Xᵀy` for λ > 0; for λ = 0 the minimum-norm
/// least-squares solution through a truncated SVD pseudoinverse.
pub fn solve_least_squares(x: &DenseMatrix, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if x.rows() != y.len() {
        return Err(Error::Dimension {
            context: "solve_least_squares",
            expected: format!("{} targets", x.rows()),
            got: format!("{}", y.len()),
        });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    x.ensure_finite("solve_least_squares: X")?;
    check_finite(y, "solve_least_squares: y")?;
    let d = x.cols();
    if x.rows() == 0 {
        return Ok(vec![0.0; d]);
    }

    let xa = to_na(x);
    let ya = DVector::from_column_slice(y);
    let w = if lambda > 0.0 {
        let mut gram = xa.transpose() * &xa;
        for i in 0..d {
            gram[(i, i)] += lambda;
        }
        let rhs = xa.transpose() * ya;
        match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            // Only reachable when λ is swamped by rounding in a huge Gram matrix.
            None => gram
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::InvalidArgument("ridge system is singular".into()))?,
        }
    } else {
        min_norm_solve(xa, ya)
    };
    let out: Vec<f64> = w.iter().copied().collect();
    check_finite(&out, "solve_least_squares")?;
    Ok(out)
}

fn min_norm_solve(x: DMatrix<f64>, y: DVector<f64>) -> DVector<f64> {
    let svd = x.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = PINV_RELATIVE_CUTOFF * sigma_max;
    let mut w = DVector::zeros(v_t.ncols());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let coef = u.column(k).dot(&y) / s;
        w += v_t.row(k).transpose() * coef;
    }
    w
}

/// Solves a square system by partial-pivot LU.
pub fn solve_square(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if a.rows() != a.cols() || a.rows() != b.len() {
        return Err(Error::Dimension {
            context: "solve_square",
            expected: format!("square system with {} rows", b.len()),
            got: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    let sol = to_na(a)
        .lu()
        .solve(&DVector::from_column_slice(b))
        .ok_or_else(|| Error::InvalidArgument("singular system".into()))?;
    let out: Vec<f64> = sol.iter().copied().collect();
    check_finite(&out, "solve_square")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_design_returns_targets() {
        let x = DenseMatrix::identity(3);
        let w = solve_least_squares(&x, &[1.0, -2.0, 0.5], 0.0).unwrap();
        for (a, b) in w.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn single_row_min_norm() {
        let x = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let w = solve_least_squares(&x, &[2.0], 0.0).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-14 && w[1].abs() < 1e-14);
    }

    #[test]
    fn empty_design_gives_zero() {
        let x = DenseMatrix::zeros(0, 3);
        assert_eq!(solve_least_squares(&x, &[], 0.0).unwrap(), vec![0.0; 3]);
        assert_eq!(solve_least_squares(&x, &[], 1.0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = DenseMatrix::identity(2);
        assert!(solve_least_squares(&x, &[1.0], 0.0).is_err());
        assert!(solve_least_squares(&x, &[1.0, f64::NAN], 0.0).is_err());
        assert!(solve_least_squares(&x, &[1.0, 1.0], -1.0).is_err());
    }

    #[test]
    fn zero_matrix_min_norm_is_zero() {
        let x = DenseMatrix::zeros(2, 2);
        assert_eq!(solve_least_squares(&x, &[1.0, 1.0], 0.0).unwrap(), vec![0.0, 0.0]);
    }
}
