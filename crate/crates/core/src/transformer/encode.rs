use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Interleaves `[0; x_i]` and `[y_i; 0]` columns and appends `[0; query]`,
/// giving a `(d+1) × (2n+1)` matrix.
pub fn encode_task(x: &DenseMatrix, y: &[f64], query: &[f64]) -> Result<DenseMatrix> {
    let context = encode_context(x, y)?;
    if query.len() != x.cols() {
        return Err(Error::Dimension {
            context: "encode_task",
            expected: format!("query of length {}", x.cols()),
            got: format!("{}", query.len()),
        });
    }
    let n_cols = context.cols() + 1;
    let mut out = DenseMatrix::zeros(x.cols() + 1, n_cols);
    out.set_block(0, 0, &context);
    for (k, &q) in query.iter().enumerate() {
        out[(k + 1, n_cols - 1)] = q;
    }
    out.ensure_finite("encode_task")?;
    Ok(out)
}

/// The `2n` context columns alone.
pub fn encode_context(x: &DenseMatrix, y: &[f64]) -> Result<DenseMatrix> {
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(Error::Dimension {
            context: "encode_context",
            expected: format!("{n} targets"),
            got: format!("{}", y.len()),
        });
    }
    let mut out = DenseMatrix::zeros(d + 1, 2 * n);
    for i in 0..n {
        for k in 0..d {
            out[(k + 1, 2 * i)] = x[(i, k)];
        }
        out[(0, 2 * i + 1)] = y[i];
    }
    out.ensure_finite("encode_context")?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedTask {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub query: Vec<f64>,
}

/// Inverse of [`encode_task`]. Rejects matrices that are not in that layout.
pub fn decode_task(tokens: &DenseMatrix) -> Result<DecodedTask> {
    let (rows, cols) = tokens.shape();
    if rows == 0 || cols % 2 == 0 {
        return Err(Error::Dimension {
            context: "decode_task",
            expected: "d+1 rows and an odd number of columns".into(),
            got: format!("{rows}x{cols}"),
        });
    }
    let d = rows - 1;
    let n = cols / 2;
    let bad = |what: String| Error::InvalidArgument(format!("decode_task: {what}"));
    let mut x = DenseMatrix::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        if tokens[(0, 2 * i)] != 0.0 {
            return Err(bad(format!("x column {} has a nonzero label slot", 2 * i)));
        }
        if (1..=d).any(|k| tokens[(k, 2 * i + 1)] != 0.0) {
            return Err(bad(format!("y column {} has nonzero input slots", 2 * i + 1)));
        }
        for k in 0..d {
            x[(i, k)] = tokens[(k + 1, 2 * i)];
        }
        y.push(tokens[(0, 2 * i + 1)]);
    }
    if tokens[(0, cols - 1)] != 0.0 {
        return Err(bad("query column has a nonzero label slot".into()));
    }
    let query = (1..=d).map(|k| tokens[(k, cols - 1)]).collect();
    Ok(DecodedTask { x, y, query })
}
