//! The two in-context regression programs: single-example SGD (and its
//! stacked multi-example form) and one Sherman–Morrison ridge update.
//!
//! Token layout: row 0 holds `y`, rows `1..=d` hold `x`. Timestep `2k`
//! carries `x_{k+1}`, timestep `2k+1` carries `y_{k+1}`, and the last
//! timestep is the query.

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

use super::program::{ColumnRule, LayerSpec, OutputCell, RawProgram};
use super::raw::{RawOp, Span, TimestepMap};

/// Program rows of the SGD programs.
///
/// ```text
/// 0            y
/// [1, 1+d)     x
/// 1+d          P   = wᵀx
/// 2+d          E   = wᵀx − y
/// [3+d, 3+2d)  G   = x(wᵀx − y)
/// [3+2d, 3+3d) Wr  = w, then w′
/// [3+3d, 3+4d) R   = G + λw
/// 3+4d         OUT = w′ᵀx_query
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SgdRows {
    pub x: Span,
    pub p: usize,
    pub e: usize,
    pub g: Span,
    pub wr: Span,
    pub r: Span,
    pub out: usize,
    pub total: usize,
}

pub fn sgd_rows(d: usize) -> SgdRows {
    SgdRows {
        x: Span::new(1, 1 + d),
        p: 1 + d,
        e: 2 + d,
        g: Span::new(3 + d, 3 + 2 * d),
        wr: Span::new(3 + 2 * d, 3 + 3 * d),
        r: Span::new(3 + 3 * d, 3 + 4 * d),
        out: 3 + 4 * d,
        total: 4 + 4 * d,
    }
}

/// Program rows of the Sherman–Morrison program (`D = d²`, matrices stored
/// row-major).
///
/// ```text
/// 0                        y
/// [1, 1+d)                 x
/// [1+d, 1+2d)              XY    = x·y
/// [1+2d, 1+2d+D)           AINV  = A⁻¹, starting at I/λ
/// [1+2d+D, 1+3d+D)         AU    = A⁻¹x
/// [1+3d+D, 1+4d+D)         VA    = xᵀA⁻¹
/// [1+4d+D, 1+4d+2D)        OUTER = A⁻¹x xᵀA⁻¹
/// 1+4d+2D                  DEN   = 1 + xᵀA⁻¹x
/// [2+4d+2D, 2+4d+3D)       RIGHT = OUTER / DEN
/// [2+4d+3D, 2+5d+3D)       WV    = A₁⁻¹x·y
/// 2+5d+3D                  OUT   = w′ᵀx_query
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShermanMorrisonRows {
    pub x: Span,
    pub xy: Span,
    pub ainv: Span,
    pub au: Span,
    pub va: Span,
    pub outer: Span,
    pub den: usize,
    pub right: Span,
    pub wv: Span,
    pub out: usize,
    pub total: usize,
}

pub fn sherman_morrison_rows(d: usize) -> ShermanMorrisonRows {
    let dd = d * d;
    let x = Span::new(1, 1 + d);
    let xy = Span::at(x.end, d);
    let ainv = Span::at(xy.end, dd);
    let au = Span::at(ainv.end, d);
    let va = Span::at(au.end, d);
    let outer = Span::at(va.end, dd);
    let den = outer.end;
    let right = Span::at(den + 1, dd);
    let wv = Span::at(right.end, d);
    let out = wv.end;
    ShermanMorrisonRows {
        x,
        xy,
        ainv,
        au,
        va,
        outer,
        den,
        right,
        wv,
        out,
        total: out + 1,
    }
}

fn row_matrix(v: &[f64]) -> DenseMatrix {
    DenseMatrix::row_vector(v).expect("finite entries")
}

fn ones_column(n: usize) -> DenseMatrix {
    DenseMatrix::from_vec(n, 1, vec![1.0; n]).expect("finite")
}

fn hstack(blocks: &[DenseMatrix]) -> DenseMatrix {
    let rows = blocks[0].rows();
    let cols = blocks.iter().map(DenseMatrix::cols).sum();
    let mut m = DenseMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        m.set_block(0, c, b);
        c += b.cols();
    }
    m
}

fn scaled_identity(n: usize, s: f64) -> DenseMatrix {
    let mut m = DenseMatrix::identity(n);
    for i in 0..n {
        m[(i, i)] = s;
    }
    m
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be finite, got {v}")))
    }
}

fn move_x(rows: Span) -> LayerSpec {
    LayerSpec::op(
        "move x",
        RawOp::affine(
            rows,
            DenseMatrix::identity(rows.len()),
            rows,
            DenseMatrix::identity(rows.len()),
            rows,
            TimestepMap::PreviousToken,
        ),
    )
}

/// `E = P − y`, `G = E·x`, then `R = G + λ·Wr` and `Wr ← Wr − 2α·R`.
fn update_tail(rows: &SgdRows, d: usize, alpha: f64, lambda: f64, w0: Option<&[f64]>) -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::op(
            "wᵀx − y",
            RawOp::affine(
                Span::row(rows.p),
                DenseMatrix::identity(1),
                Span::row(0),
                row_matrix(&[-1.0]),
                Span::row(rows.e),
                TimestepMap::SelfToken,
            ),
        ),
        LayerSpec::op(
            "x(wᵀx − y)",
            RawOp::product(
                Span::row(rows.e),
                ones_column(d),
                rows.x,
                DenseMatrix::identity(d),
                rows.g,
                DenseMatrix::identity(d),
                TimestepMap::SelfToken,
            ),
        ),
    ];
    if let Some(w0) = w0 {
        layers.push(LayerSpec::op("write w", RawOp::constant(rows.wr, w0.to_vec())));
    }
    layers.push(LayerSpec::op(
        "x(wᵀx − y) + λw",
        RawOp::affine(
            Span::EMPTY,
            DenseMatrix::zeros(d, 0),
            Span::new(rows.g.start, rows.wr.end),
            hstack(&[DenseMatrix::identity(d), scaled_identity(d, lambda)]),
            rows.r,
            TimestepMap::SelfToken,
        ),
    ));
    layers.push(LayerSpec::op(
        "w′",
        RawOp::affine(
            Span::EMPTY,
            DenseMatrix::zeros(d, 0),
            Span::new(rows.wr.start, rows.r.end),
            hstack(&[DenseMatrix::identity(d), scaled_identity(d, -2.0 * alpha)]),
            rows.wr,
            TimestepMap::SelfToken,
        ),
    ));
    layers
}

fn predict_tail(rows: &SgdRows) -> Vec<LayerSpec> {
    vec![
        LayerSpec::op("move w′", RawOp::mov(rows.wr, rows.wr, TimestepMap::PreviousToken)),
        LayerSpec::op("w′ᵀx", RawOp::dot(rows.wr, rows.x, rows.out, TimestepMap::SelfToken)),
    ]
}

/// Nine layers computing `w′ = w₀ − 2α(x₁(w₀ᵀx₁ − y₁) + λw₀)` at timestep 1
/// and `w′ᵀx₂` at the query. `w′` sits in rows `Wr` of timestep 1 in
/// `H^(7)`; the next layer shifts `Wr` one timestep right.
pub fn program_sgd_step(d: usize, w0: &[f64], alpha: f64, lambda: f64) -> Result<RawProgram> {
    if d == 0 || w0.len() != d {
        return Err(Error::InvalidArgument(format!("w0 must have length d = {d}, got {}", w0.len())));
    }
    check_finite("alpha", alpha)?;
    check_finite("lambda", lambda)?;
    for &w in w0 {
        check_finite("w0", w)?;
    }
    let rows = sgd_rows(d);
    let mut layers = vec![
        move_x(rows.x),
        LayerSpec::op(
            "wᵀx",
            RawOp::affine(
                Span::EMPTY,
                DenseMatrix::zeros(1, 0),
                rows.x,
                row_matrix(w0),
                Span::row(rows.p),
                TimestepMap::SelfToken,
            ),
        ),
    ];
    layers.extend(update_tail(&rows, d, alpha, lambda, Some(w0)));
    layers.extend(predict_tail(&rows));
    Ok(RawProgram::new(
        "sgd_step",
        rows.total,
        d + 1,
        3,
        layers,
        OutputCell {
            row: rows.out,
            column: ColumnRule::Last,
        },
    ))
}

/// One-pass SGD from `w₀ = 0` over `n` examples, predicting `w_nᵀx_query`.
///
/// After the shared prologue, block `k` runs at timestep `2k−1` (the `y_k`
/// token): it fetches `w_{k−1}` from timestep `2k−3` (block 1 writes `w₀`
/// instead), then applies the same five update layers. The rows are reused
/// by every block. Depth is `9 + 6(n−1)`; with `n = 1` the program equals
/// [`program_sgd_step`] at `w₀ = 0`.
pub fn program_sgd_multi_step(d: usize, n: usize, alpha: f64, lambda: f64) -> Result<RawProgram> {
    if n == 0 {
        return Err(Error::InvalidArgument("n_examples must be >= 1".into()));
    }
    let first = program_sgd_step(d, &vec![0.0; d], alpha, lambda)?;
    if n == 1 {
        let mut p = first;
        p.name = "sgd_multi_step".into();
        return Ok(p);
    }
    let rows = sgd_rows(d);
    // Prologue and block 1 come from the single-step program (all but its
    // final move and dot).
    let mut layers: Vec<LayerSpec> = first.layers[..first.layers.len() - 2].to_vec();
    for k in 2..=n {
        layers.push(LayerSpec::op(
            "fetch w",
            RawOp::mov(rows.wr, rows.wr, TimestepMap::FixedToken(2 * k - 3)),
        ));
        layers.push(LayerSpec::op(
            "wᵀx",
            RawOp::dot(rows.wr, rows.x, rows.p, TimestepMap::SelfToken),
        ));
        layers.extend(update_tail(&rows, d, alpha, lambda, None));
    }
    layers.extend(predict_tail(&rows));
    Ok(RawProgram::new(
        "sgd_multi_step",
        rows.total,
        d + 1,
        2 * n + 1,
        layers,
        OutputCell {
            row: rows.out,
            column: ColumnRule::Last,
        },
    ))
}

/// `out_i = Σ_j A_ij v_j` as `d` fused dot products over the row-major
/// matrix rows.
fn matvec_dots(a: Span, d: usize, v: Span, out: Span) -> Vec<RawOp> {
    (0..d)
        .map(|i| RawOp::dot(Span::at(a.start + i * d, d), v, out.start + i, TimestepMap::SelfToken))
        .collect()
}

/// `out_j = Σ_i v_i A_ij`: each dot reads column `j` through `W_a`.
fn vecmat_dots(v: Span, a: Span, d: usize, out: Span) -> Vec<RawOp> {
    (0..d)
        .map(|j| {
            let mut select = DenseMatrix::zeros(d, d * d);
            for i in 0..d {
                select[(i, i * d + j)] = 1.0;
            }
            RawOp::product(
                a,
                select,
                v,
                DenseMatrix::identity(d),
                Span::row(out.start + j),
                DenseMatrix::from_vec(1, d, vec![1.0; d]).expect("finite"),
                TimestepMap::SelfToken,
            )
        })
        .collect()
}

/// Fourteen layers predicting with `w′ = (λI + x₁x₁ᵀ)⁻¹x₁y₁`, obtained from
/// `A₀⁻¹ = I/λ` by one Sherman–Morrison update
/// `A₁⁻¹ = A₀⁻¹ − A₀⁻¹x xᵀA₀⁻¹ / (1 + xᵀA₀⁻¹x)`.
///
/// The denominator is at least 1 for any `x`. `λ` below the division floor
/// `c_min` is rejected because `A₀⁻¹` entries then leave the range the
/// product layers are calibrated for.
pub fn program_sherman_morrison(d: usize, lambda: f64) -> Result<RawProgram> {
    if d == 0 {
        return Err(Error::InvalidArgument("d must be >= 1".into()));
    }
    check_finite("lambda", lambda)?;
    let floor = super::layout::Constants::default().c_min;
    if !(lambda >= floor) {
        return Err(crate::error::CompileError::BelowDivisionFloor { lambda, floor }.into());
    }
    let rows = sherman_morrison_rows(d);
    let dd = d * d;
    let mut a0 = vec![0.0; dd];
    for i in 0..d {
        a0[i * d + i] = 1.0 / lambda;
    }
    // Outer product: OUTER_ij = AU_i · VA_j.
    let mut rep_rows = DenseMatrix::zeros(dd, d);
    let mut rep_cols = DenseMatrix::zeros(dd, d);
    for i in 0..d {
        for j in 0..d {
            rep_rows[(i * d + j, i)] = 1.0;
            rep_cols[(i * d + j, j)] = 1.0;
        }
    }
    let layers = vec![
        move_x(rows.x),
        LayerSpec::op(
            "x·y",
            RawOp::product(
                Span::row(0),
                ones_column(d),
                rows.x,
                DenseMatrix::identity(d),
                rows.xy,
                DenseMatrix::identity(d),
                TimestepMap::SelfToken,
            ),
        ),
        LayerSpec::op("A₀⁻¹ = I/λ", RawOp::constant(rows.ainv, a0)),
        LayerSpec::fused("A₀⁻¹x", matvec_dots(rows.ainv, d, rows.x, rows.au)),
        LayerSpec::fused("xᵀA₀⁻¹", vecmat_dots(rows.x, rows.ainv, d, rows.va)),
        LayerSpec::op(
            "A₀⁻¹x xᵀA₀⁻¹",
            RawOp::product(
                rows.au,
                rep_rows,
                rows.va,
                rep_cols,
                rows.outer,
                DenseMatrix::identity(dd),
                TimestepMap::SelfToken,
            ),
        ),
        LayerSpec::op("xᵀA₀⁻¹x", RawOp::dot(rows.va, rows.x, rows.den, TimestepMap::SelfToken)),
        LayerSpec::op(
            "1 + xᵀA₀⁻¹x",
            RawOp::affine(
                Span::row(rows.den),
                DenseMatrix::identity(1),
                Span::EMPTY,
                DenseMatrix::zeros(1, 0),
                Span::row(rows.den),
                TimestepMap::SelfToken,
            )
            .with_b_o(vec![1.0]),
        ),
        LayerSpec::divide(
            "right term",
            super::raw::DivOp {
                numerator: rows.outer,
                denominator: rows.den,
                write: rows.right,
            },
        ),
        LayerSpec::op(
            "A₁⁻¹",
            RawOp::affine(
                rows.right,
                scaled_identity(dd, -1.0),
                rows.ainv,
                DenseMatrix::identity(dd),
                rows.ainv,
                TimestepMap::SelfToken,
            ),
        ),
        LayerSpec::fused("A₁⁻¹x", matvec_dots(rows.ainv, d, rows.x, rows.wv)),
        LayerSpec::op(
            "A₁⁻¹x·y",
            RawOp::product(
                Span::row(0),
                ones_column(d),
                rows.wv,
                DenseMatrix::identity(d),
                rows.wv,
                DenseMatrix::identity(d),
                TimestepMap::SelfToken,
            ),
        ),
        LayerSpec::op("move w′", RawOp::mov(rows.wv, rows.wv, TimestepMap::PreviousToken)),
        LayerSpec::op("w′ᵀx", RawOp::dot(rows.wv, rows.x, rows.out, TimestepMap::SelfToken)),
    ];
    Ok(RawProgram::new(
        "sherman_morrison",
        rows.total,
        d + 1,
        3,
        layers,
        OutputCell {
            row: rows.out,
            column: ColumnRule::Last,
        },
    ))
}
