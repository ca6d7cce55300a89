use crate::error::{Error, Result};
use crate::numerics::{gelu, normalize_with, population_variance, softmax, DenseMatrix, LAYER_NORM_MIN_VARIANCE};

use super::params::{LayerParams, ResidualMode, TransformerParams};

/// Hidden states `H^(0) ..= H^(L)`, each `hidden × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace {
    pub layers: Vec<DenseMatrix>,
}

impl HiddenTrace {
    pub fn input(&self) -> &DenseMatrix {
        &self.layers[0]
    }

    pub fn output(&self) -> &DenseMatrix {
        self.layers.last().expect("trace holds at least H^(0)")
    }

    pub fn layer(&self, l: usize) -> &DenseMatrix {
        &self.layers[l]
    }
}

/// Compressed-row copy of a weight matrix; compiled weights are mostly zero.
#[derive(Clone, Debug)]
struct Csr {
    rows: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    fn from_dense(m: &DenseMatrix) -> Self {
        Self::from_dense_cols(m, 0, m.cols())
    }

    /// Columns `c0..c1` of `m`, re-indexed from 0.
    fn from_dense_cols(m: &DenseMatrix, c0: usize, c1: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(m.rows() + 1);
        let mut col = Vec::new();
        let mut val = Vec::new();
        row_ptr.push(0);
        for i in 0..m.rows() {
            for (j, &v) in m.row(i)[c0..c1].iter().enumerate() {
                if v != 0.0 {
                    col.push(j);
                    val.push(v);
                }
            }
            row_ptr.push(col.len());
        }
        Self {
            rows: m.rows(),
            row_ptr,
            col,
            val,
        }
    }

    fn is_zero(&self) -> bool {
        self.val.is_empty()
    }

    /// `out += self · x` for `x` stored as a list of columns.
    fn mul_cols_into(&self, x: &[Vec<f64>], out: &mut [Vec<f64>]) {
        for (xc, oc) in x.iter().zip(out.iter_mut()) {
            self.mul_vec_into(xc, oc);
        }
    }

    fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.rows {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.val[k] * x[self.col[k]];
            }
            out[i] += acc;
        }
    }
}

#[derive(Clone, Debug)]
struct PreparedHead {
    q: Csr,
    k: Csr,
    v: Csr,
    /// Block of `W_F` acting on this head's output.
    f: Csr,
}

#[derive(Clone, Debug)]
struct PreparedLayer {
    heads: Vec<PreparedHead>,
    w_1: Csr,
    b_1: Vec<f64>,
    w_2: Csr,
    b_2: Vec<f64>,
    layer_norm: bool,
    imaginary: bool,
}

/// Validated parameters with sparse copies of every weight matrix, for
/// running many sequences through the same weights.
#[derive(Clone, Debug)]
pub struct Model {
    params: TransformerParams,
    embedding: Csr,
    layers: Vec<PreparedLayer>,
}

impl Model {
    pub fn new(params: TransformerParams) -> Result<Self> {
        params.validate()?;
        let h = params.hidden;
        let layers = params
            .layers
            .iter()
            .map(|l| prepare_layer(l, h))
            .collect();
        Ok(Self {
            embedding: Csr::from_dense(&params.embedding),
            layers,
            params,
        })
    }

    pub fn params(&self) -> &TransformerParams {
        &self.params
    }

    pub fn forward(&self, tokens: &DenseMatrix) -> Result<HiddenTrace> {
        let p = &self.params;
        if tokens.rows() != p.tokens_dim {
            return Err(Error::Dimension {
                context: "forward",
                expected: format!("{} token rows", p.tokens_dim),
                got: format!("{}", tokens.rows()),
            });
        }
        let t = tokens.cols();
        if t > p.max_tokens() {
            return Err(Error::SequenceTooLong {
                tokens: t,
                positions: p.max_tokens(),
            });
        }
        let h = p.hidden;

        let mut cols: Vec<Vec<f64>> = (0..t).map(|i| p.positions.row(i).to_vec()).collect();
        let token_cols: Vec<Vec<f64>> = (0..t).map(|i| tokens.column(i)).collect();
        self.embedding.mul_cols_into(&token_cols, &mut cols);
        check_columns(&cols, 0)?;

        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(columns_to_matrix(&cols, h));
        for (l, layer) in self.layers.iter().enumerate() {
            cols = apply_layer(layer, &cols, h, l + 1, p.residual_mode)?;
            trace.push(columns_to_matrix(&cols, h));
        }
        Ok(HiddenTrace { layers: trace })
    }
}

/// One-shot convenience over [`Model`].
pub fn forward(params: &TransformerParams, tokens: &DenseMatrix) -> Result<HiddenTrace> {
    Model::new(params.clone())?.forward(tokens)
}

fn prepare_layer(l: &LayerParams, h: usize) -> PreparedLayer {
    PreparedLayer {
        heads: l
            .heads
            .iter()
            .enumerate()
            .map(|(j, hp)| PreparedHead {
                q: Csr::from_dense(&hp.w_q),
                k: Csr::from_dense(&hp.w_k),
                v: Csr::from_dense(&hp.w_v),
                f: Csr::from_dense_cols(&l.w_f, j * h, (j + 1) * h),
            })
            .collect(),
        w_1: Csr::from_dense(&l.w_1),
        b_1: l.b_1.clone(),
        w_2: Csr::from_dense(&l.w_2),
        b_2: l.b_2.clone(),
        layer_norm: l.layer_norm,
        imaginary: l.imaginary_timestep,
    }
}

fn apply_layer(
    layer: &PreparedLayer,
    hcols: &[Vec<f64>],
    h: usize,
    layer_no: usize,
    mode: ResidualMode,
) -> Result<Vec<Vec<f64>>> {
    let t = hcols.len();
    let mut attn: Vec<Vec<f64>> = vec![vec![0.0; h]; t];

    for head in &layer.heads {
        if head.f.is_zero() {
            continue;
        }
        let mut q = vec![vec![0.0; h]; t];
        let mut k = vec![vec![0.0; h]; t];
        let mut v = vec![vec![0.0; h]; t];
        head.q.mul_cols_into(hcols, &mut q);
        head.k.mul_cols_into(hcols, &mut k);
        head.v.mul_cols_into(hcols, &mut v);

        let mut logits = Vec::with_capacity(t + 1);
        let mut b = vec![0.0; h];
        for i in 0..t {
            logits.clear();
            if layer.imaginary {
                logits.push(0.0);
            }
            for kj in k.iter().take(i + 1) {
                logits.push(q[i].iter().zip(kj).map(|(a, b)| a * b).sum());
            }
            let alpha = softmax(&logits);
            let offset = usize::from(layer.imaginary);
            b.iter_mut().for_each(|x| *x = 0.0);
            for (j, vj) in v.iter().take(i + 1).enumerate() {
                let w = alpha[j + offset];
                if w == 0.0 {
                    continue;
                }
                for (bx, vx) in b.iter_mut().zip(vj) {
                    *bx += w * vx;
                }
            }
            head.f.mul_vec_into(&b, &mut attn[i]);
        }
    }

    let mut out = Vec::with_capacity(t);
    let width = layer.b_2.len();
    for (i, (a, hc)) in attn.iter().zip(hcols).enumerate() {
        let resid: Vec<f64> = a.iter().zip(hc).map(|(x, y)| x + y).collect();
        let mut next = resid.clone();
        if !layer.w_1.is_zero() {
            let src = match mode {
                ResidualMode::Literal => &resid,
                ResidualMode::AttentionOnly => a,
            };
            let normed = if layer.layer_norm {
                let var = population_variance(src);
                if !(var >= LAYER_NORM_MIN_VARIANCE) {
                    return Err(Error::DegenerateLayerNorm {
                        variance: var,
                        layer: layer_no,
                        timestep: i,
                    });
                }
                normalize_with(src, var)
            } else {
                src.clone()
            };
            let mut pre = layer.b_2.clone();
            layer.w_2.mul_vec_into(&normed, &mut pre);
            let act: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
            debug_assert_eq!(act.len(), width);
            layer.w_1.mul_vec_into(&act, &mut next);
        }
        for (x, b) in next.iter_mut().zip(&layer.b_1) {
            *x += b;
        }
        out.push(next);
    }
    check_columns(&out, layer_no)?;
    Ok(out)
}

fn check_columns(cols: &[Vec<f64>], layer: usize) -> Result<()> {
    for (timestep, c) in cols.iter().enumerate() {
        if let Some(row) = c.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteHidden { layer, timestep, row });
        }
    }
    Ok(())
}

fn columns_to_matrix(cols: &[Vec<f64>], h: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(h, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}
