use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
}

impl HeadParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w_q: DenseMatrix::zeros(hidden, hidden),
            w_k: DenseMatrix::zeros(hidden, hidden),
            w_v: DenseMatrix::zeros(hidden, hidden),
        }
    }
}

/// One block: multi-head causal attention followed by the MLP
/// `h' = W_1 σ(W_2 λ(a + h) + b_2) + b_1 + a + h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// `H × (m·H)`, applied to the stacked head outputs.
    pub w_f: DenseMatrix,
    /// `H × M`
    pub w_1: DenseMatrix,
    pub b_1: Vec<f64>,
    /// `M × H`
    pub w_2: DenseMatrix,
    pub b_2: Vec<f64>,
    pub layer_norm: bool,
    pub imaginary_timestep: bool,
}

impl LayerParams {
    pub fn zeros(hidden: usize, heads: usize, mlp_width: usize) -> Self {
        Self {
            heads: (0..heads).map(|_| HeadParams::zeros(hidden)).collect(),
            w_f: DenseMatrix::zeros(hidden, heads * hidden),
            w_1: DenseMatrix::zeros(hidden, mlp_width),
            b_1: vec![0.0; hidden],
            w_2: DenseMatrix::zeros(mlp_width, hidden),
            b_2: vec![0.0; mlp_width],
            layer_norm: true,
            imaginary_timestep: true,
        }
    }

    pub fn mlp_width(&self) -> usize {
        self.w_2.rows()
    }

    pub fn validate(&self, hidden: usize, layer: usize) -> Result<()> {
        let m = self.heads.len();
        let bad = |what: &str, expected: String, got: String| Error::Dimension {
            context: "LayerParams::validate",
            expected: format!("layer {layer} {what} {expected}"),
            got,
        };
        let shape = |m: &DenseMatrix| format!("{}x{}", m.rows(), m.cols());
        if m == 0 {
            return Err(bad("heads", ">= 1".into(), "0".into()));
        }
        for (j, h) in self.heads.iter().enumerate() {
            for (name, w) in [("w_q", &h.w_q), ("w_k", &h.w_k), ("w_v", &h.w_v)] {
                if w.shape() != (hidden, hidden) {
                    return Err(bad(&format!("head {j} {name}"), format!("{hidden}x{hidden}"), shape(w)));
                }
            }
        }
        if self.w_f.shape() != (hidden, m * hidden) {
            return Err(bad("w_f", format!("{hidden}x{}", m * hidden), shape(&self.w_f)));
        }
        let width = self.w_2.rows();
        if self.w_2.cols() != hidden {
            return Err(bad("w_2", format!("Mx{hidden}"), shape(&self.w_2)));
        }
        if self.w_1.shape() != (hidden, width) {
            return Err(bad("w_1", format!("{hidden}x{width}"), shape(&self.w_1)));
        }
        if self.b_1.len() != hidden {
            return Err(bad("b_1", format!("length {hidden}"), self.b_1.len().to_string()));
        }
        if self.b_2.len() != width {
            return Err(bad("b_2", format!("length {width}"), self.b_2.len().to_string()));
        }
        if !self.b_1.iter().chain(&self.b_2).all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("layer {layer} biases"),
            });
        }
        Ok(())
    }
}

/// Which vector feeds the MLP's layer norm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `λ(a + h)`, with `a + h` also added after the MLP.
    #[default]
    Literal,
    /// `λ(a)`; the residual `a + h` is still added after the MLP.
    AttentionOnly,
}

/// Full model. JSON layout (all matrices are nested row-major arrays):
///
/// ```text
/// { "hidden": H, "depth": L, "heads": m, "tokens_dim": D,
///   "residual_mode": "literal" | "attention_only",
///   "embedding": H x D, "positions": T_max x H,
///   "layers": [ { "heads": [ { "w_q", "w_k", "w_v" } ], "w_f",
///                 "w_1", "b_1", "w_2", "b_2",
///                 "layer_norm": bool, "imaginary_timestep": bool } ] }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsDoc", into = "ParamsDoc")]
pub struct TransformerParams {
    pub hidden: usize,
    pub tokens_dim: usize,
    /// `W_e`, `hidden × tokens_dim`.
    pub embedding: DenseMatrix,
    /// Row `i` is the position embedding of timestep `i`.
    pub positions: DenseMatrix,
    pub layers: Vec<LayerParams>,
    pub residual_mode: ResidualMode,
}

impl TransformerParams {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.layers.first().map_or(1, |l| l.heads.len())
    }

    pub fn max_tokens(&self) -> usize {
        self.positions.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden;
        if self.embedding.shape() != (h, self.tokens_dim) {
            return Err(Error::Dimension {
                context: "TransformerParams::validate",
                expected: format!("embedding {h}x{}", self.tokens_dim),
                got: format!("{}x{}", self.embedding.rows(), self.embedding.cols()),
            });
        }
        if self.positions.cols() != h {
            return Err(Error::Dimension {
                context: "TransformerParams::validate",
                expected: format!("positions Tx{h}"),
                got: format!("{}x{}", self.positions.rows(), self.positions.cols()),
            });
        }
        let m = self.heads();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate(h, l)?;
            if layer.heads.len() != m {
                return Err(Error::Dimension {
                    context: "TransformerParams::validate",
                    expected: format!("{m} heads in every layer"),
                    got: format!("{} in layer {l}", layer.heads.len()),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    hidden: usize,
    depth: usize,
    heads: usize,
    tokens_dim: usize,
    #[serde(default)]
    residual_mode: ResidualMode,
    embedding: DenseMatrix,
    positions: DenseMatrix,
    layers: Vec<LayerParams>,
}

impl From<TransformerParams> for ParamsDoc {
    fn from(p: TransformerParams) -> Self {
        Self {
            hidden: p.hidden,
            depth: p.depth(),
            heads: p.heads(),
            tokens_dim: p.tokens_dim,
            residual_mode: p.residual_mode,
            embedding: p.embedding,
            positions: p.positions,
            layers: p.layers,
        }
    }
}

impl TryFrom<ParamsDoc> for TransformerParams {
    type Error = Error;

    fn try_from(doc: ParamsDoc) -> Result<Self> {
        if doc.depth != doc.layers.len() {
            return Err(Error::Config(format!(
                "depth {} does not match {} layers",
                doc.depth,
                doc.layers.len()
            )));
        }
        if doc.layers.iter().any(|l| l.heads.len() != doc.heads) {
            return Err(Error::Config(format!("every layer must have {} heads", doc.heads)));
        }
        let p = TransformerParams {
            hidden: doc.hidden,
            tokens_dim: doc.tokens_dim,
            embedding: doc.embedding,
            positions: doc.positions,
            layers: doc.layers,
            residual_mode: doc.residual_mode,
        };
        p.validate()?;
        Ok(p)
    }
}
