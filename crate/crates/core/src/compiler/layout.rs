use serde::{Deserialize, Serialize};

use crate::error::CompileError;
use crate::numerics::DenseMatrix;

/// Scale constants of the compiled layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Constants {
    /// Offset that makes GeLU act as the identity: `GeLU(N + x) − N ≈ x`.
    pub gelu_bypass_n: f64,
    /// Magnitude of the `±N` rows that swamp the layer-norm variance.
    pub ln_bypass_n: f64,
    /// Multiplication operands are divided by this before the GeLU product
    /// identity and the result is scaled back by its square.
    pub n_mul: f64,
    /// Division layer: `N` multiplies the denominator row.
    pub div_n: f64,
    /// Division layer: numerators are divided by `M` before normalization.
    pub div_m: f64,
    /// Step of the finite-difference tanh product scheme.
    pub delta: f64,
    /// Attention logit scale; `e^{-N}` must underflow to zero.
    pub attention_n: f64,
    /// Smallest denominator the division layer is accurate for.
    pub c_min: f64,
    /// Largest `|operand| / n_mul` fed to the product identity.
    pub mul_domain: f64,
    pub imaginary_timestep: bool,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            gelu_bypass_n: 30.0,
            ln_bypass_n: 1e4,
            n_mul: 1e3,
            div_n: 1e4,
            div_m: 1e2,
            delta: 1e-3,
            attention_n: 1000.0,
            c_min: 0.5,
            mul_domain: 0.1,
            imaginary_timestep: true,
        }
    }
}

/// Row map of a compiled hidden vector.
///
/// ```text
/// [0, P)                  program rows (rows 0..tokens_dim hold the token)
/// [P, H-4-T)              layer scratch: operand copies for products/division
/// H-4-T, H-3-T            bp = +N, bn = -N  (layer-norm bypass)
/// H-2-T                   bs = -(sum of every other row), keeps the mean at 0
/// H-1-T                   constant 1
/// [H-T, H)                one-hot position
/// ```
///
/// Scratch and the three bypass rows are rewritten by every layer and carry
/// no state between layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub hidden: usize,
    pub program_rows: usize,
    pub t_max: usize,
}

impl Layout {
    pub const RESERVED: usize = 4;

    pub fn new(hidden: usize, program_rows: usize, t_max: usize) -> Result<Self, CompileError> {
        let needed = program_rows + Self::RESERVED + t_max;
        if needed > hidden {
            return Err(CompileError::ScratchOverflow { needed, available: hidden });
        }
        Ok(Self {
            hidden,
            program_rows,
            t_max,
        })
    }

    /// Hidden size with exactly `scratch` scratch rows.
    pub fn hidden_for(program_rows: usize, scratch: usize, t_max: usize) -> usize {
        program_rows + scratch + Self::RESERVED + t_max
    }

    pub fn scratch_start(&self) -> usize {
        self.program_rows
    }

    pub fn scratch_len(&self) -> usize {
        self.bp() - self.program_rows
    }

    pub fn bp(&self) -> usize {
        self.hidden - self.t_max - 4
    }

    pub fn bn(&self) -> usize {
        self.hidden - self.t_max - 3
    }

    pub fn bs(&self) -> usize {
        self.hidden - self.t_max - 2
    }

    pub fn one(&self) -> usize {
        self.hidden - self.t_max - 1
    }

    pub fn pos(&self, t: usize) -> usize {
        self.hidden - self.t_max + t
    }

    /// Rows every layer resets: scratch plus the three bypass rows.
    pub fn transient_rows(&self) -> std::ops::Range<usize> {
        self.program_rows..self.one()
    }

    /// `T_max × H`: the constant-1 row plus a one-hot block.
    pub fn position_embeddings(&self) -> DenseMatrix {
        let mut p = DenseMatrix::zeros(self.t_max, self.hidden);
        for t in 0..self.t_max {
            p[(t, self.one())] = 1.0;
            p[(t, self.pos(t))] = 1.0;
        }
        p
    }

    /// Copies token row `k` into hidden row `k`.
    pub fn embedding(&self, tokens_dim: usize) -> DenseMatrix {
        let mut e = DenseMatrix::zeros(self.hidden, tokens_dim);
        for k in 0..tokens_dim {
            e[(k, k)] = 1.0;
        }
        e
    }
}
