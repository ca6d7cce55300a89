use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CompileError, Error, Result};
use crate::numerics::DenseMatrix;
use crate::transformer::{encode_task, HiddenTrace, Model, ResidualMode, TransformerParams};

use super::layout::{Constants, Layout};
use super::lower::{compile_layer, scratch_needed, LoweredLayer};
use super::raw::{apply_div, apply_ops, DivOp, RawOp};

pub const FORMAT_VERSION: u32 = 1;

/// Ops sharing one transformer layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub ops: Vec<RawOp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub div: Option<DivOp>,
}

impl LayerSpec {
    pub fn op(label: &str, op: RawOp) -> Self {
        Self::fused(label, vec![op])
    }

    pub fn fused(label: &str, ops: Vec<RawOp>) -> Self {
        Self {
            label: Some(label.to_string()),
            ops,
            div: None,
        }
    }

    pub fn divide(label: &str, div: DivOp) -> Self {
        Self {
            label: Some(label.to_string()),
            ops: Vec::new(),
            div: Some(div),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum ColumnRule {
    Last,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputCell {
    pub row: usize,
    pub column: ColumnRule,
}

impl OutputCell {
    pub fn column_index(&self, t: usize) -> usize {
        match self.column {
            ColumnRule::Last => t - 1,
            ColumnRule::Fixed(c) => c,
        }
    }
}

/// An ordered list of RAW layers over a fixed hidden layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawProgram {
    pub format: u32,
    #[serde(default)]
    pub name: String,
    pub hidden: usize,
    pub program_rows: usize,
    pub tokens_dim: usize,
    pub t_max: usize,
    #[serde(default)]
    pub constants: Constants,
    pub layers: Vec<LayerSpec>,
    pub output: OutputCell,
}

impl RawProgram {
    /// Program with the smallest hidden size its layers fit in.
    pub fn new(
        name: &str,
        program_rows: usize,
        tokens_dim: usize,
        t_max: usize,
        layers: Vec<LayerSpec>,
        output: OutputCell,
    ) -> Self {
        let mut p = Self {
            format: FORMAT_VERSION,
            name: name.to_string(),
            hidden: 0,
            program_rows,
            tokens_dim,
            t_max,
            constants: Constants::default(),
            layers,
            output,
        };
        p.hidden = p.required_hidden();
        p
    }

    pub fn required_hidden(&self) -> usize {
        let scratch = self
            .layers
            .iter()
            .map(|l| scratch_needed(&l.ops, l.div.as_ref()))
            .max()
            .unwrap_or(0);
        Layout::hidden_for(self.program_rows, scratch, self.t_max)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layout(&self) -> std::result::Result<Layout, CompileError> {
        Layout::new(self.hidden, self.program_rows, self.t_max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: RawProgram = serde_json::from_str(s)?;
        if p.format != FORMAT_VERSION {
            return Err(CompileError::Format(p.format).into());
        }
        Ok(p)
    }

    /// Exact RAW semantics on the program rows: `H^(0) .. H^(L)` restricted
    /// to rows `[0, program_rows)`.
    pub fn evaluate(&self, tokens: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        let mut h = DenseMatrix::zeros(self.program_rows, tokens.cols());
        h.set_block(0, 0, tokens);
        let mut out = vec![h.clone()];
        for layer in &self.layers {
            let mut next = apply_ops(&layer.ops, &h)?;
            if let Some(div) = &layer.div {
                let quotients = apply_div(div, &h)?;
                for row in div.write.rows() {
                    next.row_mut(row).copy_from_slice(quotients.row(row));
                }
            }
            h = next;
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn compile(&self) -> Result<CompiledProgram> {
        if self.format != FORMAT_VERSION {
            return Err(CompileError::Format(self.format).into());
        }
        let layout = self.layout()?;
        if self.tokens_dim > self.program_rows {
            return Err(CompileError::InvalidProgram {
                layer: 0,
                reason: format!("{} token rows exceed {} program rows", self.tokens_dim, self.program_rows),
            }
            .into());
        }
        if self.output.row >= self.program_rows {
            return Err(CompileError::InvalidProgram {
                layer: self.layers.len(),
                reason: format!("output row {} is not a program row", self.output.row),
            }
            .into());
        }
        let mut lowered = Vec::with_capacity(self.layers.len());
        for (l, spec) in self.layers.iter().enumerate() {
            let layer = compile_layer(&spec.ops, spec.div.as_ref(), &layout, &self.constants).map_err(|e| {
                CompileError::InvalidProgram {
                    layer: l,
                    reason: e.to_string(),
                }
            })?;
            lowered.push(layer);
        }
        let params = TransformerParams {
            hidden: layout.hidden,
            tokens_dim: self.tokens_dim,
            embedding: layout.embedding(self.tokens_dim),
            positions: layout.position_embeddings(),
            layers: lowered.iter().map(|l| l.params.clone()).collect(),
            residual_mode: ResidualMode::Literal,
        };
        let model = Model::new(params)?;
        Ok(CompiledProgram {
            program: self.clone(),
            layout,
            lowered,
            model,
        })
    }
}

/// SHA-256 of the serialized weights, hex encoded.
pub fn params_hash(params: &TransformerParams) -> Result<String> {
    let json = params.to_json()?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Numerical caveats found while running a compiled program.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ExecutionReport {
    /// `(layer, timestep, denominator)` for divisions below `c_min`.
    pub division_floor: Vec<(usize, usize, f64)>,
    /// `(layer, timestep, row, value)` for product operands beyond
    /// `mul_domain · n_mul`.
    pub mul_domain: Vec<(usize, usize, usize, f64)>,
}

impl ExecutionReport {
    pub fn is_clean(&self) -> bool {
        self.division_floor.is_empty() && self.mul_domain.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Execution {
    pub trace: HiddenTrace,
    pub output: f64,
    pub report: ExecutionReport,
}

#[derive(Clone, Debug)]
pub struct CompiledProgram {
    pub program: RawProgram,
    pub layout: Layout,
    lowered: Vec<LoweredLayer>,
    model: Model,
}

impl CompiledProgram {
    pub fn params(&self) -> &TransformerParams {
        self.model.params()
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn depth(&self) -> usize {
        self.lowered.len()
    }

    pub fn params_hash(&self) -> Result<String> {
        params_hash(self.params())
    }

    pub fn run_tokens(&self, tokens: &DenseMatrix) -> Result<Execution> {
        let trace = self.model.forward(tokens)?;
        let t = tokens.cols();
        let col = self.program.output.column_index(t);
        if col >= t {
            return Err(Error::InvalidArgument(format!("output column {col} beyond {t} tokens")));
        }
        let output = trace.output()[(self.program.output.row, col)];
        let report = self.report(&trace);
        Ok(Execution { trace, output, report })
    }

    pub fn run(&self, x: &DenseMatrix, y: &[f64], query: &[f64]) -> Result<Execution> {
        self.run_tokens(&encode_task(x, y, query)?)
    }

    fn report(&self, trace: &HiddenTrace) -> ExecutionReport {
        let c = &self.program.constants;
        let mut report = ExecutionReport::default();
        let limit = c.mul_domain * c.n_mul;
        for (l, (spec, lowered)) in self.program.layers.iter().zip(&self.lowered).enumerate() {
            let before = trace.layer(l);
            let after = trace.layer(l + 1);
            if let Some(div) = &spec.div {
                for t in 0..before.cols() {
                    let den = before[(div.denominator, t)];
                    if den.abs() < c.c_min {
                        report.division_floor.push((l + 1, t, den));
                    }
                }
            }
            for &row in &lowered.operand_rows {
                for t in 0..after.cols() {
                    let v = after[(row, t)];
                    if v.abs() > limit {
                        report.mul_domain.push((l + 1, t, row, v));
                    }
                }
            }
        }
        report
    }
}
