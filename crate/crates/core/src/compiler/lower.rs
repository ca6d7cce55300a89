//! Lowering of RAW ops to transformer layers.
//!
//! Every layer has two heads with `W^V = I`: head 0 attends according to the
//! op's timestep map, head 1 attends to the current token. All arithmetic of
//! the attention stage lives in `W^F = [F_read | F_self]`, so each hidden row
//! of `a + h` is an exact linear function of the read and current columns.
//!
//! * Add ops are finished in the attention stage: `a[w]` is set so that
//!   `(a + h)[w]` equals the op's result, and the MLP is untouched.
//! * Mul ops place both operands in scratch rows, switch the `±N` bypass rows
//!   on, and let the MLP evaluate `√(π/2)(G(u+v) − G(u) − G(v))` on the
//!   normalized, down-scaled operands.
//! * Division places `num/M` in scratch and `±N·c` in the bypass rows, so
//!   layer norm itself performs the division; the MLP passes the result
//!   through the GeLU bypass.
//!
//! The `bs` row is set to minus the sum of every other row of `a + h`, which
//! keeps the layer-norm mean exactly zero in exact arithmetic.

use std::f64::consts::PI;

use crate::error::CompileError;
use crate::numerics::DenseMatrix;
use crate::transformer::{HeadParams, LayerParams};

use super::layout::{Constants, Layout};
use super::raw::{DivOp, OpKind, RawOp, Span, TimestepMap};

/// A compiled layer plus the scratch rows holding its product operands.
#[derive(Clone, Debug)]
pub struct LoweredLayer {
    pub params: LayerParams,
    /// Scratch rows that hold multiplication operands after the layer.
    pub operand_rows: Vec<usize>,
    /// Scratch row holding `numerator / M` for each written row, if dividing.
    pub quotient_rows: Vec<usize>,
}

/// Scratch rows a layer needs.
pub fn scratch_needed(ops: &[RawOp], div: Option<&DivOp>) -> usize {
    let products: usize = ops
        .iter()
        .filter(|op| op.kind == OpKind::Mul)
        .map(|op| 2 * op.inner())
        .sum();
    products + div.map_or(0, |d| d.numerator.len())
}

struct Builder<'a> {
    layout: &'a Layout,
    h: usize,
    /// `H × 2H`: columns `[0, H)` act on the read head, `[H, 2H)` on self.
    f: DenseMatrix,
    w1: Vec<(usize, usize, f64)>,
    w2: Vec<(usize, usize, f64)>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    next_scratch: usize,
    operand_rows: Vec<usize>,
    quotient_rows: Vec<usize>,
}

impl<'a> Builder<'a> {
    fn new(layout: &'a Layout) -> Self {
        let h = layout.hidden;
        let mut f = DenseMatrix::zeros(h, 2 * h);
        for j in layout.transient_rows() {
            f[(j, h + j)] = -1.0;
        }
        Self {
            layout,
            h,
            f,
            w1: Vec::new(),
            w2: Vec::new(),
            b1: vec![0.0; h],
            b2: Vec::new(),
            next_scratch: layout.scratch_start(),
            operand_rows: Vec::new(),
            quotient_rows: Vec::new(),
        }
    }

    fn read(&mut self, row: usize, col: usize, v: f64) {
        self.f[(row, col)] += v;
    }

    fn own(&mut self, row: usize, col: usize, v: f64) {
        self.f[(row, self.h + col)] += v;
    }

    fn scratch(&mut self, n: usize) -> Result<Span, CompileError> {
        let span = Span::at(self.next_scratch, n);
        if span.end > self.layout.bp() {
            return Err(CompileError::ScratchOverflow {
                needed: Layout::hidden_for(
                    self.layout.program_rows,
                    span.end - self.layout.scratch_start(),
                    self.layout.t_max,
                ),
                available: self.layout.hidden,
            });
        }
        self.next_scratch = span.end;
        Ok(span)
    }

    fn unit(&mut self, bias: f64) -> usize {
        self.b2.push(bias);
        self.b2.len() - 1
    }

    /// `(a + h)[w] = 0`.
    fn clear(&mut self, w: Span) {
        for row in w.rows() {
            self.own(row, row, -1.0);
        }
    }

    fn add_op(&mut self, op: &RawOp) {
        let one = self.layout.one();
        let wo_wa = op.w_o.matmul(&op.w_a).expect("validated shapes");
        let wo_w = op.w_o.matmul(&op.w).expect("validated shapes");
        for (i, row) in op.write.rows().enumerate() {
            for (j, col) in op.read.rows().enumerate() {
                self.read(row, col, wo_wa[(i, j)]);
            }
            for (j, col) in op.operand.rows().enumerate() {
                self.own(row, col, wo_w[(i, j)]);
            }
        }
        let mut bias = vec![0.0; op.inner()];
        for src in [&op.b_a, &op.b].into_iter().flatten() {
            for (x, y) in bias.iter_mut().zip(src) {
                *x += y;
            }
        }
        let mut out_bias = op.w_o.matvec(&bias).expect("validated shapes");
        if let Some(b_o) = &op.b_o {
            for (x, y) in out_bias.iter_mut().zip(b_o) {
                *x += y;
            }
        }
        for (row, b) in op.write.rows().zip(out_bias) {
            self.own(row, one, b);
        }
        self.clear(op.write);
    }

    fn mul_op(&mut self, op: &RawOp, c: &Constants) -> Result<(), CompileError> {
        let one = self.layout.one();
        let inner = op.inner();
        let t = self.scratch(inner)?;
        let t2 = self.scratch(inner)?;
        for k in 0..inner {
            for (j, col) in op.read.rows().enumerate() {
                self.read(t.start + k, col, op.w_a[(k, j)]);
            }
            for (j, col) in op.operand.rows().enumerate() {
                self.own(t2.start + k, col, op.w[(k, j)]);
            }
            if let Some(b_a) = &op.b_a {
                self.own(t.start + k, one, b_a[k]);
            }
            if let Some(b) = &op.b {
                self.own(t2.start + k, one, b[k]);
            }
        }
        self.operand_rows.extend(t.rows());
        self.operand_rows.extend(t2.rows());
        self.clear(op.write);

        let scale_in = c.ln_bypass_n * (2.0 / self.h as f64).sqrt() / c.n_mul;
        let scale_out = c.n_mul * c.n_mul * (PI / 2.0).sqrt();
        for k in 0..inner {
            let (x, y) = (t.start + k, t2.start + k);
            let sum = self.unit(0.0);
            let left = self.unit(0.0);
            let right = self.unit(0.0);
            self.w2.extend([(sum, x, scale_in), (sum, y, scale_in), (left, x, scale_in), (right, y, scale_in)]);
            for (i, row) in op.write.rows().enumerate() {
                let g = op.w_o[(i, k)] * scale_out;
                if g != 0.0 {
                    self.w1.extend([(row, sum, g), (row, left, -g), (row, right, -g)]);
                }
            }
        }
        if let Some(b_o) = &op.b_o {
            for (row, b) in op.write.rows().zip(b_o) {
                self.b1[row] += b;
            }
        }
        Ok(())
    }

    fn div_op(&mut self, div: &DivOp, c: &Constants) -> Result<(), CompileError> {
        let t = self.scratch(div.numerator.len())?;
        let (bp, bn) = (self.layout.bp(), self.layout.bn());
        for (src, dst) in div.numerator.rows().zip(t.rows()) {
            self.own(dst, src, 1.0 / c.div_m);
        }
        self.own(bp, div.denominator, c.div_n);
        self.own(bn, div.denominator, -c.div_n);
        self.clear(div.write);
        self.quotient_rows.extend(t.rows());

        let scale_in = c.div_m * c.div_n * (2.0 / self.h as f64).sqrt();
        for (src, row) in t.rows().zip(div.write.rows()) {
            let u = self.unit(c.gelu_bypass_n);
            self.w2.push((u, src, scale_in));
            self.w1.push((row, u, 1.0));
            self.b1[row] -= c.gelu_bypass_n;
        }
        Ok(())
    }

    fn ln_bypass(&mut self, c: &Constants) {
        let (bp, bn, one) = (self.layout.bp(), self.layout.bn(), self.layout.one());
        self.own(bp, one, c.ln_bypass_n);
        self.own(bn, one, -c.ln_bypass_n);
    }

    fn balance(&mut self) {
        let (h, bs) = (self.h, self.layout.bs());
        for col in 0..2 * h {
            let mut s: f64 = (0..h).filter(|&k| k != bs).map(|k| self.f[(k, col)]).sum();
            if col >= h {
                s += 1.0;
            }
            self.f[(bs, col)] = -s;
        }
    }

    fn finish(self, map: TimestepMap, c: &Constants) -> Result<LoweredLayer, CompileError> {
        let (h, layout) = (self.h, self.layout);
        let width = self.b2.len();
        let mut w1 = DenseMatrix::zeros(h, width);
        for (r, u, v) in self.w1 {
            w1[(r, u)] += v;
        }
        let mut w2 = DenseMatrix::zeros(width, h);
        for (u, col, v) in self.w2 {
            w2[(u, col)] += v;
        }
        let read_head = attention_head(layout, map, c.attention_n)?;
        let self_head = attention_head(layout, TimestepMap::SelfToken, c.attention_n)?;
        Ok(LoweredLayer {
            params: LayerParams {
                heads: vec![read_head, self_head],
                w_f: self.f,
                w_1: w1,
                b_1: self.b1,
                w_2: w2,
                b_2: self.b2,
                layer_norm: true,
                imaginary_timestep: c.imaginary_timestep,
            },
            operand_rows: self.operand_rows,
            quotient_rows: self.quotient_rows,
        })
    }
}

/// Logit `q_i·k_j = 2N·[j ∈ K(i)] − N`; the imaginary timestep scores 0, so an
/// empty `K(i)` attends to nothing and a non-empty one is exactly one-hot.
fn attention_head(layout: &Layout, map: TimestepMap, n: f64) -> Result<HeadParams, CompileError> {
    let h = layout.hidden;
    let mut head = HeadParams::zeros(h);
    head.w_k[(layout.one(), layout.one())] = 1.0;
    head.w_q[(layout.one(), layout.one())] = -n;
    for p in 0..layout.t_max {
        head.w_k[(layout.pos(p), layout.pos(p))] = 1.0;
        if let Some(target) = map.target(p) {
            if target >= layout.t_max {
                return Err(CompileError::InvalidProgram {
                    layer: 0,
                    reason: format!("timestep map {map} points past T_max = {}", layout.t_max),
                });
            }
            head.w_q[(layout.pos(target), layout.pos(p))] = 2.0 * n;
        }
    }
    head.w_v = DenseMatrix::identity(h);
    Ok(head)
}

/// Checks `(r_i ∪ s_i ∪ w_i) ∩ w_j = ∅` for all `i ≠ j`.
pub fn check_independent(ops: &[RawOp], div: Option<&DivOp>) -> Result<(), CompileError> {
    let mut touched: Vec<Vec<Span>> = ops.iter().map(|o| vec![o.read, o.operand, o.write]).collect();
    let mut writes: Vec<Span> = ops.iter().map(|o| o.write).collect();
    if let Some(d) = div {
        touched.push(vec![d.numerator, Span::row(d.denominator), d.write]);
        writes.push(d.write);
    }
    let mut conflicts = Vec::new();
    for (i, spans) in touched.iter().enumerate() {
        for (j, w) in writes.iter().enumerate() {
            if i != j && spans.iter().any(|s| s.overlaps(w)) {
                let pair = (i.min(j), i.max(j));
                if !conflicts.contains(&pair) {
                    conflicts.push(pair);
                }
            }
        }
    }
    if conflicts.is_empty() {
        Ok(())
    } else {
        Err(CompileError::Overlap { conflicts })
    }
}

/// Lowers a bundle of independent ops (plus an optional division) into one
/// layer. Ops that read through attention must share their timestep map.
pub fn compile_layer(
    ops: &[RawOp],
    div: Option<&DivOp>,
    layout: &Layout,
    c: &Constants,
) -> Result<LoweredLayer, CompileError> {
    for (i, op) in ops.iter().enumerate() {
        op.validate(i, layout.program_rows)?;
    }
    if let Some(d) = div {
        let limit = layout.program_rows;
        for (name, s) in [("numerator", d.numerator), ("denominator", Span::row(d.denominator)), ("write", d.write)] {
            if s.end > limit {
                return Err(CompileError::RangeOverflow {
                    op: ops.len(),
                    range: name,
                    start: s.start,
                    end: s.end,
                    limit,
                });
            }
        }
        if d.numerator.len() != d.write.len() {
            return Err(CompileError::Shape {
                op: ops.len(),
                matrix: "write",
                expected: format!("{} rows", d.numerator.len()),
                got: format!("{} rows", d.write.len()),
            });
        }
        if ops.iter().any(|o| o.kind == OpKind::Mul) {
            return Err(CompileError::DivisionWithMul);
        }
    }
    check_independent(ops, div)?;

    let mut maps: Vec<TimestepMap> = Vec::new();
    for op in ops.iter().filter(|o| o.reads()) {
        if !maps.contains(&op.map) {
            maps.push(op.map);
        }
    }
    if maps.len() > 1 {
        let names: Vec<String> = maps.iter().map(|m| m.to_string()).collect();
        return Err(CompileError::MixedTimestepMaps(names.join(", ")));
    }
    let map = maps.first().copied().unwrap_or(TimestepMap::SelfToken);
    if map.can_be_empty() && !c.imaginary_timestep {
        let op = ops.iter().position(|o| o.reads()).unwrap_or(0);
        return Err(CompileError::EmptyAttention {
            op,
            map: map.to_string(),
        });
    }

    let mut b = Builder::new(layout);
    let mut products = false;
    for op in ops {
        match op.kind {
            OpKind::Add => b.add_op(op),
            OpKind::Mul => {
                b.mul_op(op, c)?;
                products = true;
            }
        }
    }
    if let Some(d) = div {
        b.div_op(d, c)?;
    }
    if products {
        b.ln_bypass(c);
    }
    b.balance();
    b.finish(map, c)
}

/// One op, one layer. Also returns the position embeddings the layer relies
/// on (constant-1 row and one-hot block, `T_max × H`).
pub fn compile_op(op: &RawOp, layout: &Layout, c: &Constants) -> Result<(LayerParams, DenseMatrix), CompileError> {
    let lowered = compile_layer(std::slice::from_ref(op), None, layout, c)?;
    Ok((lowered.params, layout.position_embeddings()))
}

/// Several independent ops in one layer; the result equals applying them in
/// any order.
pub fn fuse_parallel(ops: &[RawOp], layout: &Layout, c: &Constants) -> Result<LoweredLayer, CompileError> {
    compile_layer(ops, None, layout, c)
}

/// `h[w] = h[numerator] / h[denominator]` via layer normalization.
pub fn compile_div_layer(
    numerator: Span,
    denominator: usize,
    write: Span,
    layout: &Layout,
    c: &Constants,
) -> Result<LayerParams, CompileError> {
    let div = DivOp {
        numerator,
        denominator,
        write,
    };
    Ok(compile_layer(&[], Some(&div), layout, c)?.params)
}
