use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CompileError, Result};
use crate::numerics::DenseMatrix;

/// Half-open row interval `[start, end)`; serialized as `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const EMPTY: Span = Span { start: 0, end: 0 };

    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "span [{start}, {end}) is reversed");
        Self { start, end }
    }

    pub fn at(start: usize, len: usize) -> Self {
        Self::new(start, start + len)
    }

    pub fn row(i: usize) -> Self {
        Self::new(i, i + 1)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, row: usize) -> bool {
        self.start <= row && row < self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        !self.is_empty() && !other.is_empty() && self.start < other.end && other.start < self.end
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl TryFrom<[usize; 2]> for Span {
    type Error = String;

    fn try_from([start, end]: [usize; 2]) -> std::result::Result<Self, String> {
        if start > end {
            return Err(format!("span [{start}, {end}) is reversed"));
        }
        Ok(Self { start, end })
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Add,
    Mul,
}

/// Which earlier timesteps a RAW op reads at timestep `i` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "t", rename_all = "snake_case")]
pub enum TimestepMap {
    /// `{i}`
    #[serde(rename = "self")]
    SelfToken,
    /// `{i-1}`, empty at `i = 0`.
    PreviousToken,
    /// `{t}` once `i ≥ t`, empty before.
    FixedToken(usize),
    /// `{i}` once `i ≥ t`, empty before.
    EmptyBefore(usize),
}

impl TimestepMap {
    pub fn members(&self, i: usize) -> Vec<usize> {
        match *self {
            TimestepMap::SelfToken => vec![i],
            TimestepMap::PreviousToken => i.checked_sub(1).into_iter().collect(),
            TimestepMap::FixedToken(t) => if i >= t { vec![t] } else { vec![] },
            TimestepMap::EmptyBefore(t) => if i >= t { vec![i] } else { vec![] },
        }
    }

    /// The single member, when there is one.
    pub fn target(&self, i: usize) -> Option<usize> {
        self.members(i).first().copied()
    }

    pub fn can_be_empty(&self) -> bool {
        match *self {
            TimestepMap::SelfToken => false,
            TimestepMap::PreviousToken => true,
            TimestepMap::FixedToken(t) | TimestepMap::EmptyBefore(t) => t > 0,
        }
    }
}

impl fmt::Display for TimestepMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimestepMap::SelfToken => write!(f, "self"),
            TimestepMap::PreviousToken => write!(f, "previous_token"),
            TimestepMap::FixedToken(t) => write!(f, "fixed_token({t})"),
            TimestepMap::EmptyBefore(t) => write!(f, "empty_before({t})"),
        }
    }
}

/// One read-arithmetic-write operation:
///
/// `h_i[w] = W_o((W_a · mean_{k∈K(i)} h_k[r] + b_a) ⊛ (W · h_i[s] + b)) + b_o`
///
/// where `⊛` is `+` or the elementwise product and the mean over an empty
/// `K(i)` is zero. Rows outside `w` are left untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawOp {
    pub kind: OpKind,
    pub read: Span,
    pub operand: Span,
    pub write: Span,
    /// `inner × |s|`
    pub w: DenseMatrix,
    /// `inner × |r|`
    pub w_a: DenseMatrix,
    /// `|w| × inner`
    pub w_o: DenseMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_o: Option<Vec<f64>>,
    pub map: TimestepMap,
}

impl RawOp {
    pub fn inner(&self) -> usize {
        self.w_o.cols()
    }

    /// `h[w] = h_{K(i)}[r]`.
    pub fn mov(read: Span, write: Span, map: TimestepMap) -> Self {
        assert_eq!(read.len(), write.len());
        let n = read.len();
        Self {
            kind: OpKind::Add,
            read,
            operand: Span::EMPTY,
            write,
            w: DenseMatrix::zeros(n, 0),
            w_a: DenseMatrix::identity(n),
            w_o: DenseMatrix::identity(n),
            b: None,
            b_a: None,
            b_o: None,
            map,
        }
    }

    /// `h[w] = W_a·h_{K(i)}[r] + W·h_i[s]`.
    pub fn affine(read: Span, w_a: DenseMatrix, operand: Span, w: DenseMatrix, write: Span, map: TimestepMap) -> Self {
        let inner = write.len();
        Self {
            kind: OpKind::Add,
            read,
            operand,
            write,
            w,
            w_a,
            w_o: DenseMatrix::identity(inner),
            b: None,
            b_a: None,
            b_o: None,
            map,
        }
    }

    /// `h[w] = value` at every timestep.
    pub fn constant(write: Span, value: Vec<f64>) -> Self {
        assert_eq!(value.len(), write.len());
        let n = write.len();
        Self {
            kind: OpKind::Add,
            read: Span::EMPTY,
            operand: Span::EMPTY,
            write,
            w: DenseMatrix::zeros(n, 0),
            w_a: DenseMatrix::zeros(n, 0),
            w_o: DenseMatrix::identity(n),
            b: None,
            b_a: None,
            b_o: Some(value),
            map: TimestepMap::SelfToken,
        }
    }

    /// `h[w] = W_o((W_a·h_{K(i)}[r]) ⊙ (W·h_i[s]))`.
    pub fn product(
        read: Span,
        w_a: DenseMatrix,
        operand: Span,
        w: DenseMatrix,
        write: Span,
        w_o: DenseMatrix,
        map: TimestepMap,
    ) -> Self {
        Self {
            kind: OpKind::Mul,
            read,
            operand,
            write,
            w,
            w_a,
            w_o,
            b: None,
            b_a: None,
            b_o: None,
            map,
        }
    }

    /// `h[w] = Σ_k h_{K(i)}[a]_k · h_i[b]_k`, one output row.
    pub fn dot(a: Span, b: Span, write_row: usize, map: TimestepMap) -> Self {
        assert_eq!(a.len(), b.len());
        let n = a.len();
        Self::product(
            a,
            DenseMatrix::identity(n),
            b,
            DenseMatrix::identity(n),
            Span::row(write_row),
            DenseMatrix::from_vec(1, n, vec![1.0; n]).expect("finite"),
            map,
        )
    }

    /// Whether the op actually reads through attention.
    pub fn reads(&self) -> bool {
        !self.read.is_empty()
    }

    pub fn with_b_o(mut self, b_o: Vec<f64>) -> Self {
        self.b_o = Some(b_o);
        self
    }

    pub fn validate(&self, index: usize, program_rows: usize) -> std::result::Result<(), CompileError> {
        for (name, span) in [("read", self.read), ("operand", self.operand), ("write", self.write)] {
            if span.end > program_rows {
                return Err(CompileError::RangeOverflow {
                    op: index,
                    range: name,
                    start: span.start,
                    end: span.end,
                    limit: program_rows,
                });
            }
        }
        let inner = self.inner();
        let shape = |m: &DenseMatrix| format!("{}x{}", m.rows(), m.cols());
        let checks: [(&'static str, &DenseMatrix, (usize, usize)); 3] = [
            ("w", &self.w, (inner, self.operand.len())),
            ("w_a", &self.w_a, (inner, self.read.len())),
            ("w_o", &self.w_o, (self.write.len(), inner)),
        ];
        for (name, m, want) in checks {
            if m.shape() != want {
                return Err(CompileError::Shape {
                    op: index,
                    matrix: name,
                    expected: format!("{}x{}", want.0, want.1),
                    got: shape(m),
                });
            }
        }
        let vecs: [(&'static str, &Option<Vec<f64>>, usize); 3] =
            [("b", &self.b, inner), ("b_a", &self.b_a, inner), ("b_o", &self.b_o, self.write.len())];
        for (name, v, len) in vecs {
            if let Some(v) = v {
                if v.len() != len || !v.iter().all(|x| x.is_finite()) {
                    return Err(CompileError::Shape {
                        op: index,
                        matrix: name,
                        expected: format!("{len} finite entries"),
                        got: format!("{} entries", v.len()),
                    });
                }
            }
        }
        Ok(())
    }
}

/// `h[w] = h[numerator] / h[denominator]` at every timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivOp {
    pub numerator: Span,
    pub denominator: usize,
    pub write: Span,
}

/// Exact RAW semantics on the program rows of a hidden matrix (`rows × T`).
/// All ops read the same input, as in one fused layer.
pub fn apply_ops(ops: &[RawOp], hidden: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = hidden.clone();
    for op in ops {
        for i in 0..hidden.cols() {
            let col_i = hidden.column(i);
            let members = op.map.members(i);
            let mut read = vec![0.0; op.read.len()];
            for &k in &members {
                for (dst, row) in read.iter_mut().zip(op.read.rows()) {
                    *dst += hidden[(row, k)];
                }
            }
            if !members.is_empty() {
                let scale = 1.0 / members.len() as f64;
                read.iter_mut().for_each(|x| *x *= scale);
            }
            let mut lhs = op.w_a.matvec(&read)?;
            add_opt(&mut lhs, &op.b_a);
            let mut rhs = op.w.matvec(&col_i[op.operand.rows()])?;
            add_opt(&mut rhs, &op.b);
            let combined: Vec<f64> = match op.kind {
                OpKind::Add => lhs.iter().zip(&rhs).map(|(a, b)| a + b).collect(),
                OpKind::Mul => lhs.iter().zip(&rhs).map(|(a, b)| a * b).collect(),
            };
            let mut result = op.w_o.matvec(&combined)?;
            add_opt(&mut result, &op.b_o);
            for (row, v) in op.write.rows().zip(result) {
                out[(row, i)] = v;
            }
        }
    }
    out.ensure_finite("apply_ops")?;
    Ok(out)
}

pub fn apply_div(div: &DivOp, hidden: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = hidden.clone();
    for i in 0..hidden.cols() {
        let c = hidden[(div.denominator, i)];
        for (src, dst) in div.numerator.rows().zip(div.write.rows()) {
            out[(dst, i)] = hidden[(src, i)] / c;
        }
    }
    out.ensure_finite("apply_div")?;
    Ok(out)
}

fn add_opt(v: &mut [f64], bias: &Option<Vec<f64>>) {
    if let Some(b) = bias {
        for (x, y) in v.iter_mut().zip(b) {
            *x += y;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_basics() {
        let s = Span::new(2, 5);
        assert_eq!(s.len(), 3);
        assert!(s.contains(2) && !s.contains(5));
        assert!(s.overlaps(&Span::new(4, 9)));
        assert!(!s.overlaps(&Span::new(5, 9)));
        assert!(!s.overlaps(&Span::EMPTY));
    }

    #[test]
    fn timestep_maps() {
        assert_eq!(TimestepMap::PreviousToken.members(0), Vec::<usize>::new());
        assert_eq!(TimestepMap::PreviousToken.members(3), vec![2]);
        assert_eq!(TimestepMap::FixedToken(2).members(1), Vec::<usize>::new());
        assert_eq!(TimestepMap::FixedToken(2).members(4), vec![2]);
        assert_eq!(TimestepMap::EmptyBefore(2).members(4), vec![4]);
        assert!(!TimestepMap::FixedToken(0).can_be_empty());
        let json = serde_json::to_string(&TimestepMap::FixedToken(3)).unwrap();
        assert_eq!(json, r#"{"kind":"fixed_token","t":3}"#);
        let back: TimestepMap = serde_json::from_str(r#"{"kind":"self"}"#).unwrap();
        assert_eq!(back, TimestepMap::SelfToken);
    }

    #[test]
    fn mov_copies_from_fixed_token() {
        let h = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let op = RawOp::mov(Span::row(0), Span::row(1), TimestepMap::FixedToken(1));
        let out = apply_ops(&[op], &h).unwrap();
        assert_eq!(out.row(1), &[0.0, 2.0, 2.0]);
        assert_eq!(out.row(0), h.row(0));
    }

    #[test]
    fn affine_difference() {
        // row 2 = row 0 - row 1
        let h = DenseMatrix::from_rows(&[vec![0.5], vec![0.2], vec![9.0]]).unwrap();
        let op = RawOp::affine(
            Span::row(0),
            DenseMatrix::identity(1),
            Span::row(1),
            DenseMatrix::from_rows(&[vec![-1.0]]).unwrap(),
            Span::row(2),
            TimestepMap::SelfToken,
        );
        let out = apply_ops(&[op], &h).unwrap();
        assert!((out[(2, 0)] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn validate_catches_shapes_and_ranges() {
        let op = RawOp::mov(Span::new(0, 2), Span::new(2, 4), TimestepMap::SelfToken);
        assert!(op.validate(0, 4).is_ok());
        assert!(matches!(op.validate(0, 3), Err(CompileError::RangeOverflow { .. })));
        let mut bad = op.clone();
        bad.w_a = DenseMatrix::identity(3);
        assert!(matches!(bad.validate(0, 4), Err(CompileError::Shape { .. })));
    }
}
