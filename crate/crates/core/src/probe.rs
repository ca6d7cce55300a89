//! Position-attention probes over hidden-state traces.
//!
//! A probe standardizes each hidden row, mixes the columns of one layer with
//! `α = softmax(s_v)`, projects with `W_v` and decodes with a linear or GeLU
//! MLP head:
//!
//! ```text
//! r = Z α        u = W_v r        v̂ = head(u)
//! ```
//!
//! Targets are standardized per dimension during training; reported errors
//! are in the target's own units. Gradients are analytic and training uses
//! Adam with fixed hyperparameters, keeping the parameters with the best
//! validation loss.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compiler::{program_sgd_step, CompiledProgram};
use crate::error::{Error, Result};
use crate::metrics::mean_stderr;
use crate::numerics::{gelu, gelu_derivative, softmax, DenseMatrix};
use crate::predictors::{ridge_weights, sgd_weights_from, Dataset};
use crate::rng;
use crate::transformer::HiddenTrace;

pub const MLP_HIDDEN: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Mlp { hidden: usize },
}

impl HeadKind {
    pub fn mlp() -> Self {
        HeadKind::Mlp { hidden: MLP_HIDDEN }
    }

    pub fn label(&self) -> String {
        match self {
            HeadKind::Linear => "linear".into(),
            HeadKind::Mlp { hidden } => format!("mlp{hidden}"),
        }
    }
}

/// `(x − mean) / scale` per coordinate; constant coordinates get scale 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Statistics over every vector yielded by `samples`.
    pub fn fit<'a>(n: usize, samples: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut count = 0.0;
        let mut mean = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        for s in samples {
            count += 1.0;
            for i in 0..n {
                let delta = s[i] - mean[i];
                mean[i] += delta / count;
                m2[i] += delta * (s[i] - mean[i]);
            }
        }
        let scale = m2
            .iter()
            .zip(&mean)
            .map(|(&m, &mu)| {
                let sd = if count > 0.0 { (m / count).sqrt() } else { 0.0 };
                // Rows that only carry rounding noise around a large constant
                // are treated as constant.
                if sd > 1e-12 * mu.abs().max(1e-300) && sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// All trainable numbers live in one flat vector:
/// `s_v (T_max) | W_v (H'×H) | head`, where the head is `W (k×H') | b (k)`
/// or `W₁ (M×H') | b₁ (M) | W₂ (k×M) | b₂ (k)`, matrices row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub t_max: usize,
    pub hidden: usize,
    pub proj: usize,
    pub out_dim: usize,
    pub head: HeadKind,
    pub theta: Vec<f64>,
    pub input: Standardizer,
    pub output: Standardizer,
}

struct Offsets {
    w_v: usize,
    head: usize,
    /// Linear: `b`. MLP: `b₁`.
    b: usize,
    w_2: usize,
    b_2: usize,
    end: usize,
}

impl ProbeParams {
    /// `s_v = 0`, `W_v = I` (padded when `H' ≠ H`) and a small random head.
    pub fn init(t_max: usize, hidden: usize, proj: usize, out_dim: usize, head: HeadKind, seed: u64) -> Self {
        let mut p = Self {
            t_max,
            hidden,
            proj,
            out_dim,
            head,
            theta: Vec::new(),
            input: Standardizer::identity(hidden),
            output: Standardizer::identity(out_dim),
        };
        let o = p.offsets();
        p.theta = vec![0.0; o.end];
        for i in 0..proj.min(hidden) {
            p.theta[o.w_v + i * hidden + i] = 1.0;
        }
        let mut r = rng::stream(seed, 0);
        match head {
            HeadKind::Linear => {
                let w = rng::normal_vec(&mut r, out_dim * proj, 1.0 / (proj as f64).sqrt());
                p.theta[o.head..o.b].copy_from_slice(&w);
            }
            HeadKind::Mlp { hidden: m } => {
                let w1 = rng::normal_vec(&mut r, m * proj, 1.0 / (proj as f64).sqrt());
                p.theta[o.head..o.b].copy_from_slice(&w1);
                let w2 = rng::normal_vec(&mut r, out_dim * m, 1.0 / (m as f64).sqrt());
                p.theta[o.w_2..o.b_2].copy_from_slice(&w2);
            }
        }
        p
    }

    fn offsets(&self) -> Offsets {
        let w_v = self.t_max;
        let head = w_v + self.proj * self.hidden;
        match self.head {
            HeadKind::Linear => {
                let b = head + self.out_dim * self.proj;
                let end = b + self.out_dim;
                Offsets {
                    w_v,
                    head,
                    b,
                    w_2: end,
                    b_2: end,
                    end,
                }
            }
            HeadKind::Mlp { hidden: m } => {
                let b = head + m * self.proj;
                let w_2 = b + m;
                let b_2 = w_2 + self.out_dim * m;
                Offsets {
                    w_v,
                    head,
                    b,
                    w_2,
                    b_2,
                    end: b_2 + self.out_dim,
                }
            }
        }
    }

    /// Input statistics over every column of every sample, target statistics
    /// over samples.
    pub fn fit_standardizers(&mut self, data: &ProbeData) {
        let cols: Vec<Vec<f64>> = data.inputs.iter().flat_map(|m| (0..m.cols()).map(|c| m.column(c))).collect();
        self.input = Standardizer::fit(self.hidden, cols.iter().map(|c| c.as_slice()));
        self.output = Standardizer::fit(self.out_dim, data.targets.iter().map(|t| t.as_slice()));
    }

    pub fn n_params(&self) -> usize {
        self.offsets().end
    }

    pub fn position_scores(&self) -> &[f64] {
        &self.theta[..self.t_max]
    }

    pub fn position_scores_mut(&mut self) -> &mut [f64] {
        &mut self.theta[..self.t_max]
    }

    /// Attention over the first `t` positions.
    pub fn attention(&self, t: usize) -> Vec<f64> {
        softmax(&self.theta[..t])
    }

    pub fn w_v(&self) -> DenseMatrix {
        let o = self.offsets();
        DenseMatrix::from_vec(self.proj, self.hidden, self.theta[o.w_v..o.head].to_vec()).expect("W_v block")
    }

    /// Zeroes every head weight and bias.
    pub fn zero_head(&mut self) {
        let o = self.offsets();
        self.theta[o.head..].iter_mut().for_each(|v| *v = 0.0);
    }
}

struct Cache {
    alpha: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
    /// MLP pre-activations.
    a: Vec<f64>,
    /// MLP activations.
    g: Vec<f64>,
    out: Vec<f64>,
}

/// Forward pass on standardized columns; outputs are in standardized target
/// units.
fn forward_std(p: &ProbeParams, z: &[Vec<f64>]) -> Cache {
    let o = p.offsets();
    let th = &p.theta;
    let h = p.hidden;
    let alpha = softmax(&th[..z.len()]);
    let mut r = vec![0.0; h];
    for (col, &a) in z.iter().zip(&alpha) {
        for (ri, ci) in r.iter_mut().zip(col) {
            *ri += a * ci;
        }
    }
    let u: Vec<f64> = (0..p.proj)
        .map(|i| {
            let row = &th[o.w_v + i * h..o.w_v + (i + 1) * h];
            row.iter().zip(&r).map(|(w, x)| w * x).sum()
        })
        .collect();
    let affine = |w0: usize, b0: usize, rows: usize, x: &[f64]| -> Vec<f64> {
        let n = x.len();
        (0..rows)
            .map(|i| th[b0 + i] + th[w0 + i * n..w0 + (i + 1) * n].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    };
    match p.head {
        HeadKind::Linear => {
            let out = affine(o.head, o.b, p.out_dim, &u);
            Cache {
                alpha,
                r,
                u,
                a: Vec::new(),
                g: Vec::new(),
                out,
            }
        }
        HeadKind::Mlp { hidden: m } => {
            let a = affine(o.head, o.b, m, &u);
            let g: Vec<f64> = a.iter().map(|&v| gelu(v)).collect();
            let out = affine(o.w_2, o.b_2, p.out_dim, &g);
            Cache { alpha, r, u, a, g, out }
        }
    }
}

/// Accumulates `∂L/∂θ` for one sample whose output gradient is `go`.
fn backward(p: &ProbeParams, z: &[Vec<f64>], c: &Cache, go: &[f64], grad: &mut [f64]) {
    let o = p.offsets();
    let th = &p.theta;
    let h = p.hidden;
    // Returns `Wᵀ go` after adding `go ⊗ x` to dW and `go` to db.
    let affine_back = |w0: usize, b0: usize, x: &[f64], go: &[f64], grad: &mut [f64]| -> Vec<f64> {
        let n = x.len();
        let mut gx = vec![0.0; n];
        for (i, &gi) in go.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            grad[b0 + i] += gi;
            let wrow = &th[w0 + i * n..w0 + (i + 1) * n];
            let grow = &mut grad[w0 + i * n..w0 + (i + 1) * n];
            for j in 0..n {
                grow[j] += gi * x[j];
                gx[j] += gi * wrow[j];
            }
        }
        gx
    };
    let gu = match p.head {
        HeadKind::Linear => affine_back(o.head, o.b, &c.u, go, grad),
        HeadKind::Mlp { .. } => {
            let gg = affine_back(o.w_2, o.b_2, &c.g, go, grad);
            let ga: Vec<f64> = gg.iter().zip(&c.a).map(|(g, &a)| g * gelu_derivative(a)).collect();
            affine_back(o.head, o.b, &c.u, &ga, grad)
        }
    };
    let mut gr = vec![0.0; h];
    for (i, &gi) in gu.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        let wrow = &th[o.w_v + i * h..o.w_v + (i + 1) * h];
        let grow = &mut grad[o.w_v + i * h..o.w_v + (i + 1) * h];
        for j in 0..h {
            grow[j] += gi * c.r[j];
            gr[j] += gi * wrow[j];
        }
    }
    let ga: Vec<f64> = z.iter().map(|col| col.iter().zip(&gr).map(|(a, b)| a * b).sum()).collect();
    let mean: f64 = ga.iter().zip(&c.alpha).map(|(g, a)| g * a).sum();
    for (t, (g, a)) in ga.iter().zip(&c.alpha).enumerate() {
        grad[t] += a * (g - mean);
    }
}

fn check_layer(p: &ProbeParams, layer: &DenseMatrix) -> Result<()> {
    if layer.rows() != p.hidden || layer.cols() > p.t_max || layer.cols() == 0 {
        return Err(Error::Dimension {
            context: "probe_forward",
            expected: format!("{} rows and 1..={} columns", p.hidden, p.t_max),
            got: format!("{}x{}", layer.rows(), layer.cols()),
        });
    }
    Ok(())
}

fn standardize_columns(p: &ProbeParams, layer: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..layer.cols()).map(|t| p.input.apply(&layer.column(t))).collect()
}

/// `v̂` for one hidden-state layer (hidden × timesteps), in target units.
pub fn probe_forward(p: &ProbeParams, layer: &DenseMatrix) -> Result<Vec<f64>> {
    check_layer(p, layer)?;
    let c = forward_std(p, &standardize_columns(p, layer));
    Ok(p.output.invert(&c.out))
}

/// Inputs and targets for one probe.
#[derive(Clone, Debug, Default)]
pub struct ProbeData {
    pub inputs: Vec<DenseMatrix>,
    pub targets: Vec<Vec<f64>>,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Standardized copy of a dataset, ready for repeated passes.
struct Prepared {
    z: Vec<Vec<Vec<f64>>>,
    y: Vec<Vec<f64>>,
}

fn prepare(p: &ProbeParams, data: &ProbeData) -> Prepared {
    Prepared {
        z: data.inputs.iter().map(|m| standardize_columns(p, m)).collect(),
        y: data.targets.iter().map(|t| p.output.apply(t)).collect(),
    }
}

/// Mean over samples and target dimensions of the squared standardized error,
/// and its gradient when `grad` is given.
fn loss_on(p: &ProbeParams, data: &Prepared, idx: &[usize], mut grad: Option<&mut [f64]>) -> f64 {
    let scale = 1.0 / (idx.len() * p.out_dim) as f64;
    let mut loss = 0.0;
    for &i in idx {
        let c = forward_std(p, &data.z[i]);
        let diff: Vec<f64> = c.out.iter().zip(&data.y[i]).map(|(a, b)| a - b).collect();
        loss += diff.iter().map(|d| d * d).sum::<f64>() * scale;
        if let Some(g) = grad.as_deref_mut() {
            let go: Vec<f64> = diff.iter().map(|d| 2.0 * d * scale).collect();
            backward(p, &data.z[i], &c, &go, g);
        }
    }
    loss
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub steps: usize,
    pub eval_every: usize,
    /// Coefficient of `Σθ²` over `W_v` and the head weight matrices.
    pub weight_decay: f64,
    pub head: HeadKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 256,
            steps: 10_000,
            eval_every: 50,
            weight_decay: 3e-3,
            head: HeadKind::Linear,
            seed: 0,
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            theta[i] -= cfg.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps);
        }
    }
}

/// Indices of the penalized weights: `W_v` and the head matrices, not the
/// position scores or biases.
fn decayed_ranges(p: &ProbeParams) -> Vec<std::ops::Range<usize>> {
    let o = p.offsets();
    let mut r = vec![o.w_v..o.head, o.head..o.b];
    if o.w_2 < o.b_2 {
        r.push(o.w_2..o.b_2);
    }
    r
}

fn add_weight_decay(p: &ProbeParams, wd: f64, grad: &mut [f64]) {
    if wd == 0.0 {
        return;
    }
    for range in decayed_ranges(p) {
        for i in range {
            grad[i] += 2.0 * wd * p.theta[i];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationError {
    /// Mean squared error per target coordinate, in target units.
    pub mse: f64,
    pub stderr: f64,
    /// Mean per-coordinate variance of the targets.
    pub target_var: f64,
    pub n: usize,
}

impl ValidationError {
    pub fn normalized(&self) -> f64 {
        if self.target_var > 0.0 {
            self.mse / self.target_var
        } else {
            self.mse
        }
    }
}

pub fn evaluate(p: &ProbeParams, data: &ProbeData) -> Result<ValidationError> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let k = p.out_dim as f64;
    let mut errs = Vec::with_capacity(data.len());
    for (x, t) in data.inputs.iter().zip(&data.targets) {
        let yhat = probe_forward(p, x)?;
        errs.push(yhat.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / k);
    }
    let (mse, stderr) = mean_stderr(&errs);
    let target_var = (0..p.out_dim)
        .map(|j| {
            let col: Vec<f64> = data.targets.iter().map(|t| t[j]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64
        })
        .sum::<f64>()
        / k;
    Ok(ValidationError {
        mse,
        stderr,
        target_var,
        n: errs.len(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainedProbe {
    pub params: ProbeParams,
    pub validation: ValidationError,
    pub best_step: usize,
    /// `(step, validation loss)` in standardized units.
    pub history: Vec<(usize, f64)>,
}

fn check_data(data: &ProbeData, what: &str) -> Result<(usize, usize, usize)> {
    let first = data
        .inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("empty {what} set")))?;
    let k = data.targets.first().map(|t| t.len()).unwrap_or(0);
    if data.targets.len() != data.inputs.len() || k == 0 {
        return Err(Error::InvalidArgument(format!("{what} set needs one non-empty target per input")));
    }
    for (x, t) in data.inputs.iter().zip(&data.targets) {
        if x.shape() != first.shape() || t.len() != k {
            return Err(Error::Dimension {
                context: "probe data",
                expected: format!("{}x{} inputs with {k} targets", first.rows(), first.cols()),
                got: format!("{}x{} with {}", x.rows(), x.cols(), t.len()),
            });
        }
    }
    Ok((first.rows(), first.cols(), k))
}

/// Fits a probe by minibatch Adam on the standardized squared error and
/// returns the parameters with the lowest validation loss seen.
pub fn probe_train(train: &ProbeData, val: &ProbeData, t_max: usize, cfg: &TrainConfig) -> Result<TrainedProbe> {
    let (h, t, k) = check_data(train, "training")?;
    let (hv, tv, kv) = check_data(val, "validation")?;
    if (h, t, k) != (hv, tv, kv) || t > t_max {
        return Err(Error::Dimension {
            context: "probe_train",
            expected: format!("{h}x{t} inputs (at most {t_max} columns) with {k} targets"),
            got: format!("{hv}x{tv} with {kv}"),
        });
    }
    if cfg.batch == 0 || cfg.eval_every == 0 {
        return Err(Error::InvalidArgument("batch and eval_every must be >= 1".into()));
    }
    let mut p = ProbeParams::init(t_max, h, h, k, cfg.head, cfg.seed);
    p.fit_standardizers(train);

    let tr = prepare(&p, train);
    let va = prepare(&p, val);
    let all_val: Vec<usize> = (0..val.len()).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, 1);
    let mut cursor = order.len();
    let mut adam = Adam::new(p.n_params());
    let mut grad = vec![0.0; p.n_params()];

    let mut best = (loss_on(&p, &va, &all_val, None), 0usize, p.theta.clone());
    let mut history = vec![(0, best.0)];
    for step in 1..=cfg.steps {
        if cursor + cfg.batch > order.len() {
            order.shuffle(&mut shuffle);
            cursor = 0;
        }
        let end = (cursor + cfg.batch).min(order.len());
        let batch = &order[cursor..end];
        cursor = end;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = loss_on(&p, &tr, batch, Some(&mut grad));
        add_weight_decay(&p, cfg.weight_decay, &mut grad);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        adam.step(&mut p.theta, &grad, cfg);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let vl = loss_on(&p, &va, &all_val, None);
            if !vl.is_finite() {
                return Err(Error::Diverged { step, loss: vl });
            }
            history.push((step, vl));
            if vl < best.0 {
                best = (vl, step, p.theta.clone());
            }
        }
    }
    p.theta = best.2;
    let validation = evaluate(&p, val)?;
    Ok(TrainedProbe {
        params: p,
        validation,
        best_step: best.1,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub max_relative: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Central differences with step `h` on `n_coords` random coordinates of the
/// standardized training loss. The relative deviation uses
/// `max(|analytic|, |numeric|, floor)` as denominator.
pub fn gradient_check(
    p: &ProbeParams,
    data: &ProbeData,
    n_coords: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<GradientCheck> {
    check_data(data, "gradient check")?;
    let prepared = prepare(p, data);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; p.n_params()];
    loss_on(p, &prepared, &idx, Some(&mut grad));
    let mut r = rng::stream(seed, 7);
    let mut coords: Vec<usize> = (0..p.n_params()).collect();
    coords.shuffle(&mut r);
    coords.truncate(n_coords);
    // Position scores beyond the data's timesteps have zero gradient by
    // construction; the sample still includes them if drawn.
    let mut q = p.clone();
    let mut out = GradientCheck {
        max_relative: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: coords.len(),
    };
    for &i in &coords {
        let orig = q.theta[i];
        q.theta[i] = orig + h;
        let up = loss_on(&q, &prepared, &idx, None);
        q.theta[i] = orig - h;
        let down = loss_on(&q, &prepared, &idx, None);
        q.theta[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(floor);
        if rel > out.max_relative || out.coordinates == 0 {
            out.max_relative = rel;
            out.worst_index = i;
            out.analytic = grad[i];
            out.numeric = numeric;
        }
    }
    Ok(out)
}

/// Quantities a probe can decode, computed from the first `n` context
/// examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    /// `XᵀY`
    Moments,
    /// Minimum-norm least squares weights.
    OlsWeights,
    /// One-pass SGD weights from the trace set's `w₀`, `α`, `λ`.
    SgdWeights,
}

impl ProbeTarget {
    pub fn label(&self) -> &'static str {
        match self {
            ProbeTarget::Moments => "moments",
            ProbeTarget::OlsWeights => "ols_weights",
            ProbeTarget::SgdWeights => "sgd_weights",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdSetting {
    pub w0: Vec<f64>,
    pub alpha: f64,
    pub lambda: f64,
}

/// Where the ground-truth weights of a task come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "w", rename_all = "snake_case")]
pub enum WeightSource {
    Normal,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct TraceTask {
    pub context: Dataset,
    pub query: Vec<f64>,
    pub w_true: Vec<f64>,
    pub trace: HiddenTrace,
}

/// Hidden-state traces of one compiled program on sampled tasks.
#[derive(Clone, Debug)]
pub struct TraceSet {
    /// Which model produced the traces, e.g. `main` or `control`.
    pub label: String,
    pub program_name: String,
    pub program_hash: String,
    pub seed: u64,
    pub d: usize,
    pub n_context: usize,
    pub sgd: SgdSetting,
    pub tasks: Vec<TraceTask>,
}

impl TraceSet {
    pub fn depth(&self) -> usize {
        self.tasks.first().map(|t| t.trace.layers.len() - 1).unwrap_or(0)
    }

    pub fn hidden(&self) -> usize {
        self.tasks.first().map(|t| t.trace.input().rows()).unwrap_or(0)
    }

    pub fn timesteps(&self) -> usize {
        self.tasks.first().map(|t| t.trace.input().cols()).unwrap_or(0)
    }

    pub fn target(&self, task: &TraceTask, target: ProbeTarget, n: usize) -> Result<Vec<f64>> {
        let data = task.context.prefix(n);
        Ok(match target {
            ProbeTarget::Moments => (0..self.d)
                .map(|k| (0..n).map(|i| data.x[(i, k)] * data.y[i]).sum())
                .collect(),
            ProbeTarget::OlsWeights => ridge_weights(&data, 0.0)?,
            ProbeTarget::SgdWeights => sgd_weights_from(&self.sgd.w0, &data, self.sgd.alpha, self.sgd.lambda),
        })
    }

    /// Layer `layer` restricted to the first `2n` timesteps, with targets.
    pub fn probe_data(&self, tasks: &[TraceTask], layer: usize, target: ProbeTarget, n: usize) -> Result<ProbeData> {
        if n == 0 || n > self.n_context || layer > self.depth() {
            return Err(Error::InvalidArgument(format!(
                "probe needs 1 <= n <= {} and layer <= {}, got n={n}, layer={layer}",
                self.n_context,
                self.depth()
            )));
        }
        let mut out = ProbeData::default();
        for task in tasks {
            out.inputs.push(task.trace.layer(layer).slice_cols(0, 2 * n));
            out.targets.push(self.target(task, target, n)?);
        }
        Ok(out)
    }
}

/// Task sampler for probing: `x ~ U[−0.1, 0.1]^d` so every product stays in
/// the compiled multiplication's accuracy domain, `y = wᵀx`.
#[allow(clippy::too_many_arguments)]
pub fn make_traces(
    label: &str,
    program: &CompiledProgram,
    sgd: SgdSetting,
    d: usize,
    n_context: usize,
    n_tasks: usize,
    weights: &WeightSource,
    seed: u64,
) -> Result<TraceSet> {
    if let WeightSource::Fixed(w) = weights {
        if w.len() != d {
            return Err(Error::InvalidArgument(format!("fixed weights need length {d}, got {}", w.len())));
        }
    }
    let tasks: Result<Vec<TraceTask>> = (0..n_tasks as u64)
        .into_par_iter()
        .map(|id| {
            let mut r = rng::stream(seed, id);
            let w_true = match weights {
                WeightSource::Normal => rng::normal_vec(&mut r, d, 1.0),
                WeightSource::Fixed(w) => w.clone(),
            };
            let xs = rng::uniform_vec(&mut r, n_context * d, 0.1);
            let query = rng::uniform_vec(&mut r, d, 0.1);
            let x = DenseMatrix::from_vec(n_context, d, xs)?;
            let y: Vec<f64> = (0..n_context)
                .map(|i| x.row(i).iter().zip(&w_true).map(|(a, b)| a * b).sum())
                .collect();
            let trace = program.run(&x, &y, &query)?.trace;
            Ok(TraceTask {
                context: Dataset { x, y },
                query,
                w_true,
                trace,
            })
        })
        .collect();
    Ok(TraceSet {
        label: label.to_string(),
        program_name: program.program.name.clone(),
        program_hash: program.params_hash()?,
        seed,
        d,
        n_context,
        sgd,
        tasks: tasks?,
    })
}

/// Traces of the compiled single-step SGD program started from `w₀ = 0` on
/// tasks with `w ~ N(0, I)`.
pub fn make_main_traces(d: usize, alpha: f64, lambda: f64, n_tasks: usize, seed: u64) -> Result<TraceSet> {
    let w0 = vec![0.0; d];
    let program = program_sgd_step(d, &w0, alpha, lambda)?.compile()?;
    make_traces("main", &program, SgdSetting { w0, alpha, lambda }, d, 1, n_tasks, &WeightSource::Normal, seed)
}

/// Control model: the same construction with the weights fixed at the
/// all-ones vector (`w₀ = 1`, `α = 0`), so it never needs to infer `w`.
/// It is fed tasks whose `w ~ N(0, I)`, like the main model.
pub fn make_control_traces(d: usize, lambda: f64, n_tasks: usize, seed: u64) -> Result<TraceSet> {
    let w0 = vec![1.0; d];
    let program = program_sgd_step(d, &w0, 0.0, lambda)?.compile()?;
    make_traces(
        "control",
        &program,
        SgdSetting { w0, alpha: 0.0, lambda },
        d,
        1,
        n_tasks,
        &WeightSource::Normal,
        seed,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub train: TrainConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_train: 10_000,
            n_val: 2_000,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub model: String,
    pub layer: usize,
    pub target: ProbeTarget,
    pub n: usize,
    pub head: HeadKind,
    pub mse: f64,
    pub stderr: f64,
    pub target_var: f64,
    pub normalized: f64,
    pub best_step: usize,
    pub attention: Vec<f64>,
}

/// Trains one independent probe per `(layer, target, n)` on the first
/// `n_train` tasks and validates on the next `n_val`.
pub fn probe_report(
    set: &TraceSet,
    layers: &[usize],
    targets: &[ProbeTarget],
    n_range: &[usize],
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeRow>> {
    if set.tasks.len() < cfg.n_train + cfg.n_val {
        return Err(Error::InvalidArgument(format!(
            "need {} traces, have {}",
            cfg.n_train + cfg.n_val,
            set.tasks.len()
        )));
    }
    let (train_tasks, rest) = set.tasks.split_at(cfg.n_train);
    let val_tasks = &rest[..cfg.n_val];
    let mut jobs = Vec::new();
    for &layer in layers {
        for (ti, &target) in targets.iter().enumerate() {
            for &n in n_range {
                jobs.push((layer, ti, target, n));
            }
        }
    }
    jobs.par_iter()
        .map(|&(layer, ti, target, n)| {
            let train = set.probe_data(train_tasks, layer, target, n)?;
            let val = set.probe_data(val_tasks, layer, target, n)?;
            let mut tc = cfg.train;
            tc.seed = cfg.train.seed ^ ((layer as u64) << 32 | (ti as u64) << 16 | n as u64);
            let probe = probe_train(&train, &val, set.timesteps(), &tc)?;
            Ok(ProbeRow {
                model: set.label.clone(),
                layer,
                target,
                n,
                head: tc.head,
                mse: probe.validation.mse,
                stderr: probe.validation.stderr,
                target_var: probe.validation.target_var,
                normalized: probe.validation.normalized(),
                best_step: probe.best_step,
                attention: probe.params.attention(2 * n),
            })
        })
        .collect()
}

pub const PROBE_CSV_HEADER: &str = "model,layer,target,n,head,mse,stderr,target_var,normalized,best_step,attention";

/// Attention weights are `;`-separated in timestep order.
pub fn probe_csv(rows: &[ProbeRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PROBE_CSV_HEADER.split(','))?;
    for r in rows {
        let att: Vec<String> = r.attention.iter().map(|a| a.to_string()).collect();
        w.write_record([
            r.model.clone(),
            r.layer.to_string(),
            r.target.label().to_string(),
            r.n.to_string(),
            r.head.label(),
            r.mse.to_string(),
            r.stderr.to_string(),
            r.target_var.to_string(),
            r.normalized.to_string(),
            r.best_step.to_string(),
            att.join(";"),
        ])?;
    }
    crate::metrics::csv_string(w)
}

#[derive(Serialize)]
struct TraceDump<'a> {
    program: &'a str,
    program_hash: &'a str,
    seed: u64,
    d: usize,
    n_context: usize,
    axes: [&'static str; 3],
    layers: usize,
    timesteps: usize,
    hidden: usize,
    tasks: Vec<TaskDump>,
}

#[derive(Serialize)]
struct TaskDump {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    query: Vec<f64>,
    w_true: Vec<f64>,
    /// `[layer][timestep][hidden]`
    hidden_states: Vec<Vec<Vec<f64>>>,
}

/// JSON dump with `(layer, timestep, hidden)` axes per task.
pub fn write_trace_dump(set: &TraceSet, out: &mut impl Write) -> Result<()> {
    let tasks = set
        .tasks
        .iter()
        .map(|t| TaskDump {
            x: t.context.x.to_rows(),
            y: t.context.y.clone(),
            query: t.query.clone(),
            w_true: t.w_true.clone(),
            hidden_states: t.trace.layers.iter().map(|m| m.transpose().to_rows()).collect(),
        })
        .collect();
    let dump = TraceDump {
        program: &set.program_name,
        program_hash: &set.program_hash,
        seed: set.seed,
        d: set.d,
        n_context: set.n_context,
        axes: ["layer", "timestep", "hidden"],
        layers: set.depth() + 1,
        timesteps: set.timesteps(),
        hidden: set.hidden(),
        tasks,
    };
    serde_json::to_writer(&mut *out, &dump)?;
    writeln!(out)?;
    Ok(())
}
