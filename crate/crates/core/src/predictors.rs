//! Reference regression learners behind one [`Predictor`] interface.
//!
//! Every predictor maps a context dataset and a query point to a scalar.
//! Linear ones also expose their weight vector, which the metrics use
//! directly instead of refitting.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::compiler::{program_sgd_multi_step, CompiledProgram};
use crate::error::{Error, Result};
use crate::numerics::{dot, solve_least_squares, DenseMatrix};

/// Context examples, one per row of `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: DenseMatrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Dimension {
                context: "Dataset::new",
                expected: format!("{} targets", x.rows()),
                got: format!("{}", y.len()),
            });
        }
        Ok(Self { x, y })
    }

    pub fn empty(d: usize) -> Self {
        Self {
            x: DenseMatrix::zeros(0, d),
            y: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    /// The first `n` examples.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            x: self.x.slice_rows(0, n),
            y: self.y[..n].to_vec(),
        }
    }

    pub fn scaled_targets(&self, c: f64) -> Self {
        Self {
            x: self.x.clone(),
            y: self.y.iter().map(|v| v * c).collect(),
        }
    }
}

/// Identifies one prediction inside a Monte Carlo run; only external dumps
/// look at it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryKey {
    pub task_id: u64,
    pub n_context: usize,
    pub query_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    ClosedFormLinear,
    Procedural,
    ExternalDump,
}

pub trait Predictor: Send + Sync {
    fn name(&self) -> String;
    fn kind(&self) -> PredictorKind;
    fn predict(&self, data: &Dataset, query: &[f64], key: QueryKey) -> Result<f64>;
    /// The weight vector `w` with `prediction = wᵀx`, for predictors that
    /// have one.
    fn weights(&self, _data: &Dataset) -> Option<Result<Vec<f64>>> {
        None
    }
}

pub fn ridge_weights(data: &Dataset, lambda: f64) -> Result<Vec<f64>> {
    solve_least_squares(&data.x, &data.y, lambda)
}

/// Minimum-norm least squares; an empty dataset predicts 0.
pub fn ols_predict(data: &Dataset, query: &[f64]) -> Result<f64> {
    ridge_predict(data, query, 0.0)
}

pub fn ridge_predict(data: &Dataset, query: &[f64], lambda: f64) -> Result<f64> {
    check_query(data, query)?;
    Ok(dot(&ridge_weights(data, lambda)?, query))
}

/// Ridge with `λ = σ²/τ²`, the posterior mean under `w ~ N(0, τ²I)` and
/// noise `N(0, σ²)`.
pub fn bayes_predict(data: &Dataset, query: &[f64], sigma2: f64, tau2: f64) -> Result<f64> {
    ridge_predict(data, query, bayes_lambda(sigma2, tau2)?)
}

pub fn bayes_lambda(sigma2: f64, tau2: f64) -> Result<f64> {
    if !(tau2 > 0.0) || !(sigma2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bayes predictor needs tau2 > 0 and sigma2 >= 0, got {sigma2}, {tau2}"
        )));
    }
    Ok(sigma2 / tau2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnVariant {
    Uniform,
    /// Inverse squared distance weights, normalized to sum 1.
    Weighted,
}

pub const DEFAULT_K: usize = 3;

pub fn knn_predict(data: &Dataset, query: &[f64], variant: KnnVariant, k: usize) -> Result<f64> {
    check_query(data, query)?;
    if data.n() == 0 {
        return Err(Error::InvalidArgument("knn needs at least one example".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("knn needs k >= 1".into()));
    }
    let mut dist: Vec<(f64, usize)> = (0..data.n())
        .map(|i| {
            let d2: f64 = data.x.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, i)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nearest = &dist[..k.min(data.n())];
    match variant {
        KnnVariant::Uniform => Ok(nearest.iter().map(|&(_, i)| data.y[i]).sum::<f64>() / nearest.len() as f64),
        KnnVariant::Weighted => {
            let exact: Vec<usize> = nearest.iter().filter(|(d2, _)| *d2 == 0.0).map(|&(_, i)| i).collect();
            if !exact.is_empty() {
                return Ok(exact.iter().map(|&i| data.y[i]).sum::<f64>() / exact.len() as f64);
            }
            let (num, den) = nearest
                .iter()
                .fold((0.0, 0.0), |(n, d), &(d2, i)| (n + data.y[i] / d2, d + 1.0 / d2));
            Ok(num / den)
        }
    }
}

/// One pass of `w ← w − 2α(x(wᵀx − y) + λw)` from `w = 0`, in dataset order.
pub fn sgd_weights(data: &Dataset, alpha: f64, lambda: f64) -> Vec<f64> {
    sgd_weights_from(&vec![0.0; data.d()], data, alpha, lambda)
}

pub fn sgd_weights_from(w0: &[f64], data: &Dataset, alpha: f64, lambda: f64) -> Vec<f64> {
    let mut w = w0.to_vec();
    for i in 0..data.n() {
        let x = data.x.row(i);
        let err = dot(&w, x) - data.y[i];
        for (wk, xk) in w.iter_mut().zip(x) {
            *wk -= 2.0 * alpha * (xk * err + lambda * *wk);
        }
    }
    w
}

pub fn sgd_one_pass_predict(data: &Dataset, query: &[f64], alpha: f64, lambda: f64) -> Result<f64> {
    check_query(data, query)?;
    Ok(dot(&sgd_weights(data, alpha, lambda), query))
}

/// One batch step from `w₀ = 0`: `w = 2αXᵀY` (the `λ` term vanishes at 0).
pub fn gd_weights(data: &Dataset, alpha: f64, _lambda: f64) -> Vec<f64> {
    let mut w = vec![0.0; data.d()];
    for i in 0..data.n() {
        for (wk, xk) in w.iter_mut().zip(data.x.row(i)) {
            *wk += 2.0 * alpha * xk * data.y[i];
        }
    }
    w
}

pub fn gd_one_step_predict(data: &Dataset, query: &[f64], alpha: f64, lambda: f64) -> Result<f64> {
    check_query(data, query)?;
    Ok(dot(&gd_weights(data, alpha, lambda), query))
}

fn check_query(data: &Dataset, query: &[f64]) -> Result<()> {
    if query.len() != data.d() {
        return Err(Error::Dimension {
            context: "predict",
            expected: format!("query of length {}", data.d()),
            got: format!("{}", query.len()),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ols;

impl Predictor for Ols {
    fn name(&self) -> String {
        "ols".into()
    }
    fn kind(&self) -> PredictorKind {
        PredictorKind::ClosedFormLinear
    }
    fn predict(&self, data: &Dataset, query: &[f64], _: QueryKey) -> Result<f64> {
        ols_predict(data, query)
    }
    fn weights(&self, data: &Dataset) -> Option<Result<Vec<f64>>> {
        Some(ridge_weights(data, 0.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ridge {
    pub lambda: f64,
}

impl Predictor for Ridge {
    fn name(&self) -> String {
        format!("ridge({})", self.lambda)
    }
    fn kind(&self) -> PredictorKind {
        PredictorKind::ClosedFormLinear
    }
    fn predict(&self, data: &Dataset, query: &[f64], _: QueryKey) -> Result<f64> {
        ridge_predict(data, query, self.lambda)
    }
    fn weights(&self, data: &Dataset) -> Option<Result<Vec<f64>>> {
        Some(ridge_weights(data, self.lambda))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bayes {
    pub sigma2: f64,
    pub tau2: f64,
}

impl Predictor for Bayes {
    fn name(&self) -> String {
        format!("bayes({},{})", self.sigma2, self.tau2)
    }
    fn kind(&self) -> PredictorKind {
        PredictorKind::ClosedFormLinear
    }
    fn predict(&self, data: &Dataset, query: &[f64], _: QueryKey) -> Result<f64> {
        bayes_predict(data, query, self.sigma2, self.tau2)
    }
    fn weights(&self, data: &Dataset) -> Option<Result<Vec<f64>>> {
        Some(bayes_lambda(self.sigma2, self.tau2).and_then(|l| ridge_weights(data, l)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Knn {
    pub variant: KnnVariant,
    pub k: usize,
}

impl Predictor for Knn {
    fn name(&self) -> String {
        let v = match self.variant {
            KnnVariant::Uniform => "knn_uniform",
            KnnVariant::Weighted => "knn_weighted",
        };
        if self.k == DEFAULT_K {
            v.into()
        } else {
            format!("{v}({})", self.k)
        }
    }
    fn kind(&self) -> PredictorKind {
        PredictorKind::Procedural
    }
    fn predict(&self, data: &Dataset, query: &[f64], _: QueryKey) -> Result<f64> {
        knn_predict(data, query, self.variant, self.k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdOnePass {
    pub alpha: f64,
    pub lambda: f64,
}

impl Predictor for SgdOnePass {
    fn name(&self) -> String {
        format!("sgd({},{})", self.alpha, self.lambda)
    }
    fn kind(&self) -> PredictorKind {
        PredictorKind::Procedural
    }
    fn predict(&self, data: &Dataset, query: &[f64], _: QueryKey) -> Result<f64> {
        sgd_one_pass_predict(data, query, self.alpha, self.lambda)
    }
    fn weights(&self, data: &Dataset) -> Option<Result<Vec<f64>>> {
        Some(Ok(sgd_weights(data, self.alpha, self.lambda)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GdOneStep {
    pub alpha: f64,
    pub lambda: f64,
}

impl Predictor for GdOneStep {
    fn name(&self) -> String {
        format!("gd({},{})", self.alpha, self.lambda)
    }
    fn kind(&self) -> PredictorKind {
        PredictorKind::ClosedFormLinear
    }
    fn predict(&self, data: &Dataset, query: &[f64], _: QueryKey) -> Result<f64> {
        gd_one_step_predict(data, query, self.alpha, self.lambda)
    }
    fn weights(&self, data: &Dataset) -> Option<Result<Vec<f64>>> {
        Some(Ok(gd_weights(data, self.alpha, self.lambda)))
    }
}

/// Runs the compiled one-pass SGD transformer, compiling one program per
/// context size on first use. An empty context predicts 0.
pub struct CompiledSgd {
    pub alpha: f64,
    pub lambda: f64,
    cache: Mutex<HashMap<(usize, usize), Arc<CompiledProgram>>>,
}

impl CompiledSgd {
    pub fn new(alpha: f64, lambda: f64) -> Self {
        Self {
            alpha,
            lambda,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn program(&self, d: usize, n: usize) -> Result<Arc<CompiledProgram>> {
        let mut cache = self.cache.lock().expect("cache lock");
        if let Some(p) = cache.get(&(d, n)) {
            return Ok(Arc::clone(p));
        }
        let p = Arc::new(program_sgd_multi_step(d, n, self.alpha, self.lambda)?.compile()?);
        cache.insert((d, n), Arc::clone(&p));
        Ok(p)
    }
}

impl Predictor for CompiledSgd {
    fn name(&self) -> String {
        format!("compiled_sgd({},{})", self.alpha, self.lambda)
    }
    fn kind(&self) -> PredictorKind {
        PredictorKind::Procedural
    }
    fn predict(&self, data: &Dataset, query: &[f64], _: QueryKey) -> Result<f64> {
        check_query(data, query)?;
        if data.n() == 0 {
            return Ok(0.0);
        }
        let program = self.program(data.d(), data.n())?;
        Ok(program.run(&data.x, &data.y, query)?.output)
    }
}

/// First line of a prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub d: usize,
    pub sigma2: f64,
    pub tau2: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub task_id: u64,
    pub n_context: usize,
    #[serde(default)]
    pub query_index: usize,
    pub prediction: f64,
}

/// Predictions read from a JSON-lines dump: a [`DumpHeader`] line followed
/// by one [`DumpRecord`] per prediction, keyed by `(task_id, n_context,
/// query_index)`.
#[derive(Clone, Debug)]
pub struct ExternalDump {
    pub header: DumpHeader,
    pub label: String,
    records: HashMap<QueryKey, f64>,
}

impl ExternalDump {
    pub fn from_reader(reader: impl BufRead, label: &str) -> Result<Self> {
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Config(format!("{label}: empty prediction dump")))??;
        let header: DumpHeader =
            serde_json::from_str(&first).map_err(|e| Error::Config(format!("{label}: bad header: {e}")))?;
        let mut records = HashMap::new();
        for (no, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: DumpRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{label}: line {}: {e}", no + 2)))?;
            if !r.prediction.is_finite() {
                return Err(Error::Config(format!("{label}: line {}: non-finite prediction", no + 2)));
            }
            records.insert(
                QueryKey {
                    task_id: r.task_id,
                    n_context: r.n_context,
                    query_index: r.query_index,
                },
                r.prediction,
            );
        }
        Ok(Self {
            header,
            label: label.to_string(),
            records,
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let f = File::open(path)?;
        Self::from_reader(BufReader::new(f), &path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Predictor for ExternalDump {
    fn name(&self) -> String {
        format!("dump:{}", self.label)
    }
    fn kind(&self) -> PredictorKind {
        PredictorKind::ExternalDump
    }
    fn predict(&self, _: &Dataset, _: &[f64], key: QueryKey) -> Result<f64> {
        self.records.get(&key).copied().ok_or_else(|| {
            Error::Config(format!(
                "{}: no prediction for task {} with {} context examples, query {}",
                self.label, key.task_id, key.n_context, key.query_index
            ))
        })
    }
}

pub fn write_dump(out: &mut impl Write, header: &DumpHeader, records: &[DumpRecord]) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(header)?)?;
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Builds a predictor from its textual name:
/// `ols`, `ridge(λ)`, `bayes`, `bayes(σ²,τ²)`, `knn_uniform`, `knn_weighted`
/// (optionally `(k)`), `sgd(α[,λ])`, `gd(α[,λ])`, `compiled_sgd(α[,λ])` and
/// `dump:<path>`. Bare `bayes` takes σ² and τ² from the task distribution.
pub fn parse_predictor(spec: &str, sigma2: f64, tau2: f64) -> Result<Box<dyn Predictor>> {
    let spec = spec.trim();
    if let Some(path) = spec.strip_prefix("dump:") {
        return Ok(Box::new(ExternalDump::open(Path::new(path))?));
    }
    let (name, args) = match spec.find('(') {
        Some(open) => {
            let close = spec
                .rfind(')')
                .filter(|&c| c == spec.len() - 1)
                .ok_or_else(|| Error::Config(format!("unbalanced parentheses in predictor '{spec}'")))?;
            let args: std::result::Result<Vec<f64>, _> = spec[open + 1..close]
                .split(',')
                .map(|a| a.trim().parse::<f64>())
                .collect();
            let args = args.map_err(|e| Error::Config(format!("bad argument in predictor '{spec}': {e}")))?;
            (&spec[..open], args)
        }
        None => (spec, Vec::new()),
    };
    let arity = |lo: usize, hi: usize| -> Result<()> {
        if args.len() < lo || args.len() > hi {
            Err(Error::Config(format!("predictor '{name}' takes {lo}..={hi} arguments, got {}", args.len())))
        } else {
            Ok(())
        }
    };
    let arg = |i: usize, default: f64| args.get(i).copied().unwrap_or(default);
    let p: Box<dyn Predictor> = match name {
        "ols" => {
            arity(0, 0)?;
            Box::new(Ols)
        }
        "ridge" => {
            arity(1, 1)?;
            Box::new(Ridge { lambda: args[0] })
        }
        "bayes" => {
            arity(0, 2)?;
            if args.len() == 1 {
                return Err(Error::Config("bayes takes either no arguments or (sigma2, tau2)".into()));
            }
            let b = Bayes {
                sigma2: arg(0, sigma2),
                tau2: arg(1, tau2),
            };
            bayes_lambda(b.sigma2, b.tau2).map_err(|e| Error::Config(e.to_string()))?;
            Box::new(b)
        }
        "knn_uniform" | "knn_weighted" => {
            arity(0, 1)?;
            let k = arg(0, DEFAULT_K as f64);
            if k < 1.0 || k.fract() != 0.0 {
                return Err(Error::Config(format!("knn k must be a positive integer, got {k}")));
            }
            let variant = if name == "knn_uniform" {
                KnnVariant::Uniform
            } else {
                KnnVariant::Weighted
            };
            Box::new(Knn { variant, k: k as usize })
        }
        "sgd" => {
            arity(1, 2)?;
            Box::new(SgdOnePass {
                alpha: args[0],
                lambda: arg(1, 0.0),
            })
        }
        "gd" => {
            arity(1, 2)?;
            Box::new(GdOneStep {
                alpha: args[0],
                lambda: arg(1, 0.0),
            })
        }
        "compiled_sgd" => {
            arity(1, 2)?;
            Box::new(CompiledSgd::new(args[0], arg(1, 0.0)))
        }
        other => return Err(Error::Config(format!("unknown predictor '{other}'"))),
    };
    if let Some(bad) = args.iter().find(|a| !a.is_finite()) {
        return Err(Error::Config(format!("non-finite argument {bad} in predictor '{spec}'")));
    }
    if name == "ridge" && args[0] < 0.0 {
        return Err(Error::Config(format!("ridge lambda must be >= 0, got {}", args[0])));
    }
    Ok(p)
}
