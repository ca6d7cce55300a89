//! Behavioral distances between predictors over sampled regression tasks.
//!
//! Task `i` draws its context from stream `2i` and its queries from stream
//! `2i + 1` of the master seed, so a task's first `n` examples do not depend
//! on how many were requested and serial and parallel runs agree bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, solve_least_squares, DenseMatrix};
use crate::predictors::{Dataset, Predictor, QueryKey};
use crate::rng;

/// `w ~ N(0, τ²I)`, `x ~ N(0, I)`, `y = wᵀx + ε` with `ε ~ N(0, σ²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    pub d: usize,
    pub sigma2: f64,
    pub tau2: f64,
    pub seed: u64,
}

impl TaskDistribution {
    pub fn new(d: usize, sigma2: f64, tau2: f64, seed: u64) -> Result<Self> {
        if d == 0 || !(sigma2 >= 0.0) || !(tau2 >= 0.0) || !sigma2.is_finite() || !tau2.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "task distribution needs d >= 1 and finite sigma2, tau2 >= 0; got d={d}, sigma2={sigma2}, tau2={tau2}"
            )));
        }
        Ok(Self { d, sigma2, tau2, seed })
    }

    pub fn sample(&self, task_id: u64, n_context: usize, n_queries: usize) -> RegressionTask {
        let d = self.d;
        let mut ctx = rng::stream(self.seed, 2 * task_id);
        let w_true = rng::normal_vec(&mut ctx, d, self.tau2.sqrt());
        let mut xs = Vec::with_capacity(n_context * d);
        let mut ys = Vec::with_capacity(n_context);
        for _ in 0..n_context {
            let x = rng::normal_vec(&mut ctx, d, 1.0);
            let eps = rng::normal_vec(&mut ctx, 1, self.sigma2.sqrt())[0];
            ys.push(dot(&w_true, &x) + eps);
            xs.extend(x);
        }
        let mut q = rng::stream(self.seed, 2 * task_id + 1);
        let mut qs = Vec::with_capacity(n_queries * d);
        let mut query_noise = Vec::with_capacity(n_queries);
        for _ in 0..n_queries {
            qs.extend(rng::normal_vec(&mut q, d, 1.0));
            query_noise.push(rng::normal_vec(&mut q, 1, self.sigma2.sqrt())[0]);
        }
        RegressionTask {
            task_id,
            w_true,
            context: Dataset {
                x: DenseMatrix::from_vec(n_context, d, xs).expect("sampled context"),
                y: ys,
            },
            queries: DenseMatrix::from_vec(n_queries, d, qs).expect("sampled queries"),
            query_noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTask {
    pub task_id: u64,
    pub w_true: Vec<f64>,
    pub context: Dataset,
    /// Fresh points from `p(x)`, never taken from the context.
    pub queries: DenseMatrix,
    /// Label noise for the queries, used only by the Bayes risk.
    pub query_noise: Vec<f64>,
}

impl RegressionTask {
    pub fn query_target(&self, q: usize) -> f64 {
        dot(&self.w_true, self.queries.row(q)) + self.query_noise[q]
    }
}

/// Defaults: 2048 tasks, 8 queries per task, distances divided by `d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarlo {
    pub n_tasks: usize,
    pub n_queries: usize,
    pub normalize: bool,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        Self {
            n_tasks: 2048,
            n_queries: 8,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub a1: String,
    pub a2: String,
    /// Context size, or `None` for region averages.
    pub n_context: Option<usize>,
    pub region: Option<String>,
    pub value: f64,
    /// Value before division by `d`.
    pub raw_value: f64,
    /// Standard error over tasks.
    pub stderr: f64,
    pub n_samples: usize,
    pub normalized: bool,
    pub d: usize,
    pub sigma2: f64,
    pub tau2: f64,
    pub seed: u64,
}

/// Mean and standard error of per-task values, summed in task order.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn check_mc(mc: &MonteCarlo) -> Result<()> {
    if mc.n_tasks == 0 || mc.n_queries == 0 {
        return Err(Error::InvalidArgument("Monte Carlo sizes must be >= 1".into()));
    }
    Ok(())
}

/// Predictions of `a` at every row of `points`, using its weight vector when
/// it has one.
pub fn predict_points(a: &dyn Predictor, data: &Dataset, points: &DenseMatrix, task_id: u64) -> Result<Vec<f64>> {
    if let Some(w) = a.weights(data) {
        let w = w?;
        return Ok((0..points.rows()).map(|q| dot(&w, points.row(q))).collect());
    }
    (0..points.rows())
        .map(|q| {
            let key = QueryKey {
                task_id,
                n_context: data.n(),
                query_index: q,
            };
            let p = a.predict(data, points.row(q), key)?;
            if !p.is_finite() {
                return Err(Error::NonFinite {
                    context: "predictor output".into(),
                });
            }
            Ok(p)
        })
        .collect()
}

fn per_task<F>(mc: &MonteCarlo, f: F) -> Result<Vec<f64>>
where
    F: Fn(u64) -> Result<f64> + Sync + Send,
{
    (0..mc.n_tasks as u64).into_par_iter().map(f).collect()
}

#[allow(clippy::too_many_arguments)]
fn report(
    metric: &str,
    a1: &dyn Predictor,
    a2: &dyn Predictor,
    n_context: Option<usize>,
    region: Option<String>,
    values: &[f64],
    dist: &TaskDistribution,
    normalize: bool,
    already_normalized: bool,
) -> MetricReport {
    let (mean, se) = mean_stderr(values);
    let d = dist.d as f64;
    let (value, raw, se) = match (normalize, already_normalized) {
        (true, false) => (mean / d, mean, se / d),
        (true, true) => (mean, mean * d, se),
        (false, _) => (mean, mean, se),
    };
    MetricReport {
        metric: metric.into(),
        a1: a1.name(),
        a2: a2.name(),
        n_context,
        region,
        value,
        raw_value: raw,
        stderr: se,
        n_samples: values.len(),
        normalized: normalize,
        d: dist.d,
        sigma2: dist.sigma2,
        tau2: dist.tau2,
        seed: dist.seed,
    }
}

fn task_spd(a1: &dyn Predictor, a2: &dyn Predictor, task: &RegressionTask) -> Result<f64> {
    let p1 = predict_points(a1, &task.context, &task.queries, task.task_id)?;
    let p2 = predict_points(a2, &task.context, &task.queries, task.task_id)?;
    Ok(p1.iter().zip(&p2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p1.len() as f64)
}

/// `E[(A1(D)(x') − A2(D)(x'))²]` over tasks with `n_context` examples.
pub fn spd(
    a1: &dyn Predictor,
    a2: &dyn Predictor,
    dist: &TaskDistribution,
    n_context: usize,
    mc: &MonteCarlo,
) -> Result<MetricReport> {
    check_mc(mc)?;
    let values = per_task(mc, |id| task_spd(a1, a2, &dist.sample(id, n_context, mc.n_queries)))?;
    Ok(report("spd", a1, a2, Some(n_context), None, &values, dist, mc.normalize, false))
}

/// Least-squares fit of `preds ≈ pool·w`, with its R².
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    pub w: Vec<f64>,
    pub r_squared: f64,
    /// Whether `w` came from the predictor itself rather than a fit.
    pub exact: bool,
}

/// Centered R²; a constant target scores 1 when fitted exactly and 0
/// otherwise.
pub fn r_squared(targets: &[f64], fitted: &[f64]) -> f64 {
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = targets.iter().zip(fitted).map(|(t, f)| (t - f) * (t - f)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

pub fn fit_linear(pool: &DenseMatrix, preds: &[f64]) -> Result<LinearFit> {
    let w = solve_least_squares(pool, preds, 0.0)?;
    let fitted: Vec<f64> = (0..pool.rows()).map(|i| dot(&w, pool.row(i))).collect();
    Ok(LinearFit {
        r_squared: r_squared(preds, &fitted),
        w,
        exact: false,
    })
}

/// The weight vector best explaining `a`'s predictions on `pool`. Predictors
/// that carry a weight vector return it unchanged.
pub fn implied_weights(a: &dyn Predictor, data: &Dataset, pool: &DenseMatrix, task_id: u64) -> Result<LinearFit> {
    if let Some(w) = a.weights(data) {
        return Ok(LinearFit {
            w: w?,
            r_squared: 1.0,
            exact: true,
        });
    }
    fit_linear(pool, &predict_points(a, data, pool, task_id)?)
}

/// `E‖ŵ₁ − ŵ₂‖²` over tasks; the query pool has `pool_size` points.
pub fn ilwd(
    a1: &dyn Predictor,
    a2: &dyn Predictor,
    dist: &TaskDistribution,
    n_context: usize,
    pool_size: usize,
    mc: &MonteCarlo,
) -> Result<MetricReport> {
    check_mc(mc)?;
    let values = per_task(mc, |id| {
        let task = dist.sample(id, n_context, pool_size);
        let w1 = implied_weights(a1, &task.context, &task.queries, id)?.w;
        let w2 = implied_weights(a2, &task.context, &task.queries, id)?.w;
        Ok(w1.iter().zip(&w2).map(|(a, b)| (a - b) * (a - b)).sum())
    })?;
    Ok(report("ilwd", a1, a2, Some(n_context), None, &values, dist, mc.normalize, false))
}

/// Dimension-normalized SPD averaged over `n = 1..d−1`. The standard error
/// is over tasks, each task contributing its average over the region.
pub fn mspd(a1: &dyn Predictor, a2: &dyn Predictor, dist: &TaskDistribution, mc: &MonteCarlo) -> Result<MetricReport> {
    check_mc(mc)?;
    let d = dist.d;
    if d < 2 {
        return Err(Error::InvalidArgument("mspd needs d >= 2 for a non-empty underdetermined region".into()));
    }
    let values = per_task(mc, |id| {
        let full = dist.sample(id, d - 1, mc.n_queries);
        let mut sum = 0.0;
        for n in 1..d {
            let task = RegressionTask {
                context: full.context.prefix(n),
                ..full.clone()
            };
            sum += task_spd(a1, a2, &task)? / d as f64;
        }
        Ok(sum / (d - 1) as f64)
    })?;
    Ok(report(
        "mspd",
        a1,
        a2,
        None,
        Some(format!("1..{}", d - 1)),
        &values,
        dist,
        true,
        true,
    ))
}

/// Average R² of the linear fit to `a`'s predictions on a `pool_size` pool.
pub fn r_squared_linearity(
    a: &dyn Predictor,
    dist: &TaskDistribution,
    n_context: usize,
    pool_size: usize,
    mc: &MonteCarlo,
) -> Result<MetricReport> {
    check_mc(mc)?;
    if pool_size < 2 * dist.d {
        return Err(Error::InvalidArgument(format!(
            "R² linearity needs a pool of at least 2d = {} points, got {pool_size}",
            2 * dist.d
        )));
    }
    let values = per_task(mc, |id| {
        let task = dist.sample(id, n_context, pool_size);
        let preds = predict_points(a, &task.context, &task.queries, id)?;
        Ok(fit_linear(&task.queries, &preds)?.r_squared)
    })?;
    Ok(report("r2_linearity", a, a, Some(n_context), None, &values, dist, false, false))
}

/// `E[(y' − A(D)(x'))²]` against fresh noisy labels, averaged over the
/// context sizes in `n_range`. Every predictor sees the same tasks, so
/// differences between predictors have low variance.
pub fn bayes_risk(
    a: &dyn Predictor,
    dist: &TaskDistribution,
    n_range: std::ops::RangeInclusive<usize>,
    mc: &MonteCarlo,
) -> Result<MetricReport> {
    check_mc(mc)?;
    let (lo, hi) = (*n_range.start(), *n_range.end());
    if lo > hi {
        return Err(Error::InvalidArgument(format!("empty context range {lo}..={hi}")));
    }
    let values = per_task(mc, |id| {
        let full = dist.sample(id, hi, mc.n_queries);
        let mut sum = 0.0;
        for n in lo..=hi {
            let data = full.context.prefix(n);
            let preds = predict_points(a, &data, &full.queries, id)?;
            let se: f64 = preds
                .iter()
                .enumerate()
                .map(|(q, p)| (full.query_target(q) - p).powi(2))
                .sum();
            sum += se / preds.len() as f64;
        }
        Ok(sum / (hi - lo + 1) as f64)
    })?;
    let mut r = report(
        "bayes_risk",
        a,
        a,
        None,
        Some(format!("{lo}..{hi}")),
        &values,
        dist,
        false,
        false,
    );
    r.a2 = "fresh_labels".into();
    Ok(r)
}

/// `2^k` for `k` in `lo..=hi`.
pub fn log2_grid(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|k| 2f64.powi(k)).collect()
}

/// Index of the grid point closest to `target` in log scale; ties go to the
/// smaller index.
pub fn nearest_in_log(grid: &[f64], target: f64) -> usize {
    let mut best = 0;
    for (i, g) in grid.iter().enumerate() {
        if (g.ln() - target.ln()).abs() < (grid[best].ln() - target.ln()).abs() {
            best = i;
        }
    }
    best
}

/// Index of the smallest value; ties go to the smaller index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

pub const CSV_HEADER: &str = "metric,a1,a2,n_context,region,value,raw_value,stderr,n_samples,normalized,d,sigma2,tau2,seed";

/// One line per report; floats use the shortest round-tripping form.
pub fn to_csv(reports: &[MetricReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER.split(','))?;
    for r in reports {
        w.write_record([
            r.metric.clone(),
            r.a1.clone(),
            r.a2.clone(),
            r.n_context.map(|n| n.to_string()).unwrap_or_default(),
            r.region.clone().unwrap_or_default(),
            r.value.to_string(),
            r.raw_value.to_string(),
            r.stderr.to_string(),
            r.n_samples.to_string(),
            r.normalized.to_string(),
            r.d.to_string(),
            r.sigma2.to_string(),
            r.tau2.to_string(),
            r.seed.to_string(),
        ])?;
    }
    csv_string(w)
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// A task as handed to an external model: context, queries and the keys its
/// predictions must carry in a dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: u64,
    pub n_context: usize,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub queries: Vec<Vec<f64>>,
}

pub fn task_records(dist: &TaskDistribution, n_context: usize, mc: &MonteCarlo) -> Vec<TaskRecord> {
    (0..mc.n_tasks as u64)
        .map(|id| {
            let t = dist.sample(id, n_context, mc.n_queries);
            TaskRecord {
                task_id: id,
                n_context,
                x: t.context.x.to_rows(),
                y: t.context.y,
                queries: t.queries.to_rows(),
            }
        })
        .collect()
}

/// Uniform draws in `[−h, h]` for every entry, used where the compiled
/// programs need inputs inside their accuracy domain.
pub fn uniform_task(seed: u64, task_id: u64, d: usize, n_context: usize, half_width: f64) -> (Dataset, Vec<f64>) {
    let mut r = rng::stream(seed, task_id);
    let xs = rng::uniform_vec(&mut r, n_context * d, half_width);
    let ys = rng::uniform_vec(&mut r, n_context, half_width);
    let query = rng::uniform_vec(&mut r, d, half_width);
    (
        Dataset {
            x: DenseMatrix::from_vec(n_context, d, xs).expect("uniform context"),
            y: ys,
        },
        query,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictors::{Ols, Ridge};

    #[test]
    fn prefixes_agree_across_sizes() {
        let dist = TaskDistribution::new(3, 0.5, 1.0, 11).unwrap();
        let a = dist.sample(4, 2, 3);
        let b = dist.sample(4, 6, 5);
        assert_eq!(a.w_true, b.w_true);
        assert_eq!(a.context, b.context.prefix(2));
        assert_eq!(a.queries, b.queries.slice_rows(0, 3));
    }

    #[test]
    fn self_distance_is_zero() {
        let dist = TaskDistribution::new(4, 0.25, 1.0, 3).unwrap();
        let mc = MonteCarlo {
            n_tasks: 16,
            ..Default::default()
        };
        assert_eq!(spd(&Ols, &Ols, &dist, 2, &mc).unwrap().value, 0.0);
        assert_eq!(ilwd(&Ridge { lambda: 0.3 }, &Ridge { lambda: 0.3 }, &dist, 5, 8, &mc).unwrap().value, 0.0);
    }

    #[test]
    fn r_squared_edge_cases() {
        assert_eq!(r_squared(&[2.0, 2.0], &[2.0, 2.0]), 1.0);
        assert_eq!(r_squared(&[2.0, 2.0], &[2.0, 1.0]), 0.0);
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
    }

    #[test]
    fn grid_helpers() {
        let g = log2_grid(-6, 6);
        assert_eq!(g.len(), 13);
        assert_eq!(nearest_in_log(&g, 0.25), 4);
        assert_eq!(nearest_in_log(&g, 4.0), 8);
        assert_eq!(argmin(&[3.0, 1.0, 1.0]), 1);
    }

    #[test]
    fn csv_quotes_commas() {
        let r = MetricReport {
            metric: "spd".into(),
            a1: "sgd(0.1,0)".into(),
            a2: "ols".into(),
            n_context: Some(3),
            region: None,
            value: 0.5,
            raw_value: 1.0,
            stderr: 0.1,
            n_samples: 2,
            normalized: true,
            d: 2,
            sigma2: 0.25,
            tau2: 1.0,
            seed: 7,
        };
        let csv = to_csv(&[r]).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "spd,\"sgd(0.1,0)\",ols,3,,0.5,1,0.1,2,true,2,0.25,1,7");
    }
}
