use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::Serialize;
use serde_json::{json, Value};

use iclc::compiler::{verify_model, CompiledProgram, ProgramSpec, RawProgram};
use iclc::metrics::{
    argmin, bayes_risk, ilwd, log2_grid, mspd, nearest_in_log, r_squared_linearity, spd, to_csv, MetricReport,
    TaskDistribution,
};
use iclc::predictors::{parse_predictor, Bayes, Predictor, Ridge};
use iclc::probe::{make_control_traces, make_main_traces, probe_csv, probe_report, write_trace_dump};
use iclc::transformer::{Model, TransformerParams};

use crate::config::{
    read_json, CliError, CliResult, MetricKind, MetricsConfig, ProbeRunConfig, VerifyConfig,
};
use crate::{GlobalArgs, VerifyArgs};

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes `body` to `--out` (plus a metadata sidecar) or to stdout.
fn emit(global: &GlobalArgs, body: &str, meta: Value) -> CliResult<()> {
    match &global.out {
        Some(out) => {
            write_file(out, body)?;
            let meta = serde_json::to_string_pretty(&meta).map_err(runtime)?;
            write_file(&meta_path(out), &(meta + "\n"))
        }
        None => {
            std::io::stdout().write_all(body.as_bytes()).map_err(runtime)?;
            Ok(())
        }
    }
}

fn load_program(path: &Path) -> CliResult<RawProgram> {
    let value: Value = read_json(path)?;
    if value.get("kind").is_some() {
        let spec: ProgramSpec =
            serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(spec.build()?)
    } else {
        let text = serde_json::to_string(&value).map_err(runtime)?;
        Ok(RawProgram::from_json(&text)?)
    }
}

pub fn compile(global: &GlobalArgs) -> CliResult<ExitCode> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("compile needs --config <program.json>".into()))?;
    let program = load_program(path)?;
    let compiled: CompiledProgram = program.compile()?;
    let layout = &compiled.layout;
    println!(
        "{}: {} layers, hidden {} = {} program rows + {} scratch + 4 reserved + {} positions",
        if program.name.is_empty() { "program" } else { &program.name },
        compiled.depth(),
        layout.hidden,
        layout.program_rows,
        layout.scratch_len(),
        layout.t_max
    );
    println!("params sha256 {}", compiled.params_hash()?);
    if let Some(out) = &global.out {
        write_file(out, &compiled.params().to_json()?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn program_from_flags(args: &VerifyArgs, base: Option<ProgramSpec>) -> CliResult<ProgramSpec> {
    let d = args.d;
    let mut spec = match (args.program.as_deref(), base) {
        (Some(kind), _) => {
            let d = d.unwrap_or(2);
            match kind {
                "sgd_step" => ProgramSpec::SgdStep {
                    d,
                    w0: None,
                    alpha: 0.3,
                    lambda: 0.1,
                },
                "sgd_multi_step" => ProgramSpec::SgdMultiStep {
                    d,
                    n: 3,
                    alpha: 0.3,
                    lambda: 0.1,
                },
                "sherman_morrison" => ProgramSpec::ShermanMorrison { d, lambda: 1.0 },
                other => return Err(CliError::Config(format!("unknown program '{other}'"))),
            }
        }
        (None, Some(spec)) => spec,
        (None, None) => {
            return Err(CliError::Config(
                "verify needs a program, from --program or the config's \"program\"".into(),
            ))
        }
    };
    match &mut spec {
        ProgramSpec::SgdStep { d: sd, alpha, lambda, w0 } => {
            if let Some(v) = d {
                *sd = v;
                if w0.as_ref().is_some_and(|w| w.len() != v) {
                    *w0 = None;
                }
            }
            *alpha = args.alpha.unwrap_or(*alpha);
            *lambda = args.lambda.unwrap_or(*lambda);
        }
        ProgramSpec::SgdMultiStep { d: sd, n, alpha, lambda } => {
            *sd = d.unwrap_or(*sd);
            *n = args.n.unwrap_or(*n);
            *alpha = args.alpha.unwrap_or(*alpha);
            *lambda = args.lambda.unwrap_or(*lambda);
        }
        ProgramSpec::ShermanMorrison { d: sd, lambda } => {
            *sd = d.unwrap_or(*sd);
            *lambda = args.lambda.unwrap_or(*lambda);
        }
    }
    Ok(spec)
}

pub fn verify(global: &GlobalArgs, args: &VerifyArgs) -> CliResult<ExitCode> {
    let mut cfg: VerifyConfig = match &global.config {
        Some(p) => read_json(p)?,
        None => VerifyConfig::default(),
    };
    let spec = program_from_flags(args, cfg.program.take())?;
    cfg.program = Some(spec.clone());
    cfg.seed = global.seed.unwrap_or(cfg.seed);
    cfg.trials = args.trials.unwrap_or(cfg.trials);
    cfg.tolerance = global.tolerance.or(cfg.tolerance);
    if args.params.is_some() {
        cfg.params = args.params.clone();
    }
    let tolerance = cfg.tolerance.unwrap_or_else(|| spec.default_tolerance());
    let program = spec.build()?;
    let model = match &cfg.params {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            Model::new(TransformerParams::from_json(&text)?)?
        }
        None => program.compile()?.model().clone(),
    };
    let report = verify_model(&spec, &model, program.output, cfg.trials, cfg.seed, tolerance, 0.1)?;
    let body = serde_json::to_string_pretty(&report).map_err(runtime)? + "\n";
    match &global.out {
        Some(out) => write_file(out, &body)?,
        None => print!("{body}"),
    }
    eprintln!(
        "{} {} d={}: max relative error {:e} over {} trials (tolerance {:e})",
        if report.passed { "PASS" } else { "FAIL" },
        spec.kind(),
        spec.d(),
        report.max_relative_error,
        report.trials,
        tolerance
    );
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn parse_all(names: &[String], sigma2: f64, tau2: f64) -> CliResult<Vec<Box<dyn Predictor>>> {
    names
        .iter()
        .map(|n| parse_predictor(n, sigma2, tau2).map_err(CliError::from))
        .collect()
}

#[derive(Serialize)]
struct GridSummary {
    sigma2: f64,
    tau2: f64,
    lambdas: Vec<f64>,
    nearest_to_bayes: usize,
    mspd_argmin: usize,
    bayes_risk_argmin: usize,
}

pub fn metrics(global: &GlobalArgs) -> CliResult<ExitCode> {
    let mut cfg: MetricsConfig = match &global.config {
        Some(p) => read_json(p)?,
        None => MetricsConfig::default(),
    };
    cfg.seed = global.seed.unwrap_or(cfg.seed);
    let d = cfg.d;
    if d == 0 {
        return Err(CliError::Config("d must be >= 1".into()));
    }
    let n_values: Vec<usize> = if cfg.n_context.is_empty() {
        (1..=2 * d).collect()
    } else {
        cfg.n_context.clone()
    };
    let pool = cfg.pool_size.unwrap_or(2 * d);
    let risk_range = cfg.bayes_risk_range.unwrap_or([1, d.saturating_sub(1).max(1)]);
    let mc = cfg.monte_carlo;
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut grids = Vec::new();
    for noise in &cfg.noise {
        let dist = TaskDistribution::new(d, noise.sigma2, noise.tau2, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
        let pairs: Vec<(Box<dyn Predictor>, Box<dyn Predictor>)> = cfg
            .pairs
            .iter()
            .map(|[a, b]| {
                Ok((
                    parse_predictor(a, noise.sigma2, noise.tau2)?,
                    parse_predictor(b, noise.sigma2, noise.tau2)?,
                ))
            })
            .collect::<Result<_, iclc::Error>>()?;
        let singles = parse_all(&cfg.predictors, noise.sigma2, noise.tau2)?;
        for kind in &cfg.metrics {
            match kind {
                MetricKind::Spd | MetricKind::Ilwd => {
                    for (a, b) in &pairs {
                        for &n in &n_values {
                            reports.push(if *kind == MetricKind::Spd {
                                spd(a.as_ref(), b.as_ref(), &dist, n, &mc)?
                            } else {
                                ilwd(a.as_ref(), b.as_ref(), &dist, n, pool, &mc)?
                            });
                        }
                    }
                }
                MetricKind::Mspd => {
                    for (a, b) in &pairs {
                        reports.push(mspd(a.as_ref(), b.as_ref(), &dist, &mc)?);
                    }
                }
                MetricKind::R2 => {
                    for a in &singles {
                        for &n in &n_values {
                            reports.push(r_squared_linearity(a.as_ref(), &dist, n, pool, &mc)?);
                        }
                    }
                }
                MetricKind::BayesRisk => {
                    for a in &singles {
                        reports.push(bayes_risk(a.as_ref(), &dist, risk_range[0]..=risk_range[1], &mc)?);
                    }
                }
            }
        }
        if let Some([lo, hi]) = cfg.ridge_grid {
            let lambdas = log2_grid(lo, hi);
            let bayes = Bayes {
                sigma2: noise.sigma2,
                tau2: noise.tau2,
            };
            let mut m = Vec::new();
            let mut r = Vec::new();
            for &lambda in &lambdas {
                let ridge = Ridge { lambda };
                let rep = mspd(&ridge, &bayes, &dist, &mc)?;
                m.push(rep.value);
                reports.push(rep);
                let rep = bayes_risk(&ridge, &dist, risk_range[0]..=risk_range[1], &mc)?;
                r.push(rep.value);
                reports.push(rep);
            }
            grids.push(GridSummary {
                sigma2: noise.sigma2,
                tau2: noise.tau2,
                nearest_to_bayes: nearest_in_log(&lambdas, noise.sigma2 / noise.tau2),
                mspd_argmin: argmin(&m),
                bayes_risk_argmin: argmin(&r),
                lambdas,
            });
        }
    }
    let csv = to_csv(&reports)?;
    let meta = json!({
        "command": "metrics",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "ridge_grid_summary": grids,
    });
    emit(global, &csv, meta)?;
    Ok(ExitCode::SUCCESS)
}

pub fn probe(global: &GlobalArgs) -> CliResult<ExitCode> {
    let mut cfg: ProbeRunConfig = match &global.config {
        Some(p) => read_json(p)?,
        None => ProbeRunConfig::default(),
    };
    cfg.seed = global.seed.unwrap_or(cfg.seed);
    cfg.probe.train.seed = cfg.seed;
    let n_tasks = cfg.probe.n_train + cfg.probe.n_val;
    let main = make_main_traces(cfg.d, cfg.alpha, cfg.lambda, n_tasks, cfg.seed)?;
    if let Some(path) = &cfg.trace_dump {
        let mut f = fs::File::create(path).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
        write_trace_dump(&main, &mut f)?;
    }
    let layers: Vec<usize> = if cfg.layers.is_empty() {
        (0..=main.depth()).collect()
    } else {
        cfg.layers.clone()
    };
    let mut rows = probe_report(&main, &layers, &cfg.targets, &cfg.n_range, &cfg.probe)?;
    let mut hashes = vec![json!({"model": "main", "program_hash": main.program_hash})];
    if cfg.control {
        let control = make_control_traces(cfg.d, cfg.lambda, n_tasks, cfg.seed.wrapping_add(1))?;
        rows.extend(probe_report(&control, &layers, &cfg.targets, &cfg.n_range, &cfg.probe)?);
        hashes.push(json!({"model": "control", "program_hash": control.program_hash}));
    }
    let csv = probe_csv(&rows)?;
    let meta = json!({
        "command": "probe",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "programs": hashes,
    });
    emit(global, &csv, meta)?;
    Ok(ExitCode::SUCCESS)
}
