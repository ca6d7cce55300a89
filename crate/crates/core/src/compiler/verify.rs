//! Compiled programs against their closed-form references on random tasks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::uniform_task;
use crate::predictors::{ridge_predict, sgd_one_pass_predict, sgd_weights_from, Dataset};
use crate::transformer::{encode_task, Model};

use super::library::{program_sgd_multi_step, program_sgd_step, program_sherman_morrison};
use super::program::{params_hash, OutputCell, RawProgram};

/// A library program by name and parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProgramSpec {
    SgdStep {
        d: usize,
        /// Defaults to zeros.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        w0: Option<Vec<f64>>,
        alpha: f64,
        #[serde(default)]
        lambda: f64,
    },
    SgdMultiStep {
        d: usize,
        n: usize,
        alpha: f64,
        #[serde(default)]
        lambda: f64,
    },
    ShermanMorrison {
        d: usize,
        lambda: f64,
    },
}

impl ProgramSpec {
    pub fn d(&self) -> usize {
        match self {
            ProgramSpec::SgdStep { d, .. } | ProgramSpec::SgdMultiStep { d, .. } | ProgramSpec::ShermanMorrison { d, .. } => {
                *d
            }
        }
    }

    pub fn n_context(&self) -> usize {
        match self {
            ProgramSpec::SgdMultiStep { n, .. } => *n,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ProgramSpec::SgdStep { .. } => "sgd_step",
            ProgramSpec::SgdMultiStep { .. } => "sgd_multi_step",
            ProgramSpec::ShermanMorrison { .. } => "sherman_morrison",
        }
    }

    fn w0(&self) -> Vec<f64> {
        match self {
            ProgramSpec::SgdStep { w0: Some(w), .. } => w.clone(),
            _ => vec![0.0; self.d()],
        }
    }

    pub fn build(&self) -> Result<RawProgram> {
        match self {
            ProgramSpec::SgdStep { d, alpha, lambda, .. } => program_sgd_step(*d, &self.w0(), *alpha, *lambda),
            ProgramSpec::SgdMultiStep { d, n, alpha, lambda } => program_sgd_multi_step(*d, *n, *alpha, *lambda),
            ProgramSpec::ShermanMorrison { d, lambda } => program_sherman_morrison(*d, *lambda),
        }
    }

    /// Relative tolerance each construction is expected to meet on inputs in
    /// `[−0.1, 0.1]`.
    pub fn default_tolerance(&self) -> f64 {
        match self {
            ProgramSpec::SgdStep { .. } => 1e-3,
            ProgramSpec::SgdMultiStep { .. } => 2e-3,
            ProgramSpec::ShermanMorrison { .. } => 1e-2,
        }
    }

    /// The exact prediction the compiled program approximates.
    pub fn oracle(&self, data: &Dataset, query: &[f64]) -> Result<f64> {
        match self {
            ProgramSpec::SgdStep { alpha, lambda, .. } => {
                let w = sgd_weights_from(&self.w0(), data, *alpha, *lambda);
                Ok(w.iter().zip(query).map(|(a, b)| a * b).sum())
            }
            ProgramSpec::SgdMultiStep { alpha, lambda, .. } => sgd_one_pass_predict(data, query, *alpha, *lambda),
            ProgramSpec::ShermanMorrison { lambda, .. } => ridge_predict(data, query, *lambda),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub program: ProgramSpec,
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
    pub worst_trial: usize,
    pub max_absolute_error: f64,
    pub passed: bool,
    pub params_hash: String,
}

/// Runs `trials` tasks with every entry uniform in `[−half_width,
/// half_width]` through `model` and compares the output cell with the
/// oracle. The relative error is `|out − want| / |want|`.
pub fn verify_model(
    spec: &ProgramSpec,
    model: &Model,
    output: OutputCell,
    trials: usize,
    seed: u64,
    tolerance: f64,
    half_width: f64,
) -> Result<VerifyReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("verify needs at least one trial".into()));
    }
    let (d, n) = (spec.d(), spec.n_context());
    let errors: Vec<(f64, f64)> = (0..trials as u64)
        .into_par_iter()
        .map(|id| {
            let (data, query) = uniform_task(seed, id, d, n, half_width);
            let want = spec.oracle(&data, &query)?;
            let tokens = encode_task(&data.x, &data.y, &query)?;
            let trace = model.forward(&tokens)?;
            let got = trace.output()[(output.row, output.column_index(tokens.cols()))];
            let abs = (got - want).abs();
            Ok((abs / want.abs(), abs))
        })
        .collect::<Result<_>>()?;
    let mut worst = 0;
    for (i, e) in errors.iter().enumerate() {
        // NaN counts as worst.
        if !(e.0 <= errors[worst].0) {
            worst = i;
        }
    }
    let max_rel = errors[worst].0;
    let mean_rel = errors.iter().map(|e| e.0).sum::<f64>() / trials as f64;
    let max_abs = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(VerifyReport {
        program: spec.clone(),
        trials,
        seed,
        tolerance,
        max_relative_error: max_rel,
        mean_relative_error: mean_rel,
        worst_trial: worst,
        max_absolute_error: max_abs,
        passed: max_rel <= tolerance,
        params_hash: params_hash(model.params())?,
    })
}

/// Compiles `spec` and verifies the result.
pub fn verify_program(spec: &ProgramSpec, trials: usize, seed: u64, tolerance: f64) -> Result<VerifyReport> {
    let compiled = spec.build()?.compile()?;
    verify_model(
        spec,
        compiled.model(),
        compiled.program.output,
        trials,
        seed,
        tolerance,
        0.1,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_json_round_trip() {
        let s: ProgramSpec = serde_json::from_str(r#"{"kind":"sgd_step","d":2,"alpha":0.3}"#).unwrap();
        assert_eq!(
            s,
            ProgramSpec::SgdStep {
                d: 2,
                w0: None,
                alpha: 0.3,
                lambda: 0.0
            }
        );
        assert!(serde_json::from_str::<ProgramSpec>(r#"{"kind":"sgd_step","d":2,"alpha":0.3,"bogus":1}"#).is_err());
    }

    #[test]
    fn small_sgd_verification_passes() {
        let spec = ProgramSpec::SgdStep {
            d: 2,
            w0: None,
            alpha: 0.3,
            lambda: 0.1,
        };
        let r = verify_program(&spec, 20, 1, 1e-3).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
