use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{random_test_function, trial_rng, ExperimentConfig, Report};
use crate::engine::{sparse_bound_verify, SparseBoundConfig};
use crate::error::Result;
use crate::kernel::Certification;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: u64,
    pub b_t: f64,
    pub lambda_universal: f64,
    pub lambda_stopping: f64,
    pub ratio: f64,
    pub ratio_stopping: f64,
    pub certificates_passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub kernel: Certification,
    pub testing_constant: f64,
    pub trials: Vec<TrialResult>,
    pub max_ratio: f64,
    pub median_ratio: f64,
    pub max_over_median: f64,
    pub max_ratio_stopping: f64,
    /// First trial whose certificates failed or whose ratio is not finite.
    pub failing_trial: Option<u64>,
}

/// Random bounded pairs supported in the middle half, checked against the
/// universal and stopping-tree sparse forms.
pub fn run_t1_verify<const D: usize>(config: &ExperimentConfig) -> Result<Report<VerifyReport>> {
    config.validate()?;
    let start = Instant::now();
    let op = config.operator::<D>()?;
    let kernel = op.spec().certify(10_000);
    let testing_constant = op.testing_constant_max();
    let build_ms = start.elapsed().as_secs_f64() * 1e3;
    let geo = *op.geometry();
    let bound = SparseBoundConfig {
        c0: config.c0,
        ..Default::default()
    };
    let start = Instant::now();
    let trials: Vec<TrialResult> = (0..config.trials)
        .into_par_iter()
        .map(|trial| -> Result<TrialResult> {
            let mut rng = trial_rng(config.seed, trial);
            let f = random_test_function(geo, &mut rng, config.resolution);
            let g = random_test_function(geo, &mut rng, config.resolution);
            let rep = sparse_bound_verify(&op, &f, &g, &bound)?;
            Ok(TrialResult {
                trial,
                b_t: rep.b_t,
                lambda_universal: rep.lambda_universal,
                lambda_stopping: rep.lambda_stopping,
                ratio: rep.ratio,
                ratio_stopping: rep.ratio_stopping,
                certificates_passed: rep.certificates.universal.passed && rep.certificates.stopping.passed,
            })
        })
        .collect::<Result<_>>()?;
    let trial_ms = start.elapsed().as_secs_f64() * 1e3;
    let ratios: Vec<f64> = trials.iter().map(|t| t.ratio).collect();
    let stopping: Vec<f64> = trials.iter().map(|t| t.ratio_stopping).collect();
    let (max_ratio, median_ratio) = (stats::max(&ratios), stats::median(&ratios));
    let failing_trial = trials
        .iter()
        .find(|t| !t.certificates_passed || !t.ratio.is_finite())
        .map(|t| t.trial);
    let passed = kernel.passed && failing_trial.is_none();
    let result = VerifyReport {
        kernel,
        testing_constant,
        max_over_median: if median_ratio > 0.0 { max_ratio / median_ratio } else { 0.0 },
        max_ratio,
        median_ratio,
        max_ratio_stopping: stats::max(&stopping),
        trials,
        failing_trial,
    };
    let mut report = Report::new("verify", config, passed, result);
    report.timings_ms.insert("operator".into(), build_ms);
    report.timings_ms.insert("trials".into(), trial_ms);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_kernel_gives_zero_ratios() {
        let config = ExperimentConfig {
            kernel: "zero".into(),
            level: 6,
            trials: 3,
            ..Default::default()
        };
        let rep = run_t1_verify::<1>(&config).unwrap();
        assert!(rep.passed);
        assert!(rep.result.trials.iter().all(|t| t.ratio == 0.0));
    }

    #[test]
    fn reruns_are_identical() {
        let config = ExperimentConfig {
            level: 6,
            trials: 4,
            ..Default::default()
        };
        let a = run_t1_verify::<1>(&config).unwrap();
        let b = run_t1_verify::<1>(&config).unwrap();
        assert_eq!(serde_json::to_string(&a.result).unwrap(), serde_json::to_string(&b.result).unwrap());
        assert!(a.passed, "{:?}", a.result.failing_trial);
    }
}
