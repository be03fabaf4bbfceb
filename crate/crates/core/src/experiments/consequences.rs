use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ap_characteristic, random_test_function, trial_rng, ExperimentConfig, Report, WeightSpec};
use crate::engine::UNIVERSAL_EXTENSION;
use crate::error::Result;
use crate::function::maximal_function;
use crate::grid::DyadicGrid;
use crate::sparse::{random_sparse_collection, shifted_grid_family, universal_sparse};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpRow {
    pub p: f64,
    pub p_dual: f64,
    /// `max_trials Λ₀(|f|,|g|) / (p p' ‖f‖_p ‖g‖_{p'})`.
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub p: f64,
    pub characteristic: f64,
    /// `max_trials Λ₀(|f|,|g|) / (‖f‖_{L^p(w)} ‖g‖_{L^{p'}(w^{1-p'})})`.
    pub max_weighted_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaximalRow {
    pub trial: u64,
    pub lambda: f64,
    /// `∫ Mf · Mg` with the dyadic maximal function.
    pub integral: f64,
    /// Max overlap over the smallest carve ratio.
    pub constant: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsequencesReport {
    pub lp: Vec<LpRow>,
    /// Largest over smallest `max_ratio` across the exponents.
    pub lp_spread: f64,
    pub weight: String,
    pub weights: Vec<WeightRow>,
    pub maximal: Vec<MaximalRow>,
}

struct Trial {
    lp: Vec<f64>,
    weighted: Vec<f64>,
    maximal: MaximalRow,
}

pub fn run_consequences<const D: usize>(config: &ExperimentConfig) -> Result<Report<ConsequencesReport>> {
    config.validate()?;
    let start = Instant::now();
    let geo = config.geometry::<D>()?;
    let weight = WeightSpec::parse(&config.weight)?;
    let w = weight.to_function(geo);
    let grids = shifted_grid_family(&geo, UNIVERSAL_EXTENSION);
    let standard = DyadicGrid::standard(geo);
    let trials: Vec<Trial> = (0..config.trials)
        .into_par_iter()
        .map(|trial| -> Result<Trial> {
            let mut rng = trial_rng(config.seed, trial);
            let f = random_test_function(geo, &mut rng, config.resolution).abs();
            let g = random_test_function(geo, &mut rng, config.resolution).abs();
            let lambda0 = universal_sparse(&f, &g, &grids)?.collection.lambda(&f, &g)?;
            let mut lp = Vec::new();
            let mut weighted = Vec::new();
            for &p in &config.p {
                let q = p / (p - 1.0);
                lp.push(lambda0 / (p * q * f.lp_norm(p) * g.lp_norm(q)));
                let dual = w.map(|v| v.powf(1.0 - q));
                weighted.push(lambda0 / (f.weighted_lp_norm(p, &w)? * g.weighted_lp_norm(q, &dual)?));
            }
            let collection = random_sparse_collection(&mut rng, &standard, 0.5, 8)?;
            let cert = collection.verify()?;
            let lambda = collection.lambda_pointwise(&f, &g)?;
            let integral = maximal_function(&f).inner(&maximal_function(&g))?;
            let constant = cert.max_overlap as f64 / cert.min_carve_ratio;
            Ok(Trial {
                lp,
                weighted,
                maximal: MaximalRow {
                    trial,
                    lambda,
                    integral,
                    constant,
                    holds: lambda <= constant * integral * (1.0 + 1e-12),
                },
            })
        })
        .collect::<Result<_>>()?;
    let lp: Vec<LpRow> = config
        .p
        .iter()
        .enumerate()
        .map(|(j, &p)| LpRow {
            p,
            p_dual: p / (p - 1.0),
            max_ratio: stats::max(&trials.iter().map(|t| t.lp[j]).collect::<Vec<_>>()),
        })
        .collect();
    let weights: Vec<WeightRow> = config
        .p
        .iter()
        .enumerate()
        .map(|(j, &p)| -> Result<WeightRow> {
            Ok(WeightRow {
                p,
                characteristic: ap_characteristic(&w, p)?,
                max_weighted_ratio: stats::max(&trials.iter().map(|t| t.weighted[j]).collect::<Vec<_>>()),
            })
        })
        .collect::<Result<_>>()?;
    let ratios: Vec<f64> = lp.iter().map(|r| r.max_ratio).collect();
    let lp_spread = stats::max(&ratios) / stats::min(&ratios);
    let maximal: Vec<MaximalRow> = trials.into_iter().map(|t| t.maximal).collect();
    let passed = lp_spread < 2.0
        && maximal.iter().all(|m| m.holds)
        && weights.iter().all(|w| w.characteristic.is_finite() && w.max_weighted_ratio.is_finite());
    let result = ConsequencesReport {
        lp,
        lp_spread,
        weight: config.weight.clone(),
        weights,
        maximal,
    };
    let mut report = Report::new("consequences", config, passed, result);
    report.timings_ms.insert("total".into(), start.elapsed().as_secs_f64() * 1e3);
    Ok(report)
}
