use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{random_test_function, trial_rng, ExperimentConfig, Report};
use crate::error::Result;
use crate::function::{periodic_scale_energies, GridFunction};
use crate::grid::{classify_good, Cube, DyadicGrid, GoodnessParams, Goodness, GridId, ShiftSequence};
use crate::stats::{self, LinearFit};

/// Shift bits drawn below the mesh so that goodness is decidable at every scale.
const BITS_BELOW_MESH: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub gamma: f64,
    pub r: u32,
    /// Fraction of (sample, scale) pairs whose cubes are bad.
    pub bad_frequency: f64,
    /// Mean of `‖P^bad f‖₂² / ‖f‖₂²` over the samples.
    pub bad_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMcReport {
    pub samples: u64,
    pub rows: Vec<McRow>,
    /// Fit of `log2(bad_frequency)` against `r`.
    pub fit: Option<LinearFit>,
    pub frequency_monotone: bool,
    pub energy_monotone: bool,
}

/// Bad-cube frequency and bad energy of `f` for each `r`, over `samples`
/// random shifts; `force_zero` uses the zero shift instead.
pub fn bad_statistics<const D: usize>(
    f: &GridFunction<D>,
    gamma: f64,
    rs: &[u32],
    samples: u64,
    seed: u64,
    force_zero: bool,
) -> Result<Vec<McRow>> {
    let geo = *f.geometry();
    let params: Vec<GoodnessParams> = rs.iter().map(|&r| GoodnessParams::new(gamma, r)).collect::<Result<_>>()?;
    let base = geo.scale_min() - BITS_BELOW_MESH as i32;
    let len = (BITS_BELOW_MESH + geo.level() + 1) as usize;
    let norm = f.l2_norm().powi(2);
    let scales: Vec<i32> = (geo.scale_min() + 1..=geo.scale_max()).collect();
    let per_sample: Vec<Vec<(u64, f64)>> = (0..samples)
        .into_par_iter()
        .map(|trial| -> Result<Vec<(u64, f64)>> {
            let omega = if force_zero {
                ShiftSequence::zero(base, len)
            } else {
                ShiftSequence::random(&mut trial_rng(seed, trial), base, len)
            };
            let grid = DyadicGrid::shifted(GridId(1), geo, omega)?;
            let energies = periodic_scale_energies(f, &grid)?;
            params
                .iter()
                .map(|p| {
                    let mut count = 0u64;
                    let mut energy = 0.0;
                    for (k, &s) in scales.iter().enumerate() {
                        // undecidable counts as bad
                        let bad = !matches!(classify_good(&Cube::new(s, [0; D]), grid.omega(), p), Ok(Goodness::Good));
                        if bad {
                            count += 1;
                            energy += energies[k];
                        }
                    }
                    Ok((count, energy))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let total = (samples as usize * scales.len()) as f64;
    Ok(rs
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            let count: u64 = per_sample.iter().map(|v| v[j].0).sum();
            let energy: f64 = per_sample.iter().map(|v| v[j].1).sum();
            McRow {
                gamma,
                r,
                bad_frequency: count as f64 / total,
                bad_energy: if norm > 0.0 { energy / (samples as f64 * norm) } else { 0.0 },
            }
        })
        .collect())
}

pub fn run_grid_mc<const D: usize>(config: &ExperimentConfig, force_zero: bool) -> Result<Report<GridMcReport>> {
    config.validate()?;
    let start = Instant::now();
    let geo = config.geometry::<D>()?;
    let f = random_test_function(geo, &mut trial_rng(config.seed, u64::MAX), geo.level());
    let rows = bad_statistics(&f, config.gamma, &config.r, config.trials, config.seed, force_zero)?;
    let frequency_monotone = rows.windows(2).all(|w| w[1].bad_frequency <= w[0].bad_frequency);
    let energy_monotone = rows.windows(2).all(|w| w[1].bad_energy <= w[0].bad_energy);
    let fit = if rows.iter().all(|r| r.bad_frequency > 0.0) {
        let x: Vec<f64> = rows.iter().map(|r| r.r as f64).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.bad_frequency.log2()).collect();
        stats::least_squares(&x, &y)
    } else {
        None
    };
    let slope_ok = fit.is_some_and(|f| f.slope <= -config.gamma + 0.1);
    let passed = frequency_monotone && energy_monotone && slope_ok;
    let result = GridMcReport {
        samples: config.trials,
        rows,
        fit,
        frequency_monotone,
        energy_monotone,
    };
    let mut report = Report::new("grid-mc", config, passed, result);
    report.timings_ms.insert("total".into(), start.elapsed().as_secs_f64() * 1e3);
    Ok(report)
}

impl GridMcReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma,r,bad_frequency,bad_energy\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.gamma, r.r, r.bad_frequency, r.bad_energy));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shift_is_always_bad() {
        let config = ExperimentConfig {
            level: 6,
            trials: 5,
            ..Default::default()
        };
        let rep = run_grid_mc::<1>(&config, true).unwrap();
        assert!(rep.result.rows.iter().all(|r| r.bad_frequency == 1.0));
        // everything bad: the bad part carries all the energy above the mean
        let e = rep.result.rows[0].bad_energy;
        assert!(e > 0.0 && e <= 1.0 + 1e-12);
    }

    #[test]
    fn frequency_decays_in_r() {
        let config = ExperimentConfig {
            level: 8,
            trials: 200,
            ..Default::default()
        };
        let rep = run_grid_mc::<1>(&config, false).unwrap();
        assert!(rep.result.frequency_monotone && rep.result.energy_monotone, "{:?}", rep.result);
    }
}
