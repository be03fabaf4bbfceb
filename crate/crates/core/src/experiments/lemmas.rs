use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{random_test_function, trial_rng, ExperimentConfig, Report};
use crate::engine::{build_stopping_tree, UNIVERSAL_EXTENSION};
use crate::error::Result;
use crate::function::GridFunction;
use crate::grid::{Cube, DyadicGrid, GridGeometry, GridId, ShiftSequence};
use crate::operator::{hardy_check, off_diagonal_bound, off_diagonal_check, poisson_like, DiscreteOperator};
use crate::sparse::{
    random_sparse_collection, shifted_grid_family, sparse_dominate_buv, square_function, universal_sparse,
    ComplexityFormParams,
};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Property {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: f64,
    pub detail: String,
}

impl Property {
    fn at_most(name: &str, measured: f64, bound: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: measured <= bound,
            measured,
            bound,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub properties: Vec<Property>,
}

/// `sup_λ λ |{h > λ}|` for a nonnegative `h`.
pub fn weak_type_constant<const D: usize>(h: &GridFunction<D>) -> f64 {
    let mut v: Vec<f64> = h.values().to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let cell = h.geometry().cell_measure();
    v.iter().enumerate().map(|(i, x)| x * (i + 1) as f64 * cell).fold(0.0, f64::max)
}

/// Mean-zero sign pattern on `q`: `+1` on children with first coordinate bit 0.
fn haar_sign<const D: usize>(geo: GridGeometry<D>, q: &Cube<D>) -> Result<GridFunction<D>> {
    let mut g = GridFunction::zeros(geo);
    let half = geo.side_in_cells(q.scale) / 2;
    let corner = q.index[0] * 2 * half;
    for i in geo.cube_cells(q)? {
        g.values_mut()[i] = if geo.coord(i)[0] - corner < half { 1.0 } else { -1.0 };
    }
    Ok(g)
}

fn off_diagonal_sweep<const D: usize>(op: &DiscreteOperator<D>) -> Result<Property> {
    let geo = *op.geometry();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for q in geo.all_cubes() {
        if q.scale <= geo.scale_min() || q.scale > geo.scale_max() - 2 {
            continue;
        }
        let side = q.side();
        let f = GridFunction::from_fn(geo, |x| {
            let inside = (0..D).all(|k| (x[k] - (q.index[k] as f64 + 0.5) * side).abs() < side);
            if inside {
                0.0
            } else {
                1.0
            }
        });
        let rep = off_diagonal_check(op, &f, &haar_sign(geo, &q)?, &q)?;
        if !rep.degenerate {
            worst = worst.max(rep.ratio);
            count += 1;
        }
    }
    Ok(Property::at_most(
        "off-diagonal ratio",
        worst,
        off_diagonal_bound(op.spec()),
        format!("{count} cubes, level {}", geo.level()),
    ))
}

fn hardy_property() -> Result<Property> {
    let geo = GridGeometry::<1>::new(-6, 2)?;
    let p = Cube::new(0, [1]);
    let f = GridFunction::indicator(geo, &p, 1.0)?;
    let g = &GridFunction::indicator(geo, &Cube::new(0, [0]), 1.0)? + &GridFunction::indicator(geo, &Cube::new(0, [2]), 1.0)?;
    let rep = hardy_check(&p, &f, &g, 2.0)?;
    let err = (rep.numerator - 4.0 * std::f64::consts::LN_2).abs();
    Ok(Property::at_most(
        "hardy numerator vs 4 ln 2",
        err,
        1e-3,
        format!("numerator {}", rep.numerator),
    ))
}

fn poisson_property() -> Result<Property> {
    let mut errors = Vec::new();
    for top in [9, 11, 13] {
        let geo = GridGeometry::<1>::new(-3, top)?;
        let q = Cube::new(0, [1i64 << (top - 1)]);
        let v = poisson_like(&GridFunction::constant(geo, 1.0), &q, 1.0)?;
        errors.push((v - 1.0 - std::f64::consts::PI).abs());
    }
    let shrinking = errors.windows(2).all(|w| w[1] < w[0]);
    let last = *errors.last().expect("nonempty");
    Ok(Property {
        name: "poisson-like constant vs 1 + π".into(),
        passed: shrinking && last <= 1e-3,
        measured: last,
        bound: 1e-3,
        detail: format!("errors by window {errors:?}"),
    })
}

/// The window truncates the sum at cubes of side `2^u` cells, so `u` up to 6
/// needs a fine enough mesh for the norms to be comparable.
pub const SQUARE_FUNCTION_MIN_LEVEL: u32 = 10;

fn square_function_properties<const D: usize>(config: &ExperimentConfig) -> Result<Vec<Property>> {
    let geo = GridGeometry::<D>::unit(config.level.max(SQUARE_FUNCTION_MIN_LEVEL))?;
    let us: Vec<u32> = (0..=6).collect();
    let trials = config.trials.min(5);
    let spreads: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<f64> {
            let f = random_test_function(geo, &mut trial_rng(config.seed, t), geo.level());
            let norms: Vec<f64> = us
                .iter()
                .map(|&u| Ok(square_function(&f, u)?.l2_norm() / f.l2_norm()))
                .collect::<Result<_>>()?;
            Ok(stats::max(&norms) / stats::min(&norms))
        })
        .collect::<Result<_>>()?;
    let spread = stats::max(&spreads);

    // weak (1,1) over point masses, cube indicators and random functions
    let n = geo.side_cells();
    let mut family = vec![
        GridFunction::indicator(geo, &geo.cube_of_cell(geo.flat([n / 2; D]), geo.scale_min()), 1.0)?,
        GridFunction::indicator(geo, &geo.cube_of_cell(geo.flat([n / 2; D]), geo.scale_min() + 2), 1.0)?,
    ];
    for t in 0..3 {
        family.push(random_test_function(geo, &mut trial_rng(config.seed ^ 0x5eed, t), geo.level()));
    }
    let constants: Vec<f64> = us
        .iter()
        .map(|&u| -> Result<f64> {
            let mut c: f64 = 0.0;
            for f in &family {
                c = c.max(weak_type_constant(&square_function(f, u)?) / f.l1_norm());
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let x: Vec<f64> = us.iter().map(|&u| (1.0 + u as f64).ln()).collect();
    let y: Vec<f64> = constants.iter().map(|c| c.ln()).collect();
    let growth = stats::least_squares(&x, &y).map_or(f64::INFINITY, |f| f.slope);
    Ok(vec![
        Property::at_most(
            "square function L2 spread over u",
            spread,
            2.0,
            format!("u in 0..=6, {trials} trials, level {}", geo.level()),
        ),
        Property::at_most(
            "square function weak(1,1) superlinear exponent",
            growth - 1.0,
            0.2,
            format!("constants {constants:?}"),
        ),
    ])
}

fn buv_property<const D: usize>(config: &ExperimentConfig, geo: GridGeometry<D>) -> Result<Property> {
    let mut cases = Vec::new();
    for u in 0..=2 {
        for v in 0..=2 {
            for t in 0..config.trials {
                cases.push((u, v, t));
            }
        }
    }
    let outcomes: Vec<(bool, f64)> = cases
        .par_iter()
        .map(|&(u, v, t)| -> Result<(bool, f64)> {
            let mut rng = trial_rng(config.seed, t);
            let f = random_test_function(geo, &mut rng, geo.level());
            let g = random_test_function(geo, &mut rng, geo.level());
            let dom = sparse_dominate_buv(&f, &g, ComplexityFormParams { u, v })?;
            let cert = dom.collection.verify()?;
            let ratio = if dom.bound > 0.0 { dom.form / dom.bound } else { 0.0 };
            Ok((dom.dominated && cert.passed, ratio))
        })
        .collect::<Result<_>>()?;
    let failures = outcomes.iter().filter(|o| !o.0).count();
    let worst = stats::max(&outcomes.iter().map(|o| o.1).collect::<Vec<_>>());
    Ok(Property {
        name: "complexity form sparse domination".into(),
        passed: failures == 0,
        measured: worst,
        bound: 1.0,
        detail: format!("{} cases, {failures} failures; measured is form / bound", outcomes.len()),
    })
}

fn universal_property<const D: usize>(config: &ExperimentConfig, geo: GridGeometry<D>) -> Result<Vec<Property>> {
    let c = 0.5;
    let bound = 16f64.powi(D as i32) / (c * c);
    let grids = shifted_grid_family(&geo, UNIVERSAL_EXTENSION);
    let level_cap = 4f64.powi(D as i32);
    let outcomes: Vec<(f64, bool, bool)> = (0..config.trials)
        .into_par_iter()
        .map(|t| -> Result<(f64, bool, bool)> {
            let mut rng = trial_rng(config.seed, t);
            let f = random_test_function(geo, &mut rng, geo.level()).abs();
            let g = random_test_function(geo, &mut rng, geo.level()).abs();
            let grid = if t % 2 == 0 {
                DyadicGrid::standard(geo)
            } else {
                let omega = ShiftSequence::random(&mut rng, geo.scale_min(), geo.level() as usize + 1);
                DyadicGrid::shifted(GridId(1), geo, omega)?
            };
            let collection = random_sparse_collection(&mut rng, &grid, c, 8)?;
            let sparse_ok = collection.verify()?.passed;
            let uni = universal_sparse(&f, &g, &grids)?;
            let levels_ok = uni.levels.iter().all(|l| {
                let lo = uni.base.powi(l.level as i32);
                l.product >= lo * (1.0 - 1e-12) && l.product <= level_cap * lo * (1.0 + 1e-12)
            });
            let lambda0 = uni.collection.lambda(&f, &g)?;
            let lambda = collection.lambda(&f, &g)?;
            let ratio = if lambda0 > 0.0 { lambda / lambda0 } else if lambda > 0.0 { f64::INFINITY } else { 0.0 };
            Ok((ratio, levels_ok, sparse_ok))
        })
        .collect::<Result<_>>()?;
    let worst = stats::max(&outcomes.iter().map(|o| o.0).collect::<Vec<_>>());
    let levels_ok = outcomes.iter().all(|o| o.1 && o.2);
    Ok(vec![
        Property::at_most(
            "universal domination factor",
            worst,
            bound,
            format!("{} random collections with c = {c}", outcomes.len()),
        ),
        Property {
            name: "universal level bounds".into(),
            passed: levels_ok,
            measured: if levels_ok { 1.0 } else { 0.0 },
            bound: 1.0,
            detail: format!("b^k <= <f><g> <= {level_cap} b^k for every emitted cube"),
        },
    ])
}

fn stopping_property<const D: usize>(config: &ExperimentConfig, op: &DiscreteOperator<D>) -> Result<Property> {
    let geo = *op.geometry();
    let outcomes: Vec<(bool, f64)> = (0..config.trials)
        .into_par_iter()
        .map(|t| -> Result<(bool, f64)> {
            let mut rng = trial_rng(config.seed, t);
            let f = random_test_function(geo, &mut rng, config.resolution);
            let g = random_test_function(geo, &mut rng, config.resolution);
            let tree = build_stopping_tree(op, &f, &g, &geo.window(), config.c0)?;
            let cert = tree.collection(geo).verify()?;
            Ok((cert.passed, cert.min_carve_ratio))
        })
        .collect::<Result<_>>()?;
    let failures = outcomes.iter().filter(|o| !o.0).count();
    Ok(Property {
        name: "stopping tree sparsity".into(),
        passed: failures == 0,
        measured: stats::min(&outcomes.iter().map(|o| o.1).collect::<Vec<_>>()),
        bound: 0.5,
        detail: format!("{} trials, {failures} failures; measured is the smallest carve ratio", outcomes.len()),
    })
}

/// Lemma-level properties with their measured constants.
pub fn run_lemma_suite<const D: usize>(config: &ExperimentConfig) -> Result<Report<LemmaReport>> {
    config.validate()?;
    let start = Instant::now();
    let geo = config.geometry::<D>()?;
    let op = config.operator::<D>()?;
    let cert = op.spec().certify(10_000);
    let mut properties = vec![Property::at_most(
        "kernel constants",
        cert.measured_constant,
        cert.declared_constant,
        format!("{} samples of {}", cert.samples, cert.kernel),
    )];
    let small_level = if D == 1 { 6 } else { 4 };
    let small = DiscreteOperator::new(op.spec().clone(), GridGeometry::<D>::unit(small_level)?, config.order)?;
    properties.push(off_diagonal_sweep(&small)?);
    properties.push(hardy_property()?);
    properties.push(poisson_property()?);
    properties.extend(square_function_properties::<D>(config)?);
    properties.push(buv_property(config, geo)?);
    properties.extend(universal_property(config, geo)?);
    properties.push(stopping_property(config, &op)?);
    let passed = properties.iter().all(|p| p.passed);
    let mut report = Report::new("lemmas", config, passed, LemmaReport { properties });
    report.timings_ms.insert("total".into(), start.elapsed().as_secs_f64() * 1e3);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weak_constant_of_indicator() {
        let geo = GridGeometry::<1>::unit(4).unwrap();
        let h = GridFunction::indicator(geo, &Cube::new(-2, [1]), 3.0).unwrap();
        assert!((weak_type_constant(&h) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn small_suite_passes() {
        let config = ExperimentConfig {
            level: 6,
            trials: 4,
            ..Default::default()
        };
        let rep = run_lemma_suite::<1>(&config).unwrap();
        for p in &rep.result.properties {
            assert!(p.passed, "{p:?}");
        }
    }
}
