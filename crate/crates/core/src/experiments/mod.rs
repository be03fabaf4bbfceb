//! Seeded experiment runners shared by the command-line driver and the
//! acceptance tests. Every runner returns a serializable report.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::function::{GridFunction, Pyramid};
use crate::grid::GridGeometry;
use crate::kernel::KernelSpec;
use crate::operator::DiscreteOperator;

mod consequences;
mod grid_mc;
mod lemmas;
mod verify;

pub use consequences::{run_consequences, ConsequencesReport, LpRow, MaximalRow, WeightRow};
pub use grid_mc::{bad_statistics, run_grid_mc, GridMcReport, McRow};
pub use lemmas::{run_lemma_suite, weak_type_constant, LemmaReport, Property};
pub use verify::{run_t1_verify, TrialResult, VerifyReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub kernel: String,
    pub d: usize,
    pub level: u32,
    pub gamma: f64,
    /// Run thresholds; the first one is used where a single value is needed.
    pub r: Vec<u32>,
    pub trials: u64,
    pub seed: u64,
    pub p: Vec<f64>,
    /// `one` or `power:<a>`.
    pub weight: String,
    /// Gauss order for the operator tables.
    pub order: usize,
    pub c0: f64,
    /// Random test functions are constant on cubes `resolution` levels below the window.
    pub resolution: u32,
    #[serde(skip)]
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kernel: "hilbert".into(),
            d: 1,
            level: 10,
            gamma: 0.25,
            r: vec![4, 6, 8, 10],
            trials: 100,
            seed: 42,
            p: vec![1.25, 2.0, 4.0],
            weight: "one".into(),
            order: 6,
            c0: crate::engine::DEFAULT_C0,
            resolution: 6,
            cache_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        if !(1..=2).contains(&self.d) {
            return Err(Error::InvalidArgument(format!("dimension {} not supported", self.d)));
        }
        if self.level < 2 {
            return Err(Error::InvalidArgument("level must be at least 2".into()));
        }
        if self.r.is_empty() {
            return Err(Error::InvalidArgument("need at least one r".into()));
        }
        if let Some(p) = self.p.iter().find(|p| !(**p > 1.0 && p.is_finite())) {
            return Err(Error::InvalidArgument(format!("exponent {p} must lie in (1, ∞)")));
        }
        if self.order < 4 {
            return Err(Error::InvalidArgument("quadrature order must be at least 4".into()));
        }
        WeightSpec::parse(&self.weight)?;
        crate::kernel::KernelKind::parse(&self.kernel)?;
        for &r in &self.r {
            crate::grid::GoodnessParams::new(self.gamma, r)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn geometry<const D: usize>(&self) -> Result<GridGeometry<D>> {
        GridGeometry::unit(self.level)
    }

    pub fn operator<const D: usize>(&self) -> Result<DiscreteOperator<D>> {
        let spec = KernelSpec::<D>::parse(&self.kernel)?;
        DiscreteOperator::load_or_build(spec, self.geometry()?, self.order, self.cache_dir.as_deref())
    }
}

/// Common envelope: config, its hash, the library version and the result.
/// Wall-clock timings live in their own field so the rest is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub kind: String,
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub passed: bool,
    pub result: T,
    pub timings_ms: BTreeMap<String, f64>,
}

impl<T> Report<T> {
    pub fn new(kind: &str, config: &ExperimentConfig, passed: bool, result: T) -> Self {
        Self {
            kind: kind.into(),
            version: VERSION.into(),
            config_hash: config.hash(),
            config: config.clone(),
            passed,
            result,
            timings_ms: BTreeMap::new(),
        }
    }
}

/// Generator for trial `trial` of a seeded batch.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Cellwise i.i.d. uniform on `[-1, 1]` over cubes `resolution` levels below
/// the window, zero outside the middle half of the window.
pub fn random_test_function<const D: usize, R: Rng + ?Sized>(
    geometry: GridGeometry<D>,
    rng: &mut R,
    resolution: u32,
) -> GridFunction<D> {
    let res = resolution.clamp(2, geometry.level());
    let n = 1i64 << res;
    let coarse: Vec<f64> = (0..n.pow(D as u32))
        .map(|mut i| {
            let inside = (0..D).all(|_| {
                let c = i % n;
                i /= n;
                c >= n / 4 && c < 3 * n / 4
            });
            if inside {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        })
        .collect();
    let shift = geometry.level() - res;
    let values = (0..geometry.cell_count())
        .map(|i| {
            let c = geometry.coord(i);
            let idx = (0..D).rev().fold(0i64, |a, k| a * n + (c[k] >> shift));
            coarse[idx as usize]
        })
        .collect();
    GridFunction::from_values(geometry, values).expect("sized")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WeightSpec {
    One,
    /// `max(|x - c|, cell side)^a` with `c` the window center.
    Power(f64),
}

impl WeightSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "one" | "1" => Ok(Self::One),
            other => {
                let a = other
                    .strip_prefix("power:")
                    .ok_or_else(|| Error::Parse(format!("unknown weight {other:?}")))?
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad weight exponent: {e}")))?;
                if !a.is_finite() {
                    return Err(Error::Parse("weight exponent must be finite".into()));
                }
                Ok(Self::Power(a))
            }
        }
    }

    pub fn to_function<const D: usize>(&self, geometry: GridGeometry<D>) -> GridFunction<D> {
        let center = 0.5 * geometry.window_side();
        let floor = geometry.cell_side();
        match *self {
            Self::One => GridFunction::constant(geometry, 1.0),
            Self::Power(a) => GridFunction::from_fn(geometry, |x| {
                let r = x.iter().map(|v| (v - center).powi(2)).sum::<f64>().sqrt();
                r.max(floor).powf(a)
            }),
        }
    }
}

/// `[w]_{A_p} = sup_Q ⟨w⟩_Q ⟨w^{1-p'}⟩_Q^{p-1}` over every standard cube in the window.
pub fn ap_characteristic<const D: usize>(w: &GridFunction<D>, p: f64) -> Result<f64> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::InvalidArgument(format!("exponent {p} must lie in (1, ∞)")));
    }
    if w.values().iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Negative);
    }
    let q = p / (p - 1.0);
    let dual = w.map(|v| v.powf(1.0 - q));
    let (pw, pd) = (Pyramid::new(w), Pyramid::new(&dual));
    let geo = w.geometry();
    let mut best: f64 = 0.0;
    for k in 0..=geo.level() {
        for (a, b) in pw.level(k).iter().zip(pd.level(k)) {
            best = best.max(a * b.powf(p - 1.0));
        }
    }
    Ok(best)
}
