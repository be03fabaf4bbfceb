//! Discretized kernel operators on the mesh, testing constants, the
//! Poisson-type tail functional, off-diagonal ratios and the Hardy sum.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::function::GridFunction;
use crate::grid::{for_each_in_box, Cube, GridGeometry};
use crate::kernel::{KernelKind, KernelSpec};
use crate::quadrature::TensorRule;

/// Below this offset the smoothed kernel uses its closed form; beyond it
/// the second difference of the antiderivative cancels too much.
const SMOOTHED_ANALYTIC_LIMIT: i64 = 32;
/// Halvings toward a singular corner in the tensor rule.
const GRADED_DEPTH: u32 = 40;

/// `∫_0^1 ∫_0^1 dy dx / (o + x - y)` for `o ≥ 1`.
fn hilbert_unit(o: i64) -> f64 {
    debug_assert!(o >= 1);
    if o == 1 {
        return 2.0 * std::f64::consts::LN_2;
    }
    let of = o as f64;
    (of + 1.0) * (1.0 / of).ln_1p() + (of - 1.0) * (-1.0 / of).ln_1p()
}

fn smoothed_antiderivative(t: f64, delta: f64) -> f64 {
    0.5 * t * (t * t + delta * delta).ln() + delta * (t / delta).atan()
}

/// `∫_{cell o} ∫_{cell 0} K(x - y) dy dx`, the diagonal handled by the caller.
fn offset_coefficient<const D: usize>(spec: &KernelSpec<D>, h: f64, o: [i64; D], rule: &TensorRule) -> f64 {
    match spec.kind {
        KernelKind::Zero => return 0.0,
        KernelKind::Hilbert => {
            let a = hilbert_unit(o[0].abs()) * h;
            return if o[0] > 0 { a } else { -a };
        }
        KernelKind::Hardy if D == 1 => return hilbert_unit(o[0].abs()) * h,
        KernelKind::Smoothed { delta } if o[0].abs() < SMOOTHED_ANALYTIC_LIMIT => {
            let t = o[0] as f64 * h;
            return smoothed_antiderivative(t + h, delta) + smoothed_antiderivative(t - h, delta)
                - 2.0 * smoothed_antiderivative(t, delta);
        }
        _ => {}
    }
    let near = o.iter().all(|v| v.abs() <= 2);
    let mut total = 0.0;
    // one orthant of w = z - o h at a time; the tent weight is linear on each
    for_each_in_box([0i64; D], 2, |sigma| {
        let mut lo = [0.0; D];
        let mut hi = [0.0; D];
        let mut singular = true;
        let mut corner_at_lo = [false; D];
        for k in 0..D {
            let upper = sigma[k] == 1;
            (lo[k], hi[k]) = if upper { (0.0, h) } else { (-h, 0.0) };
            match (o[k], upper) {
                (0, _) => corner_at_lo[k] = upper,
                (-1, true) => corner_at_lo[k] = false,
                (1, false) => corner_at_lo[k] = true,
                _ => singular = false,
            }
        }
        let f = |w: [f64; D]| {
            let mut z = [0.0; D];
            let mut weight = 1.0;
            for k in 0..D {
                z[k] = o[k] as f64 * h + w[k];
                weight *= h - w[k].abs();
            }
            spec.profile(z) * weight
        };
        total += if singular {
            rule.integrate_graded(lo, hi, corner_at_lo, GRADED_DEPTH, &f)
        } else if near {
            rule.integrate_split(lo, hi, 4, &f)
        } else {
            rule.integrate(lo, hi, &f)
        };
    });
    total
}

/// Short hash identifying a window geometry.
pub fn geometry_hash<const D: usize>(geometry: &GridGeometry<D>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("{},{},{}", D, geometry.scale_min(), geometry.scale_max()));
    hex::encode(&hasher.finalize()[..8])
}

/// `A[c, c'] = ∫_c ∫_{c'} K(x, y) dy dx` stored by offset `c - c'`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DiscreteOperator<const D: usize> {
    spec: KernelSpec<D>,
    geometry: GridGeometry<D>,
    order: usize,
    /// Offsets `(-n, n)^D`, row-major with side `2n - 1`.
    table: Vec<f64>,
    /// Set when the singular diagonal block was dropped from the sums.
    diagonal_excluded: bool,
    #[serde(skip)]
    testing: OnceLock<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    kernel: String,
    d: usize,
    geometry_hash: String,
    order: usize,
}

impl<const D: usize> DiscreteOperator<D> {
    pub fn new(spec: KernelSpec<D>, geometry: GridGeometry<D>, order: usize) -> Result<Self> {
        if order < 4 {
            return Err(Error::InvalidArgument(format!("quadrature order {order} below 4")));
        }
        let n = geometry.side_cells();
        let side = 2 * n - 1;
        let h = geometry.cell_side();
        let rule = TensorRule::new(order);
        let count = (side as usize).pow(D as u32);
        let offset_of = |i: usize| -> [i64; D] {
            let mut o = [0i64; D];
            let mut j = i as i64;
            for k in (0..D).rev() {
                o[k] = j % side - (n - 1);
                j /= side;
            }
            o
        };
        let sign = if spec.antisymmetric { -1.0 } else { 1.0 };
        let center = (count - 1) / 2;
        // offsets are symmetric about the center of the table
        let mut table: Vec<f64> = (0..count)
            .into_par_iter()
            .map(|i| {
                if i <= center {
                    0.0
                } else {
                    offset_coefficient(&spec, h, offset_of(i), &rule)
                }
            })
            .collect();
        for i in 0..center {
            table[i] = sign * table[count - 1 - i];
        }
        table[center] = 0.0;
        let diagonal_excluded = !spec.antisymmetric;
        if diagonal_excluded {
            log::info!("{}: diagonal cell block excluded from the discrete form", spec.name());
        }
        Ok(Self {
            spec,
            geometry,
            order,
            table,
            diagonal_excluded,
            testing: OnceLock::new(),
        })
    }

    /// Load from `dir` when a matching cache file exists, else build and store.
    pub fn load_or_build(spec: KernelSpec<D>, geometry: GridGeometry<D>, order: usize, dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Self::new(spec, geometry, order);
        };
        let path = Self::cache_path(dir, &spec, &geometry, order);
        if let Ok(text) = std::fs::read_to_string(&path) {
            match serde_json::from_str::<Self>(&text) {
                Ok(op) if op.spec == spec && op.geometry == geometry && op.order == order => {
                    log::debug!("loaded operator cache {}", path.display());
                    return Ok(op);
                }
                _ => log::warn!("ignoring stale operator cache {}", path.display()),
            }
        }
        let op = Self::new(spec, geometry, order)?;
        std::fs::create_dir_all(dir)?;
        std::fs::write(&path, serde_json::to_string(&op)?)?;
        Ok(op)
    }

    pub fn cache_path(dir: &Path, spec: &KernelSpec<D>, geometry: &GridGeometry<D>, order: usize) -> PathBuf {
        let header = CacheHeader {
            kernel: spec.name(),
            d: D,
            geometry_hash: geometry_hash(geometry),
            order,
        };
        let kernel = header.kernel.replace([':', '.'], "_");
        dir.join(format!(
            "op-{kernel}-d{}-{}-q{}.json",
            header.d, header.geometry_hash, header.order
        ))
    }

    pub fn spec(&self) -> &KernelSpec<D> {
        &self.spec
    }

    pub fn geometry(&self) -> &GridGeometry<D> {
        &self.geometry
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn diagonal_excluded(&self) -> bool {
        self.diagonal_excluded
    }

    fn table_side(&self) -> i64 {
        2 * self.geometry.side_cells() - 1
    }

    /// `A` at offset `o = c - c'` (cell units).
    pub fn coefficient(&self, o: [i64; D]) -> f64 {
        let n = self.geometry.side_cells();
        let side = self.table_side();
        let mut idx = 0i64;
        for v in o {
            assert!(v.abs() < n, "offset outside the window");
            idx = idx * side + v + n - 1;
        }
        self.table[idx as usize]
    }

    /// Cell integrals `∫_c T f` (or `T* f` when `transpose`).
    fn apply_raw(&self, f: &[f64], transpose: bool) -> Vec<f64> {
        let geo = &self.geometry;
        let n = geo.side_cells();
        let side = self.table_side();
        let lin: Vec<i64> = (0..geo.cell_count())
            .map(|i| geo.coord(i).iter().fold(0i64, |a, &c| a * side + c))
            .collect();
        let support: Vec<(i64, f64)> = f
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (lin[i], *v))
            .collect();
        let center = (0..D).fold(0i64, |a, _| a * side + (n - 1));
        (0..geo.cell_count())
            .into_par_iter()
            .map(|i| {
                let base = center + lin[i];
                let mut s = 0.0;
                if transpose {
                    let base = 2 * center - base;
                    for &(l, v) in &support {
                        s += self.table[(base + l) as usize] * v;
                    }
                } else {
                    for &(l, v) in &support {
                        s += self.table[(base - l) as usize] * v;
                    }
                }
                s
            })
            .collect()
    }

    fn check(&self, f: &GridFunction<D>) -> Result<()> {
        if *f.geometry() != self.geometry {
            return Err(Error::GeometryMismatch);
        }
        Ok(())
    }

    /// `Tf` averaged over each cell.
    pub fn apply(&self, f: &GridFunction<D>) -> Result<GridFunction<D>> {
        self.check(f)?;
        let inv = 1.0 / self.geometry.cell_measure();
        let v = self.apply_raw(f.values(), false).into_iter().map(|x| x * inv).collect();
        GridFunction::from_values(self.geometry, v)
    }

    /// `T* f` averaged over each cell.
    pub fn apply_transpose(&self, f: &GridFunction<D>) -> Result<GridFunction<D>> {
        self.check(f)?;
        let inv = 1.0 / self.geometry.cell_measure();
        let v = self.apply_raw(f.values(), true).into_iter().map(|x| x * inv).collect();
        GridFunction::from_values(self.geometry, v)
    }

    /// The operator with kernel `K(y, x)`.
    pub fn transpose(&self) -> Self {
        let mut table = self.table.clone();
        table.reverse();
        Self {
            table,
            testing: OnceLock::new(),
            ..self.clone()
        }
    }

    /// `⟨Tf, g⟩ = Σ A[c, c'] f(c') g(c)`.
    pub fn bilinear_form(&self, f: &GridFunction<D>, g: &GridFunction<D>) -> Result<f64> {
        self.check(f)?;
        self.check(g)?;
        let u = self.apply_raw(f.values(), false);
        Ok(u.iter().zip(g.values()).map(|(a, b)| a * b).sum())
    }

    /// `max(⟨|T1_Q|⟩_Q, ⟨|T*1_Q|⟩_Q)` at mesh resolution.
    pub fn testing_constant(&self, q: &Cube<D>) -> Result<f64> {
        self.geometry.cell_box(q)?;
        Ok(self.testing_by_scale()[(q.scale - self.geometry.scale_min()) as usize])
    }

    /// Largest testing constant over all cubes of the window.
    pub fn testing_constant_max(&self) -> f64 {
        self.testing_by_scale().iter().cloned().fold(0.0, f64::max)
    }

    /// The testing constant only depends on the scale of the cube.
    fn testing_by_scale(&self) -> &[f64] {
        self.testing.get_or_init(|| {
            let geo = self.geometry;
            (geo.scale_min()..=geo.scale_max())
                .map(|s| {
                    let side = geo.side_in_cells(s);
                    let mut cells = Vec::new();
                    for_each_in_box([0i64; D], side, |c| cells.push(c));
                    let measure = (s as f64 * D as f64).exp2();
                    let mut fwd = 0.0;
                    let mut bwd = 0.0;
                    for a in &cells {
                        let (mut u, mut v) = (0.0, 0.0);
                        for b in &cells {
                            let o: [i64; D] = std::array::from_fn(|k| a[k] - b[k]);
                            let neg: [i64; D] = std::array::from_fn(|k| -o[k]);
                            u += self.coefficient(o);
                            v += self.coefficient(neg);
                        }
                        fwd += u.abs();
                        bwd += v.abs();
                    }
                    fwd.max(bwd) / measure
                })
                .collect()
        })
    }
}

/// Euclidean distance from a point to a (standard, geometric) cube.
fn point_cube_distance<const D: usize>(x: [f64; D], q: &Cube<D>) -> f64 {
    let side = q.side();
    let mut s = 0.0;
    for k in 0..D {
        let lo = q.index[k] as f64 * side;
        let hi = lo + side;
        let d = if x[k] < lo {
            lo - x[k]
        } else if x[k] > hi {
            x[k] - hi
        } else {
            0.0
        };
        s += d * d;
    }
    s.sqrt()
}

/// `∫ (ℓQ)^η Φ(y) / ((ℓQ)^{d+η} + dist(y, Q)^{d+η}) dy` with the distance
/// taken from cell centers.
pub fn poisson_like<const D: usize>(phi: &GridFunction<D>, q: &Cube<D>, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("exponent {eta} must be positive")));
    }
    let geo = phi.geometry();
    let l = q.side();
    let p = D as f64 + eta;
    let lp = l.powf(p);
    let s: f64 = phi
        .values()
        .par_iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| v / (lp + point_cube_distance(geo.cell_center(i), q).powf(p)))
        .sum();
    Ok(s * l.powf(eta) * geo.cell_measure())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffDiagonal {
    pub ratio: f64,
    pub pairing: f64,
    pub poisson: f64,
    pub g_l1: f64,
    /// The denominator vanished; the ratio is reported as zero.
    pub degenerate: bool,
}

/// Upper bound for the off-diagonal ratio implied by the kernel constants.
pub fn off_diagonal_bound<const D: usize>(spec: &KernelSpec<D>) -> f64 {
    let d = D as f64;
    spec.size_constant * (d.sqrt() / 2.0).powf(spec.eta) * (1.0 + (d + spec.eta).exp2())
}

/// `|⟨Tf, g⟩| / (P_η|f|(Q) ‖g‖₁)` for mean-zero `g` on `Q` and `f` off `2Q`.
pub fn off_diagonal_check<const D: usize>(
    op: &DiscreteOperator<D>,
    f: &GridFunction<D>,
    g: &GridFunction<D>,
    q: &Cube<D>,
) -> Result<OffDiagonal> {
    let geo = *op.geometry();
    let q_cells = geo.cube_cells(q)?;
    let mut in_q = vec![false; geo.cell_count()];
    for &i in &q_cells {
        in_q[i] = true;
    }
    if g.values().iter().enumerate().any(|(i, v)| *v != 0.0 && !in_q[i]) {
        return Err(Error::Support("g must vanish outside Q".into()));
    }
    let g_l1 = g.l1_norm();
    if g.integral().abs() > 1e-12 * g_l1.max(f64::MIN_POSITIVE) {
        return Err(Error::Support("g must have zero integral".into()));
    }
    let side = q.side();
    for (i, v) in f.values().iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        let x = geo.cell_center(i);
        let inside_double = (0..D).all(|k| {
            let c = (q.index[k] as f64 + 0.5) * side;
            (x[k] - c).abs() < side
        });
        if inside_double {
            return Err(Error::Support("f must vanish on 2Q".into()));
        }
    }
    let pairing = op.bilinear_form(f, g)?;
    let poisson = poisson_like(&f.abs(), q, op.spec().eta)?;
    let denom = poisson * g_l1;
    if denom == 0.0 {
        return Ok(OffDiagonal {
            ratio: 0.0,
            pairing,
            poisson,
            g_l1,
            degenerate: true,
        });
    }
    Ok(OffDiagonal {
        ratio: pairing.abs() / denom,
        pairing,
        poisson,
        g_l1,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardyCheck {
    pub numerator: f64,
    pub ratio: f64,
}

/// `∫_{3P∖P} ∫_P f(x) g(y) |x - y|^{-d} dx dy / (‖f‖_p ‖g‖_{p'})`.
pub fn hardy_check<const D: usize>(p_cube: &Cube<D>, f: &GridFunction<D>, g: &GridFunction<D>, p: f64) -> Result<HardyCheck> {
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::InvalidArgument(format!("exponent {p} must lie in (1, ∞)")));
    }
    if f.geometry() != g.geometry() {
        return Err(Error::GeometryMismatch);
    }
    if f.values().iter().chain(g.values()).any(|v| *v < 0.0) {
        return Err(Error::Negative);
    }
    let geo = *f.geometry();
    let side = geo.side_in_cells(p_cube.scale);
    let corner: [i64; D] = std::array::from_fn(|k| p_cube.index[k] * side);
    for i in 0..geo.cell_count() {
        let c = geo.coord(i);
        let in_p = (0..D).all(|k| c[k] >= corner[k] && c[k] < corner[k] + side);
        let in_triple = (0..D).all(|k| c[k] >= corner[k] - side && c[k] < corner[k] + 2 * side);
        if f.values()[i] != 0.0 && !in_p {
            return Err(Error::Support("f must vanish outside P".into()));
        }
        if g.values()[i] != 0.0 && (in_p || !in_triple) {
            return Err(Error::Support("g must vanish outside 3P∖P".into()));
        }
    }
    let op = DiscreteOperator::new(KernelSpec::<D>::new(KernelKind::Hardy)?, geo, 6)?;
    let numerator = op.bilinear_form(f, g)?;
    let q = p / (p - 1.0);
    let denom = f.lp_norm(p) * g.lp_norm(q);
    let ratio = if denom > 0.0 { numerator / denom } else { 0.0 };
    Ok(HardyCheck { numerator, ratio })
}
