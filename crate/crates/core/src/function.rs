//! Functions that are constant on mesh cells, and the martingale machinery
//! built on the standard dyadic filtration of the window.

use std::io::{BufRead, Write};
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{for_each_in_box, Cube, DyadicGrid, GridGeometry, GridId};

/// `f = Σ values[i] 1_{cell i}`, cells in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GridFunction<const D: usize> {
    geometry: GridGeometry<D>,
    values: Vec<f64>,
}

impl<const D: usize> GridFunction<D> {
    pub fn zeros(geometry: GridGeometry<D>) -> Self {
        Self {
            geometry,
            values: vec![0.0; geometry.cell_count()],
        }
    }

    pub fn constant(geometry: GridGeometry<D>, c: f64) -> Self {
        Self {
            geometry,
            values: vec![c; geometry.cell_count()],
        }
    }

    pub fn from_values(geometry: GridGeometry<D>, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.cell_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} values, got {}",
                geometry.cell_count(),
                values.len()
            )));
        }
        Ok(Self { geometry, values })
    }

    /// Sample `f` at cell centers.
    pub fn from_fn(geometry: GridGeometry<D>, f: impl Fn([f64; D]) -> f64) -> Self {
        let values = (0..geometry.cell_count())
            .map(|i| f(geometry.cell_center(i)))
            .collect();
        Self { geometry, values }
    }

    /// `c · 1_Q` for a standard cube inside the window.
    pub fn indicator(geometry: GridGeometry<D>, q: &Cube<D>, c: f64) -> Result<Self> {
        let mut out = Self::zeros(geometry);
        for i in geometry.cube_cells(q)? {
            out.values[i] = c;
        }
        Ok(out)
    }

    pub fn geometry(&self) -> &GridGeometry<D> {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            geometry: self.geometry,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn abs(&self) -> Self {
        self.map(f64::abs)
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.geometry != other.geometry {
            return Err(Error::GeometryMismatch);
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            geometry: self.geometry,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.geometry.cell_measure()
    }

    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.check_same(other)?;
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        Ok(s * self.geometry.cell_measure())
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.geometry.cell_measure()
    }

    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.geometry.cell_measure()).sqrt()
    }

    pub fn lp_norm(&self, p: f64) -> f64 {
        if p.is_infinite() {
            return self.sup_norm();
        }
        let s: f64 = self.values.iter().map(|v| v.abs().powf(p)).sum();
        (s * self.geometry.cell_measure()).powf(1.0 / p)
    }

    /// `(∫ |f|^p w)^{1/p}`.
    pub fn weighted_lp_norm(&self, p: f64, weight: &Self) -> Result<f64> {
        self.check_same(weight)?;
        let s: f64 = self
            .values
            .iter()
            .zip(&weight.values)
            .map(|(v, w)| v.abs().powf(p) * w)
            .sum();
        Ok((s * self.geometry.cell_measure()).powf(1.0 / p))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Values restricted to the cells of a standard cube, row-major within it.
    pub fn restrict(&self, q: &Cube<D>) -> Result<Vec<f64>> {
        Ok(self.geometry.cube_cells(q)?.into_iter().map(|i| self.values[i]).collect())
    }

    /// Conditional expectation onto standard cubes at `scale`.
    pub fn expectation_at(&self, scale: i32) -> Result<Self> {
        self.geometry.check_scale(scale)?;
        let pyr = Pyramid::new(self);
        let k = (scale - self.geometry.scale_min()) as u32;
        let mut out = Self::zeros(self.geometry);
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = pyr.level(k)[pyr.parent_flat(i, k)];
        }
        Ok(out)
    }

    /// `D_k f = Σ_{ℓP = 2^k} Δ_P f` on the standard grid; zero at the mesh scale.
    pub fn scale_difference(&self, scale: i32) -> Result<Self> {
        self.geometry.check_scale(scale)?;
        if scale == self.geometry.scale_min() {
            return Ok(Self::zeros(self.geometry));
        }
        let fine = self.expectation_at(scale - 1)?;
        let coarse = self.expectation_at(scale)?;
        fine.zip_with(&coarse, |a, b| a - b)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "d,scale_min,scale_max")?;
        writeln!(w, "{},{},{}", D, self.geometry.scale_min(), self.geometry.scale_max())?;
        writeln!(w, "value")?;
        for v in &self.values {
            writeln!(w, "{v:?}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("unexpected end of CSV".into()))?
                .map_err(Error::from)
        };
        next()?;
        let header = next()?;
        let parts: Vec<i64> = header
            .split(',')
            .map(|s| s.trim().parse::<i64>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<_>>()?;
        if parts.len() != 3 || parts[0] != D as i64 {
            return Err(Error::Parse(format!("bad geometry header {header:?}")));
        }
        let geometry = GridGeometry::new(parts[1] as i32, parts[2] as i32)?;
        next()?;
        let mut values = Vec::with_capacity(geometry.cell_count());
        while let Ok(line) = next() {
            if line.trim().is_empty() {
                continue;
            }
            values.push(line.trim().parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?);
        }
        Self::from_values(geometry, values)
    }
}

impl<const D: usize> Add for &GridFunction<D> {
    type Output = GridFunction<D>;
    fn add(self, rhs: Self) -> GridFunction<D> {
        self.zip_with(rhs, |a, b| a + b).expect("geometries differ")
    }
}

impl<const D: usize> Sub for &GridFunction<D> {
    type Output = GridFunction<D>;
    fn sub(self, rhs: Self) -> GridFunction<D> {
        self.zip_with(rhs, |a, b| a - b).expect("geometries differ")
    }
}

impl<const D: usize> Mul<f64> for &GridFunction<D> {
    type Output = GridFunction<D>;
    fn mul(self, c: f64) -> GridFunction<D> {
        self.map(|v| v * c)
    }
}

/// Averages of a function over every standard cube, one array per scale.
/// Level `k` holds cubes of side `2^(scale_min + k)`.
#[derive(Debug, Clone)]
pub struct Pyramid<const D: usize> {
    geometry: GridGeometry<D>,
    levels: Vec<Vec<f64>>,
}

impl<const D: usize> Pyramid<D> {
    pub fn new(f: &GridFunction<D>) -> Self {
        let geometry = f.geometry;
        let l = geometry.level();
        let mut levels = Vec::with_capacity(l as usize + 1);
        levels.push(f.values.clone());
        let inv = 1.0 / (1u64 << D) as f64;
        for k in 1..=l {
            let n_fine = (geometry.side_cells() >> (k - 1)) as usize;
            let n = n_fine / 2;
            let fine = &levels[k as usize - 1];
            let mut coarse = vec![0.0; n.pow(D as u32)];
            for (i, v) in fine.iter().enumerate() {
                coarse[Self::halve(i, n_fine)] += v;
            }
            for v in coarse.iter_mut() {
                *v *= inv;
            }
            levels.push(coarse);
        }
        Self { geometry, levels }
    }

    /// Flat index of the parent of flat index `i` on a side-`n_fine` lattice.
    fn halve(mut i: usize, n_fine: usize) -> usize {
        let n = n_fine / 2;
        let mut out = 0;
        let mut mult = 1;
        for _ in 0..D {
            out += ((i % n_fine) / 2) * mult;
            i /= n_fine;
            mult *= n;
        }
        out
    }

    pub fn geometry(&self) -> &GridGeometry<D> {
        &self.geometry
    }

    pub fn level(&self, k: u32) -> &[f64] {
        &self.levels[k as usize]
    }

    pub fn side_at(&self, k: u32) -> i64 {
        self.geometry.side_cells() >> k
    }

    /// Flat index at level `k` of the cube containing cell `cell`.
    pub fn parent_flat(&self, cell: usize, k: u32) -> usize {
        let c = self.geometry.coord(cell);
        let n = self.side_at(k);
        let mut idx = 0i64;
        for x in c {
            idx = idx * n + (x >> k);
        }
        idx as usize
    }

    pub fn flat_at(&self, k: u32, index: [i64; D]) -> Option<usize> {
        let n = self.side_at(k);
        let mut idx = 0i64;
        for x in index {
            if !(0..n).contains(&x) {
                return None;
            }
            idx = idx * n + x;
        }
        Some(idx as usize)
    }

    /// Mean over a standard cube; cubes above the window use zero extension.
    pub fn mean(&self, q: &Cube<D>) -> Result<f64> {
        if q.grid != GridId::STANDARD {
            return Err(Error::GridMismatch(q.grid, GridId::STANDARD));
        }
        if q.scale < self.geometry.scale_min() {
            return Err(Error::ScaleOutOfRange {
                scale: q.scale,
                min: self.geometry.scale_min(),
                max: self.geometry.scale_max(),
            });
        }
        if q.scale > self.geometry.scale_max() {
            let w = q.ancestor(0);
            let window_in_q = self.geometry.window().ancestor((q.scale - self.geometry.scale_max()) as u32);
            if window_in_q.index != w.index {
                return Err(Error::OutsideWindow);
            }
            let ratio = ((self.geometry.scale_max() - q.scale) as f64 * D as f64).exp2();
            return Ok(self.levels[self.geometry.level() as usize][0] * ratio);
        }
        let k = (q.scale - self.geometry.scale_min()) as u32;
        self.flat_at(k, q.index)
            .map(|i| self.levels[k as usize][i])
            .ok_or(Error::OutsideWindow)
    }

    /// Mean over a standard cube, zero when it misses the window.
    pub fn mean_or_zero(&self, q: &Cube<D>) -> f64 {
        self.mean(q).unwrap_or(0.0)
    }

    /// `⟨f⟩_{3Q}` with zero extension outside the window.
    pub fn triple_mean(&self, q: &Cube<D>) -> f64 {
        let mut lo = q.index;
        for m in lo.iter_mut() {
            *m -= 1;
        }
        let mut s = 0.0;
        for_each_in_box(lo, 3, |m| s += self.mean_or_zero(&Cube::on_grid(q.scale, m, q.grid)));
        s / 3f64.powi(D as i32)
    }

    /// Haar coefficients `⟨f⟩_{Q'} - ⟨f⟩_Q` for the children of `q`, row-major.
    pub fn haar_coefficients(&self, q: &Cube<D>) -> Result<Vec<f64>> {
        if q.scale <= self.geometry.scale_min() {
            return Err(Error::FinestScale);
        }
        let parent = self.mean(q)?;
        q.children().iter().map(|c| Ok(self.mean(c)? - parent)).collect()
    }
}

/// `⟨f⟩_Q` for a standard cube meeting the window (zero extension outside).
pub fn average<const D: usize>(f: &GridFunction<D>, q: &Cube<D>) -> Result<f64> {
    let geo = f.geometry();
    if q.grid != GridId::STANDARD {
        return Err(Error::GridMismatch(q.grid, GridId::STANDARD));
    }
    if q.scale > geo.scale_max() {
        return Pyramid::new(f).mean(q);
    }
    if q.scale < geo.scale_min() {
        return Err(Error::ScaleOutOfRange {
            scale: q.scale,
            min: geo.scale_min(),
            max: geo.scale_max(),
        });
    }
    let vals = f.restrict(q)?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HaarDifference<const D: usize> {
    pub cube: Cube<D>,
    /// `⟨f⟩_{Q'} - ⟨f⟩_Q` for the children `Q'`, row-major.
    pub coefficients: Vec<f64>,
    pub function: GridFunction<D>,
}

pub fn haar_difference<const D: usize>(f: &GridFunction<D>, q: &Cube<D>) -> Result<HaarDifference<D>> {
    let geo = *f.geometry();
    if q.scale <= geo.scale_min() {
        return Err(Error::FinestScale);
    }
    geo.cell_box(q)?;
    let mean = average(f, q)?;
    let children = q.children();
    let mut coefficients = Vec::with_capacity(children.len());
    let mut function = GridFunction::zeros(geo);
    for c in &children {
        let a = average(f, c)? - mean;
        coefficients.push(a);
        for i in geo.cube_cells(c)? {
            function.values[i] = a;
        }
    }
    Ok(HaarDifference {
        cube: *q,
        coefficients,
        function,
    })
}

/// `Σ_Q ε_Q Δ_Q f` over standard cubes `Q ⊆ P0` above the mesh scale.
pub fn martingale_transform<const D: usize>(
    f: &GridFunction<D>,
    coefficient: impl Fn(&Cube<D>) -> f64,
) -> GridFunction<D> {
    let geo = *f.geometry();
    let pyr = Pyramid::new(f);
    let mut out = GridFunction::zeros(geo);
    for k in 1..=geo.level() {
        let scale = geo.scale_min() + k as i32;
        let coarse = pyr.level(k);
        let fine = pyr.level(k - 1);
        let n = pyr.side_at(k);
        let eps: Vec<f64> = (0..coarse.len())
            .map(|i| {
                let mut m = [0i64; D];
                let mut j = i as i64;
                for x in m.iter_mut().rev() {
                    *x = j % n;
                    j /= n;
                }
                coefficient(&Cube::new(scale, m))
            })
            .collect();
        if eps.iter().all(|&e| e == 0.0) {
            continue;
        }
        for (i, v) in out.values.iter_mut().enumerate() {
            let p = pyr.parent_flat(i, k);
            if eps[p] != 0.0 {
                let c = pyr.parent_flat(i, k - 1);
                *v += eps[p] * (fine[c] - coarse[p]);
            }
        }
    }
    out
}

/// `Σ_{Q selected} Δ_Q f`.
pub fn project<const D: usize>(f: &GridFunction<D>, select: impl Fn(&Cube<D>) -> bool) -> GridFunction<D> {
    martingale_transform(f, |q| if select(q) { 1.0 } else { 0.0 })
}

/// Good and bad parts of `f` for the labels read off `grid`'s shift;
/// cubes whose goodness cannot be decided are counted as bad.
pub fn good_bad_split<const D: usize>(
    f: &GridFunction<D>,
    grid: &DyadicGrid<D>,
    params: &crate::grid::GoodnessParams,
) -> (GridFunction<D>, GridFunction<D>) {
    use crate::grid::{classify_good, Goodness};
    let is_good = |q: &Cube<D>| matches!(classify_good(q, grid.omega(), params), Ok(Goodness::Good));
    (project(f, is_good), project(f, |q| !is_good(q)))
}

/// `E(φ | F_S)`: `φ` on `S ∖ ∪F_S`, `⟨φ⟩_{S'}` on each `S' ∈ F_S`, zero off `S`.
pub fn conditional_expectation<const D: usize>(
    phi: &GridFunction<D>,
    s: &Cube<D>,
    family: &[Cube<D>],
) -> Result<GridFunction<D>> {
    let geo = *phi.geometry();
    let mut out = GridFunction::zeros(geo);
    for i in geo.cube_cells(s)? {
        out.values[i] = phi.values[i];
    }
    let mut covered = vec![false; geo.cell_count()];
    for c in family {
        if !s.contains(c) {
            return Err(Error::NotContained);
        }
        let cells = geo.cube_cells(c)?;
        if cells.iter().any(|&i| covered[i]) {
            return Err(Error::OverlappingFamily);
        }
        let mean = cells.iter().map(|&i| phi.values[i]).sum::<f64>() / cells.len() as f64;
        for i in cells {
            covered[i] = true;
            out.values[i] = mean;
        }
    }
    Ok(out)
}

/// Dyadic maximal function over standard cubes inside the window.
pub fn maximal_function<const D: usize>(f: &GridFunction<D>) -> GridFunction<D> {
    let geo = *f.geometry();
    let pyr = Pyramid::new(&f.abs());
    let mut out = f.abs();
    for k in 1..=geo.level() {
        let lv = pyr.level(k);
        for (i, v) in out.values.iter_mut().enumerate() {
            *v = v.max(lv[pyr.parent_flat(i, k)]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CzAtom<const D: usize> {
    pub cube: Cube<D>,
    /// `(f - ⟨f⟩_B) 1_B` on the cells of `B`, row-major within `B`.
    pub values: Vec<f64>,
}

impl<const D: usize> CzAtom<D> {
    pub fn to_function(&self, geometry: GridGeometry<D>) -> Result<GridFunction<D>> {
        let mut out = GridFunction::zeros(geometry);
        for (i, v) in geometry.cube_cells(&self.cube)?.into_iter().zip(&self.values) {
            out.values[i] = *v;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CzDecomposition<const D: usize> {
    pub good: GridFunction<D>,
    pub atoms: Vec<CzAtom<D>>,
    pub lambda: f64,
    /// The window itself exceeded the height, so `B = {P0}`.
    pub degenerate: bool,
}

impl<const D: usize> CzDecomposition<D> {
    pub fn bad_measure(&self) -> f64 {
        self.atoms.iter().map(|a| a.cube.measure()).sum()
    }

    pub fn bad_part(&self) -> GridFunction<D> {
        let geo = *self.good.geometry();
        let mut out = GridFunction::zeros(geo);
        for a in &self.atoms {
            for (i, v) in geo.cube_cells(&a.cube).expect("atom inside window").into_iter().zip(&a.values) {
                out.values[i] += v;
            }
        }
        out
    }
}

/// Calderón–Zygmund decomposition at height `lambda` over maximal standard
/// cubes with `⟨|f|⟩_Q > lambda`.
pub fn cz_decompose<const D: usize>(f: &GridFunction<D>, lambda: f64) -> Result<CzDecomposition<D>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("height {lambda} must be positive")));
    }
    let geo = *f.geometry();
    let abs_pyr = Pyramid::new(&f.abs());
    let mut bad = Vec::new();
    let mut stack = vec![geo.window()];
    while let Some(q) = stack.pop() {
        if abs_pyr.mean(&q)? > lambda {
            bad.push(q);
        } else if q.scale > geo.scale_min() {
            stack.extend(q.children());
        }
    }
    bad.sort();
    let degenerate = bad.first() == Some(&geo.window());
    let mut good = f.clone();
    let mut atoms = Vec::with_capacity(bad.len());
    for b in bad {
        let cells = geo.cube_cells(&b)?;
        let mean = cells.iter().map(|&i| f.values[i]).sum::<f64>() / cells.len() as f64;
        let values = cells.iter().map(|&i| f.values[i] - mean).collect();
        for &i in &cells {
            good.values[i] = mean;
        }
        atoms.push(CzAtom { cube: b, values });
    }
    if degenerate {
        log::warn!("Calderón–Zygmund decomposition degenerated to the whole window at height {lambda}");
    }
    Ok(CzDecomposition {
        good,
        atoms,
        lambda,
        degenerate,
    })
}

/// `Σ_Q |Q| ⟨f⟩_Q^2` over the cubes at `scale` of a shifted grid on the
/// periodic window (cubes wrap around).
fn periodic_block_energy<const D: usize>(f: &GridFunction<D>, shift: [i64; D], scale: i32) -> f64 {
    let geo = f.geometry();
    let n = geo.side_cells();
    let b = geo.side_in_cells(scale);
    let blocks = n / b;
    let mut sums = vec![0.0; (blocks as usize).pow(D as u32)];
    for (i, v) in f.values.iter().enumerate() {
        let c = geo.coord(i);
        let mut idx = 0i64;
        for k in 0..D {
            idx = idx * blocks + (c[k] - shift[k]).rem_euclid(n) / b;
        }
        sums[idx as usize] += v;
    }
    let cell = geo.cell_measure();
    let cells_per_block = (b as f64).powi(D as i32);
    sums.iter().map(|s| s * s).sum::<f64>() * cell / cells_per_block
}

/// `‖D_s f‖²` for every scale `s` above the mesh, for the shifted grid on the
/// periodic window; entry `k` is scale `scale_min + 1 + k`.
pub fn periodic_scale_energies<const D: usize>(f: &GridFunction<D>, grid: &DyadicGrid<D>) -> Result<Vec<f64>> {
    let geo = *f.geometry();
    if geo != *grid.geometry() {
        return Err(Error::GeometryMismatch);
    }
    let mut block = Vec::with_capacity(geo.level() as usize + 1);
    for s in geo.scale_min()..=geo.scale_max() {
        block.push(periodic_block_energy(f, grid.shift_cells(s)?, s));
    }
    Ok(block.windows(2).map(|w| w[0] - w[1]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GoodnessParams, ShiftSequence};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geo1(level: u32) -> GridGeometry<1> {
        GridGeometry::unit(level).unwrap()
    }

    fn random<const D: usize>(geo: GridGeometry<D>, seed: u64) -> GridFunction<D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..geo.cell_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        GridFunction::from_values(geo, v).unwrap()
    }

    #[test]
    fn average_examples() {
        let g = geo1(3);
        let f = GridFunction::from_fn(g, |x| if x[0] < 0.125 { 4.0 } else { 0.0 });
        assert_eq!(average(&f, &Cube::new(-2, [0])).unwrap(), 2.0);
        let half = GridFunction::indicator(g, &Cube::new(-1, [0]), 1.0).unwrap();
        assert_eq!(average(&half, &Cube::new(0, [0])).unwrap(), 0.5);
        assert_eq!(average(&half, &Cube::new(1, [0])).unwrap(), 0.25);
        assert!(average(&half, &Cube::new(0, [3])).is_err());
    }

    #[test]
    fn haar_example() {
        let g = geo1(4);
        let f = GridFunction::indicator(g, &Cube::new(-1, [0]), 1.0).unwrap();
        let h = haar_difference(&f, &Cube::new(0, [0])).unwrap();
        assert_eq!(h.coefficients, vec![0.5, -0.5]);
        assert_eq!(h.function.integral(), 0.0);
        assert_eq!(haar_difference(&f, &Cube::new(-4, [0])).unwrap_err(), Error::FinestScale);
    }

    #[test]
    fn reconstruction_and_plancherel_2d() {
        let g = GridGeometry::<2>::unit(4).unwrap();
        let f = random(g, 1);
        let mean = average(&f, &g.window()).unwrap();
        let all = project(&f, |_| true);
        let rebuilt = all.map(|v| v + mean);
        for (a, b) in rebuilt.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut energy = mean * mean * g.window_measure();
        for q in g.all_cubes() {
            if q.scale > g.scale_min() {
                energy += haar_difference(&f, &q).unwrap().function.l2_norm().powi(2);
            }
        }
        let norm2 = f.l2_norm().powi(2);
        assert!((energy - norm2).abs() < 1e-10 * norm2);
    }

    #[test]
    fn haar_orthogonality_exhaustive() {
        let g = geo1(4);
        let f = random(g, 2);
        let h = random(g, 3);
        let cubes: Vec<_> = g.all_cubes().into_iter().filter(|q| q.scale > g.scale_min()).collect();
        let df: Vec<_> = cubes.iter().map(|q| haar_difference(&f, q).unwrap().function).collect();
        let dh: Vec<_> = cubes.iter().map(|q| haar_difference(&h, q).unwrap().function).collect();
        for i in 0..cubes.len() {
            for j in 0..cubes.len() {
                if i != j {
                    assert!(df[i].inner(&dh[j]).unwrap().abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn good_bad_reconstruction() {
        let g = geo1(8);
        let f = random(g, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let omega = ShiftSequence::random(&mut rng, -8, 8);
        let grid = DyadicGrid::shifted(GridId(1), g, omega).unwrap();
        let params = GoodnessParams::new(0.5, 2).unwrap();
        let (good, bad) = good_bad_split(&f, &grid, &params);
        let mean = average(&f, &g.window()).unwrap();
        for i in 0..g.cell_count() {
            let s = good.values()[i] + bad.values()[i] + mean;
            assert!((s - f.values()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn martingale_transform_contracts() {
        let g = geo1(6);
        let f = random(g, 6);
        let t = martingale_transform(&f, |q| ((q.index[0] * 7 + q.scale as i64) % 5) as f64 / 4.0 - 0.5);
        assert!(t.l2_norm() <= 0.5 * f.l2_norm() + 1e-12);
        assert_eq!(martingale_transform(&f, |_| 0.0).sup_norm(), 0.0);
    }

    #[test]
    fn conditional_expectation_cases() {
        let g = geo1(4);
        let f = random(g, 7);
        let s = Cube::new(-1, [0]);
        let e = conditional_expectation(&f, &s, &[]).unwrap();
        let inside = g.cube_cells(&s).unwrap();
        for i in 0..g.cell_count() {
            let want = if inside.contains(&i) { f.values()[i] } else { 0.0 };
            assert_eq!(e.values()[i], want);
        }
        let e = conditional_expectation(&f, &s, &[s]).unwrap();
        let m = average(&f, &s).unwrap();
        assert!(inside.iter().all(|&i| (e.values()[i] - m).abs() < 1e-15));
        let fam = [Cube::new(-3, [0]), Cube::new(-4, [3])];
        let e = conditional_expectation(&f, &s, &fam).unwrap();
        let lhs: f64 = inside.iter().map(|&i| e.values()[i]).sum();
        let rhs: f64 = inside.iter().map(|&i| f.values()[i]).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let overlap = [Cube::new(-3, [0]), Cube::new(-4, [1])];
        assert_eq!(
            conditional_expectation(&f, &s, &overlap).unwrap_err(),
            Error::OverlappingFamily
        );
    }

    #[test]
    fn maximal_examples() {
        let g = geo1(5);
        let f = GridFunction::indicator(g, &Cube::new(-1, [0]), 1.0).unwrap();
        let m = maximal_function(&f);
        for (i, v) in m.values().iter().enumerate() {
            assert_eq!(*v, if i < 16 { 1.0 } else { 0.5 });
        }
        let r = random(g, 8);
        let mr = maximal_function(&r);
        assert!(mr.values().iter().zip(r.values()).all(|(m, v)| *m >= v.abs()));
    }

    #[test]
    fn cz_example() {
        let g = geo1(3);
        let f = GridFunction::indicator(g, &Cube::new(-3, [0]), 4.0).unwrap();
        let cz = cz_decompose(&f, 1.0).unwrap();
        assert_eq!(cz.atoms.len(), 1);
        assert_eq!(cz.atoms[0].cube, Cube::new(-2, [0]));
        assert_eq!(cz.atoms[0].values, vec![2.0, -2.0]);
        assert_eq!(&cz.good.values()[..3], &[2.0, 2.0, 0.0]);
        assert!(!cz.degenerate);
        let small = cz_decompose(&f.map(|v| v / 8.0), 1.0).unwrap();
        assert!(small.atoms.is_empty());
    }

    #[test]
    fn cz_invariants_random() {
        let g = GridGeometry::<2>::unit(4).unwrap();
        for seed in 0..20 {
            let f = random(g, seed).map(|v| v * v * v * 6.0);
            let lambda = 1.0;
            let cz = cz_decompose(&f, lambda).unwrap();
            let sum = &cz.good + &cz.bad_part();
            assert!(sum.values().iter().zip(f.values()).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!(cz.good.sup_norm() <= 4.0 * lambda + 1e-12);
            assert!(cz.bad_measure() <= f.l1_norm() / lambda + 1e-12);
            for a in &cz.atoms {
                assert!(a.values.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_and_json_round_trip() {
        let g = geo1(3);
        let f = random(g, 9);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let back = GridFunction::<1>::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, f);
        let json = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<GridFunction<1>>(&json).unwrap(), f);
    }

    #[test]
    fn periodic_energy_matches_standard_for_zero_shift() {
        let g = geo1(6);
        let f = random(g, 10);
        let grid = DyadicGrid::standard(g);
        let e = periodic_scale_energies(&f, &grid).unwrap();
        for (k, ek) in e.iter().enumerate() {
            let s = g.scale_min() + 1 + k as i32;
            let direct = f.scale_difference(s).unwrap().l2_norm().powi(2);
            assert!((ek - direct).abs() < 1e-12);
        }
    }
}
