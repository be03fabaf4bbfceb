//! Dyadic and shifted dyadic grids over a bounded window.
//!
//! Scale convention: a cube at scale `s` has sidelength `2^s`. The window
//! `P0 = [0, 2^scale_max)^D` is meshed by cells of side `2^scale_min`.
//! All positional arithmetic is done in integer cell units, so containment
//! and adjacency tests are exact.
//!
//! A shift sequence stores one binary vector per scale `t`; the bit at scale
//! `t` contributes `2^t * omega_t` to the corner of every cube strictly
//! coarser than `t`. Bits below the mesh scale are kept (they still matter
//! for goodness) but do not move cubes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridId(pub u32);

impl GridId {
    pub const STANDARD: GridId = GridId(0);
}

impl Default for GridId {
    fn default() -> Self {
        GridId::STANDARD
    }
}

/// Bounded dyadic window meshed at `2^scale_min`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridGeometry<const D: usize> {
    scale_min: i32,
    scale_max: i32,
}

#[derive(Serialize, Deserialize)]
struct GeometryRepr {
    d: usize,
    scale_min: i32,
    scale_max: i32,
}

impl<const D: usize> Serialize for GridGeometry<D> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GeometryRepr {
            d: D,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
        }
        .serialize(s)
    }
}

impl<'de, const D: usize> Deserialize<'de> for GridGeometry<D> {
    fn deserialize<De: serde::Deserializer<'de>>(de: De) -> std::result::Result<Self, De::Error> {
        let r = GeometryRepr::deserialize(de)?;
        if r.d != D {
            return Err(serde::de::Error::custom(format!(
                "dimension {} does not match expected {}",
                r.d, D
            )));
        }
        GridGeometry::new(r.scale_min, r.scale_max).map_err(serde::de::Error::custom)
    }
}

impl<const D: usize> GridGeometry<D> {
    pub fn new(scale_min: i32, scale_max: i32) -> Result<Self> {
        if D == 0 {
            return Err(Error::InvalidGeometry("dimension must be positive".into()));
        }
        if scale_min >= scale_max {
            return Err(Error::InvalidGeometry(format!(
                "scale_min {scale_min} must be below scale_max {scale_max}"
            )));
        }
        let level = (scale_max - scale_min) as u32;
        if level as usize * D > 40 {
            return Err(Error::InvalidGeometry(format!(
                "mesh with 2^{} cells is too large",
                level as usize * D
            )));
        }
        Ok(Self { scale_min, scale_max })
    }

    /// Unit window `[0,1)^D` with `2^level` cells per side.
    pub fn unit(level: u32) -> Result<Self> {
        Self::new(-(level as i32), 0)
    }

    pub fn dim(&self) -> usize {
        D
    }

    pub fn scale_min(&self) -> i32 {
        self.scale_min
    }

    pub fn scale_max(&self) -> i32 {
        self.scale_max
    }

    /// Mesh level `L = scale_max - scale_min`.
    pub fn level(&self) -> u32 {
        (self.scale_max - self.scale_min) as u32
    }

    pub fn side_cells(&self) -> i64 {
        1i64 << self.level()
    }

    pub fn cell_count(&self) -> usize {
        (self.side_cells() as usize).pow(D as u32)
    }

    pub fn cell_side(&self) -> f64 {
        (self.scale_min as f64).exp2()
    }

    pub fn cell_measure(&self) -> f64 {
        self.cell_side().powi(D as i32)
    }

    pub fn window_side(&self) -> f64 {
        (self.scale_max as f64).exp2()
    }

    pub fn window_measure(&self) -> f64 {
        self.window_side().powi(D as i32)
    }

    /// The top cube `P0`.
    pub fn window(&self) -> Cube<D> {
        Cube::new(self.scale_max, [0; D])
    }

    pub fn contains_scale(&self, scale: i32) -> bool {
        scale >= self.scale_min && scale <= self.scale_max
    }

    pub fn check_scale(&self, scale: i32) -> Result<()> {
        if self.contains_scale(scale) {
            Ok(())
        } else {
            Err(Error::ScaleOutOfRange {
                scale,
                min: self.scale_min,
                max: self.scale_max,
            })
        }
    }

    /// Side of a cube at `scale` in cell units.
    pub fn side_in_cells(&self, scale: i32) -> i64 {
        1i64 << (scale - self.scale_min)
    }

    /// Row-major flat index (last coordinate fastest).
    pub fn flat(&self, coord: [i64; D]) -> usize {
        let n = self.side_cells();
        let mut idx = 0i64;
        for c in coord {
            idx = idx * n + c;
        }
        idx as usize
    }

    pub fn coord(&self, mut flat: usize) -> [i64; D] {
        let n = self.side_cells() as usize;
        let mut c = [0i64; D];
        for k in (0..D).rev() {
            c[k] = (flat % n) as i64;
            flat /= n;
        }
        c
    }

    pub fn cell_center(&self, flat: usize) -> [f64; D] {
        let h = self.cell_side();
        let c = self.coord(flat);
        let mut x = [0.0; D];
        for k in 0..D {
            x[k] = (c[k] as f64 + 0.5) * h;
        }
        x
    }

    pub fn in_window(&self, coord: [i64; D]) -> bool {
        let n = self.side_cells();
        coord.iter().all(|&c| (0..n).contains(&c))
    }

    /// Cubes of the standard window grid at `scale`, in row-major index order.
    pub fn cubes_at(&self, scale: i32) -> Vec<Cube<D>> {
        let per_side = 1i64 << (self.scale_max - scale);
        let mut out = Vec::with_capacity((per_side as usize).pow(D as u32));
        for_each_in_box([0; D], per_side, |m| out.push(Cube::new(scale, m)));
        out
    }

    /// All standard cubes inside the window, coarsest first.
    pub fn all_cubes(&self) -> Vec<Cube<D>> {
        (self.scale_min..=self.scale_max)
            .rev()
            .flat_map(|s| self.cubes_at(s))
            .collect()
    }

    /// Corner (cell units) and side (cells) of a standard-grid cube.
    pub fn cell_box(&self, cube: &Cube<D>) -> Result<([i64; D], i64)> {
        if cube.grid != GridId::STANDARD {
            return Err(Error::GridMismatch(cube.grid, GridId::STANDARD));
        }
        self.check_scale(cube.scale)?;
        let side = self.side_in_cells(cube.scale);
        let mut corner = [0i64; D];
        for k in 0..D {
            corner[k] = cube.index[k] * side;
        }
        let n = self.side_cells();
        if corner.iter().any(|&c| c < 0 || c + side > n) {
            return Err(Error::OutsideWindow);
        }
        Ok((corner, side))
    }

    /// Flat cell indices of a standard-grid cube inside the window.
    pub fn cube_cells(&self, cube: &Cube<D>) -> Result<Vec<usize>> {
        let (corner, side) = self.cell_box(cube)?;
        let mut out = Vec::with_capacity((side as usize).pow(D as u32));
        for_each_in_box(corner, side, |c| out.push(self.flat(c)));
        Ok(out)
    }

    /// Standard cube at `scale` containing the given cell.
    pub fn cube_of_cell(&self, flat: usize, scale: i32) -> Cube<D> {
        let c = self.coord(flat);
        let side = self.side_in_cells(scale);
        let mut m = [0i64; D];
        for k in 0..D {
            m[k] = c[k].div_euclid(side);
        }
        Cube::new(scale, m)
    }
}

/// Visit every integer point of the box `[corner, corner + side)^D` in
/// row-major order.
pub fn for_each_in_box<const D: usize>(corner: [i64; D], side: i64, mut f: impl FnMut([i64; D])) {
    if side <= 0 {
        return;
    }
    let mut cur = corner;
    loop {
        f(cur);
        let mut k = D;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            cur[k] += 1;
            if cur[k] < corner[k] + side {
                break;
            }
            cur[k] = corner[k];
        }
    }
}

/// A cube of a dyadic grid, addressed by scale and integer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cube<const D: usize> {
    pub scale: i32,
    pub index: [i64; D],
    pub grid: GridId,
}

#[derive(Serialize, Deserialize)]
struct CubeRepr {
    s: i32,
    m: Vec<i64>,
    #[serde(default)]
    grid: u32,
}

impl<const D: usize> Serialize for Cube<D> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CubeRepr {
            s: self.scale,
            m: self.index.to_vec(),
            grid: self.grid.0,
        }
        .serialize(s)
    }
}

impl<'de, const D: usize> Deserialize<'de> for Cube<D> {
    fn deserialize<De: serde::Deserializer<'de>>(de: De) -> std::result::Result<Self, De::Error> {
        let r = CubeRepr::deserialize(de)?;
        let index: [i64; D] = r
            .m
            .try_into()
            .map_err(|_| serde::de::Error::custom("cube index has wrong dimension"))?;
        Ok(Cube {
            scale: r.s,
            index,
            grid: GridId(r.grid),
        })
    }
}

impl<const D: usize> Cube<D> {
    pub fn new(scale: i32, index: [i64; D]) -> Self {
        Self {
            scale,
            index,
            grid: GridId::STANDARD,
        }
    }

    pub fn on_grid(scale: i32, index: [i64; D], grid: GridId) -> Self {
        Self { scale, index, grid }
    }

    pub fn side(&self) -> f64 {
        (self.scale as f64).exp2()
    }

    pub fn measure(&self) -> f64 {
        self.side().powi(D as i32)
    }

    /// Parent in the unshifted lattice.
    pub fn parent(&self) -> Self {
        let mut index = self.index;
        for m in index.iter_mut() {
            *m = m.div_euclid(2);
        }
        Self {
            scale: self.scale + 1,
            index,
            grid: self.grid,
        }
    }

    /// Ancestor `levels` scales up in the unshifted lattice.
    pub fn ancestor(&self, levels: u32) -> Self {
        let mut index = self.index;
        for m in index.iter_mut() {
            *m = m.div_euclid(1i64 << levels);
        }
        Self {
            scale: self.scale + levels as i32,
            index,
            grid: self.grid,
        }
    }

    /// The `2^D` children in the unshifted lattice, row-major.
    pub fn children(&self) -> Vec<Self> {
        let mut base = self.index;
        for m in base.iter_mut() {
            *m *= 2;
        }
        let mut out = Vec::with_capacity(1 << D);
        for_each_in_box(base, 2, |index| {
            out.push(Self {
                scale: self.scale - 1,
                index,
                grid: self.grid,
            })
        });
        out
    }

    /// Containment in the unshifted lattice (`other ⊆ self`).
    pub fn contains(&self, other: &Self) -> bool {
        other.grid == self.grid
            && other.scale <= self.scale
            && other.ancestor((self.scale - other.scale) as u32).index == self.index
    }

    /// `other ⋐ self`: contained with `2^r ℓ(other) ≤ ℓ(self)`.
    pub fn strongly_contains(&self, other: &Self, r: u32) -> bool {
        self.scale - other.scale >= r as i32 && self.contains(other)
    }
}

/// Axis-parallel cube in physical coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricCube<const D: usize> {
    #[serde(with = "array_serde")]
    pub corner: [f64; D],
    pub side: f64,
}

pub(crate) mod array_serde {
    use serde::{de::DeserializeOwned, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, T: Serialize, const D: usize>(a: &[T; D], s: S) -> Result<S::Ok, S::Error> {
        a.as_slice().serialize(s)
    }

    pub fn deserialize<'de, De: Deserializer<'de>, T: DeserializeOwned, const D: usize>(
        de: De,
    ) -> Result<[T; D], De::Error> {
        let v = Vec::<T>::deserialize(de)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("wrong dimension"))
    }
}

impl<const D: usize> GeometricCube<D> {
    pub fn contains(&self, other: &Self) -> bool {
        (0..D).all(|k| {
            other.corner[k] >= self.corner[k]
                && other.corner[k] + other.side <= self.corner[k] + self.side
        })
    }
}

/// One binary vector per scale, starting at `base_scale`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftSequence<const D: usize> {
    base_scale: i32,
    bits: Vec<[u8; D]>,
}

impl<const D: usize> ShiftSequence<D> {
    pub fn new(base_scale: i32, bits: Vec<[u8; D]>) -> Result<Self> {
        if bits.iter().flatten().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("shift bits must be 0 or 1".into()));
        }
        Ok(Self { base_scale, bits })
    }

    pub fn zero(base_scale: i32, len: usize) -> Self {
        Self {
            base_scale,
            bits: vec![[0; D]; len],
        }
    }

    /// Uniform product measure on `{0,1}^D` per scale.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, base_scale: i32, len: usize) -> Self {
        let bits = (0..len)
            .map(|_| {
                let mut v = [0u8; D];
                for b in v.iter_mut() {
                    *b = rng.gen_range(0..=1);
                }
                v
            })
            .collect();
        Self { base_scale, bits }
    }

    /// Every coordinate follows the same generator `bit(scale)`.
    pub fn from_fn(base_scale: i32, len: usize, mut bit: impl FnMut(i32, usize) -> u8) -> Self {
        let bits = (0..len)
            .map(|i| {
                let t = base_scale + i as i32;
                let mut v = [0u8; D];
                for (k, b) in v.iter_mut().enumerate() {
                    *b = bit(t, k) & 1;
                }
                v
            })
            .collect();
        Self { base_scale, bits }
    }

    pub fn base_scale(&self) -> i32 {
        self.base_scale
    }

    /// One past the coarsest stored scale.
    pub fn top_scale(&self) -> i32 {
        self.base_scale + self.bits.len() as i32
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, scale: i32) -> Option<[u8; D]> {
        if scale < self.base_scale {
            return None;
        }
        self.bits.get((scale - self.base_scale) as usize).copied()
    }

    pub fn bits(&self) -> &[[u8; D]] {
        &self.bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Goodness {
    Good,
    Bad,
}

/// `gamma` in (0,1) and the run threshold `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoodnessParams {
    pub gamma: f64,
    pub r: u32,
}

impl GoodnessParams {
    /// Requires `r >= max(ceil(1/(1-gamma)), ceil(1/gamma))`.
    pub fn new(gamma: f64, r: u32) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidGoodness(format!("gamma {gamma} not in (0,1)")));
        }
        let min_r = Self::min_r(gamma);
        if r < min_r {
            return Err(Error::InvalidGoodness(format!(
                "r = {r} below the minimum {min_r} for gamma = {gamma}"
            )));
        }
        Ok(Self { gamma, r })
    }

    pub fn min_r(gamma: f64) -> u32 {
        let a = (1.0 / (1.0 - gamma) - 1e-12).ceil();
        let b = (1.0 / gamma - 1e-12).ceil();
        a.max(b).max(1.0) as u32
    }

    /// Whether `r > c (1 + ln(1/gamma))`, the size needed to restrict to good
    /// functions; `c` is not known in closed form and is left to the caller.
    pub fn satisfies_good_is_enough(&self, c: f64) -> bool {
        self.r as f64 > c * (1.0 + (1.0 / self.gamma).ln())
    }

    /// First run index `floor((1-gamma) s)` for run length parameter `s`.
    pub fn run_start(&self, s: u32) -> u32 {
        ((1.0 - self.gamma) * s as f64 + 1e-9).floor() as u32
    }
}

/// True when the vectors `v(lo..=hi)` agree in at least one coordinate.
fn run_agrees<const D: usize>(lo: u32, hi: u32, v: impl Fn(u32) -> [u8; D]) -> bool {
    let first = v(lo);
    (0..D).any(|k| (lo + 1..=hi).all(|m| v(m)[k] == first[k]))
}

/// Goodness read off the shift bits at levels finer than `q`.
///
/// With `ℓQ = 2^s`, "m levels finer" is the bit at scale `s - m`. The cube
/// is bad when some `t >= r` and coordinate have the bits at `m` in
/// `floor((1-gamma)t) ..= t` all equal. Only runs with `t <= s - base_scale`
/// are observable; if even `t = r` is not, the answer is undecidable.
pub fn classify_good<const D: usize>(
    q: &Cube<D>,
    omega: &ShiftSequence<D>,
    params: &GoodnessParams,
) -> Result<Goodness> {
    if q.scale - 1 >= omega.top_scale() {
        return Err(Error::ScaleOutOfRange {
            scale: q.scale,
            min: omega.base_scale,
            max: omega.top_scale(),
        });
    }
    let available = q.scale - omega.base_scale;
    if available < params.r as i32 {
        return Err(Error::Undecidable {
            scale: q.scale,
            available,
            needed: params.r,
        });
    }
    let bit = |m: u32| omega.get(q.scale - m as i32).expect("checked range");
    for t in params.r..=available as u32 {
        if run_agrees(params.run_start(t), t, bit) {
            return Ok(Goodness::Bad);
        }
    }
    Ok(Goodness::Good)
}

pub const STANDARD_EXTENSION: u32 = 40;

/// A dyadic grid: window geometry plus a shift sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadicGrid<const D: usize> {
    pub id: GridId,
    geometry: GridGeometry<D>,
    omega: ShiftSequence<D>,
}

/// Serialized form `{d, scale_min, scale_max, gamma, r, omega, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDescription {
    pub d: usize,
    pub scale_min: i32,
    pub scale_max: i32,
    pub gamma: f64,
    pub r: u32,
    pub omega: Vec<Vec<u8>>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_base_scale: Option<i32>,
}

impl<const D: usize> DyadicGrid<D> {
    /// The unshifted grid; it extends `STANDARD_EXTENSION` scales above the window.
    pub fn standard(geometry: GridGeometry<D>) -> Self {
        Self {
            id: GridId::STANDARD,
            geometry,
            omega: ShiftSequence::zero(
                geometry.scale_min(),
                (geometry.level() + STANDARD_EXTENSION) as usize,
            ),
        }
    }

    /// The shift must cover every scale from the mesh to just below the window.
    pub fn shifted(id: GridId, geometry: GridGeometry<D>, omega: ShiftSequence<D>) -> Result<Self> {
        if omega.base_scale() > geometry.scale_min() || omega.top_scale() < geometry.scale_max() {
            return Err(Error::InvalidArgument(format!(
                "shift covers scales [{}, {}) but the grid needs [{}, {})",
                omega.base_scale(),
                omega.top_scale(),
                geometry.scale_min(),
                geometry.scale_max()
            )));
        }
        Ok(Self { id, geometry, omega })
    }

    pub fn geometry(&self) -> &GridGeometry<D> {
        &self.geometry
    }

    pub fn omega(&self) -> &ShiftSequence<D> {
        &self.omega
    }

    /// Coarsest scale whose cubes have a well defined position.
    pub fn top_scale(&self) -> i32 {
        self.omega.top_scale()
    }

    pub fn cube(&self, scale: i32, index: [i64; D]) -> Cube<D> {
        Cube::on_grid(scale, index, self.id)
    }

    fn check_cube(&self, q: &Cube<D>) -> Result<()> {
        if q.grid != self.id {
            return Err(Error::GridMismatch(q.grid, self.id));
        }
        if q.scale < self.geometry.scale_min() || q.scale > self.top_scale() {
            return Err(Error::ScaleOutOfRange {
                scale: q.scale,
                min: self.geometry.scale_min(),
                max: self.top_scale(),
            });
        }
        Ok(())
    }

    /// `sum_{scale_min <= t < scale} 2^(t - scale_min) omega_t`, in cells.
    pub fn shift_cells(&self, scale: i32) -> Result<[i64; D]> {
        let smin = self.geometry.scale_min();
        if scale < smin || scale > self.top_scale() {
            return Err(Error::ScaleOutOfRange {
                scale,
                min: smin,
                max: self.top_scale(),
            });
        }
        let mut sh = [0i64; D];
        for t in smin..scale {
            let w = self.omega.get(t).expect("covered by construction");
            for k in 0..D {
                sh[k] += (w[k] as i64) << (t - smin);
            }
        }
        Ok(sh)
    }

    /// Corner of `q` in cell units (may lie outside the window).
    pub fn corner_cells(&self, q: &Cube<D>) -> Result<[i64; D]> {
        self.check_cube(q)?;
        let sh = self.shift_cells(q.scale)?;
        let side = self.geometry.side_in_cells(q.scale);
        let mut c = [0i64; D];
        for k in 0..D {
            c[k] = q.index[k] * side + sh[k];
        }
        Ok(c)
    }

    /// Geometric realization `2^s (m + [0,1)^D) + shift`.
    pub fn realize(&self, q: &Cube<D>) -> Result<GeometricCube<D>> {
        let c = self.corner_cells(q)?;
        let h = self.geometry.cell_side();
        let mut corner = [0.0; D];
        for k in 0..D {
            corner[k] = c[k] as f64 * h;
        }
        Ok(GeometricCube {
            corner,
            side: q.side(),
        })
    }

    pub fn parent(&self, q: &Cube<D>) -> Result<Cube<D>> {
        self.check_cube(q)?;
        if q.scale >= self.top_scale() {
            return Err(Error::ScaleOutOfRange {
                scale: q.scale + 1,
                min: self.geometry.scale_min(),
                max: self.top_scale(),
            });
        }
        let w = self.omega.get(q.scale).expect("scale below top");
        let mut index = q.index;
        for k in 0..D {
            index[k] = (index[k] - w[k] as i64).div_euclid(2);
        }
        Ok(Cube::on_grid(q.scale + 1, index, self.id))
    }

    pub fn children(&self, q: &Cube<D>) -> Result<Vec<Cube<D>>> {
        self.check_cube(q)?;
        if q.scale <= self.geometry.scale_min() {
            return Err(Error::FinestScale);
        }
        let w = self.omega.get(q.scale - 1).expect("scale in range");
        let mut base = q.index;
        for k in 0..D {
            base[k] = 2 * base[k] + w[k] as i64;
        }
        let mut out = Vec::with_capacity(1 << D);
        for_each_in_box(base, 2, |m| out.push(Cube::on_grid(q.scale - 1, m, self.id)));
        Ok(out)
    }

    /// The cube at `scale` containing cell `coord` (cell units, any position).
    pub fn cube_containing(&self, coord: [i64; D], scale: i32) -> Result<Cube<D>> {
        let sh = self.shift_cells(scale)?;
        let side = self.geometry.side_in_cells(scale);
        let mut m = [0i64; D];
        for k in 0..D {
            m[k] = (coord[k] - sh[k]).div_euclid(side);
        }
        Ok(Cube::on_grid(scale, m, self.id))
    }

    /// Cubes at `scale` that meet the window.
    pub fn cubes_meeting_window(&self, scale: i32) -> Result<Vec<Cube<D>>> {
        let n = self.geometry.side_cells();
        let lo = self.cube_containing([0; D], scale)?;
        let hi = self.cube_containing([n - 1; D], scale)?;
        let count = hi.index[0] - lo.index[0] + 1;
        let mut out = Vec::new();
        for_each_in_box(lo.index, count, |m| out.push(Cube::on_grid(scale, m, self.id)));
        Ok(out)
    }

    /// Containment `inner ⊆ outer` within this grid.
    pub fn contains(&self, outer: &Cube<D>, inner: &Cube<D>) -> Result<bool> {
        let (a, sa) = (self.corner_cells(outer)?, self.geometry.side_in_cells(outer.scale));
        let (b, sb) = (self.corner_cells(inner)?, self.geometry.side_in_cells(inner.scale));
        Ok((0..D).all(|k| b[k] >= a[k] && b[k] + sb <= a[k] + sa))
    }

    /// Child digits of `q` inside its ancestors: entry `t-1` is the position
    /// (0 = lower half, 1 = upper half) of the level-`(t-1)` ancestor inside
    /// the level-`t` ancestor, for `t = 1..=levels`.
    pub fn position_digits(&self, q: &Cube<D>, levels: u32) -> Result<Vec<[u8; D]>> {
        let mut cur = *q;
        let mut out = Vec::with_capacity(levels as usize);
        for _ in 0..levels {
            let w = self.omega.get(cur.scale).ok_or(Error::ScaleOutOfRange {
                scale: cur.scale,
                min: self.geometry.scale_min(),
                max: self.top_scale(),
            })?;
            let mut d = [0u8; D];
            for k in 0..D {
                d[k] = (cur.index[k] - w[k] as i64).rem_euclid(2) as u8;
            }
            out.push(d);
            cur = self.parent(&cur)?;
        }
        Ok(out)
    }

    /// Goodness read off the position of `q` inside its ancestors up to the
    /// window: bad when some run of child digits over levels
    /// `floor((1-gamma)t) ..= t` (with `t + 1` levels to the ancestor) is
    /// constant in one coordinate. Cubes with fewer than `r + 1` ancestor
    /// levels inside the window are good vacuously.
    pub fn classify_position_good(&self, q: &Cube<D>, params: &GoodnessParams) -> Result<Goodness> {
        self.check_cube(q)?;
        let above = self.geometry.scale_max() - q.scale;
        if above < params.r as i32 + 1 {
            return Ok(Goodness::Good);
        }
        let digits = self.position_digits(q, (above - 1) as u32)?;
        let bit = |t: u32| digits[(t - 1) as usize];
        for t in params.r..=(above - 1) as u32 {
            if run_agrees(params.run_start(t), t, bit) {
                return Ok(Goodness::Bad);
            }
        }
        Ok(Goodness::Good)
    }

    pub fn describe(&self, params: &GoodnessParams, seed: u64) -> GridDescription {
        GridDescription {
            d: D,
            scale_min: self.geometry.scale_min(),
            scale_max: self.geometry.scale_max(),
            gamma: params.gamma,
            r: params.r,
            omega: self.omega.bits().iter().map(|b| b.to_vec()).collect(),
            seed,
            omega_base_scale: (self.omega.base_scale() != self.geometry.scale_min())
                .then_some(self.omega.base_scale()),
        }
    }

    pub fn from_description(id: GridId, desc: &GridDescription) -> Result<(Self, GoodnessParams)> {
        if desc.d != D {
            return Err(Error::InvalidGeometry(format!(
                "description has d = {} but {} was expected",
                desc.d, D
            )));
        }
        let geometry = GridGeometry::new(desc.scale_min, desc.scale_max)?;
        let bits = desc
            .omega
            .iter()
            .map(|v| {
                <[u8; D]>::try_from(v.as_slice())
                    .map_err(|_| Error::Parse("omega entry has wrong dimension".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let base = desc.omega_base_scale.unwrap_or(desc.scale_min);
        let omega = ShiftSequence::new(base, bits)?;
        let params = GoodnessParams::new(desc.gamma, desc.r)?;
        Ok((Self::shifted(id, geometry, omega)?, params))
    }
}

/// Euclidean distance from `q` to the skeleton of `p` (the union of the
/// boundaries of the children of `p`).
pub fn skeleton_distance<const D: usize>(grid: &DyadicGrid<D>, q: &Cube<D>, p: &Cube<D>) -> Result<f64> {
    if !grid.contains(p, q)? {
        return Err(Error::NotContained);
    }
    let h = grid.geometry().cell_side();
    let qc = grid.corner_cells(q)?;
    let pc = grid.corner_cells(p)?;
    let sq = grid.geometry().side_in_cells(q.scale);
    let sp = grid.geometry().side_in_cells(p.scale);
    let mut best = i64::MAX;
    for k in 0..D {
        let lo = qc[k] - pc[k];
        let hi = lo + sq;
        for plane in [0, sp / 2, sp] {
            let d = if plane <= lo {
                lo - plane
            } else if plane >= hi {
                plane - hi
            } else {
                0
            };
            best = best.min(d);
        }
    }
    Ok(best as f64 * h)
}

/// Position of `q` relative to `p` in the four-way split of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Inside,
    Near,
    Far,
    Neighbor,
    NotApplicable,
}

/// Classify the pair `(p, q)` with `ℓq ≤ ℓp`. Pairs with `2^r ℓq ≤ ℓp` that
/// meet `3p` are inside or near; pairs with `ℓp < 2^r ℓq` that meet `3p` are
/// neighbors; the rest are far.
pub fn relation<const D: usize>(grid: &DyadicGrid<D>, p: &Cube<D>, q: &Cube<D>, r: u32) -> Result<Relation> {
    if p.grid != q.grid {
        return Err(Error::GridMismatch(p.grid, q.grid));
    }
    if q.scale > p.scale {
        return Ok(Relation::NotApplicable);
    }
    let pc = grid.corner_cells(p)?;
    let qc = grid.corner_cells(q)?;
    let sp = grid.geometry().side_in_cells(p.scale);
    let sq = grid.geometry().side_in_cells(q.scale);
    let meets_triple = (0..D).all(|k| qc[k] < pc[k] + 2 * sp && qc[k] + sq > pc[k] - sp);
    if !meets_triple {
        return Ok(Relation::Far);
    }
    if p.scale - q.scale < r as i32 {
        return Ok(Relation::Neighbor);
    }
    let in_p = (0..D).all(|k| qc[k] >= pc[k] && qc[k] + sq <= pc[k] + sp);
    if in_p {
        return Ok(Relation::Inside);
    }
    let in_triple = (0..D).all(|k| qc[k] >= pc[k] - sp && qc[k] + sq <= pc[k] + 2 * sp);
    let meets_p = (0..D).all(|k| qc[k] < pc[k] + sp && qc[k] + sq > pc[k]);
    if in_triple && !meets_p {
        Ok(Relation::Near)
    } else {
        Err(Error::InvalidArgument(
            "cubes are not nested as cubes of one dyadic grid".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid1(scale_min: i32, scale_max: i32) -> GridGeometry<1> {
        GridGeometry::new(scale_min, scale_max).unwrap()
    }

    #[test]
    fn shift_cube_examples() {
        let geo = grid1(-6, 2);
        let zero = DyadicGrid::standard(geo);
        let q = Cube::new(0, [0]);
        assert_eq!(zero.realize(&q).unwrap().corner, [0.0]);

        let one = ShiftSequence::from_fn(-6, 8, |t, _| (t == -1) as u8);
        let g = DyadicGrid::shifted(GridId(1), geo, one).unwrap();
        let r = g.realize(&g.cube(0, [0])).unwrap();
        assert_eq!((r.corner[0], r.side), (0.5, 1.0));

        let four = ShiftSequence::from_fn(-6, 8, |t, _| (-4..=-1).contains(&t) as u8);
        let g = DyadicGrid::shifted(GridId(2), geo, four).unwrap();
        let r = g.realize(&g.cube(0, [0])).unwrap();
        assert_eq!(r.corner[0], 15.0 / 16.0);
        assert_eq!(r.corner[0] + r.side, 31.0 / 16.0);
    }

    #[test]
    fn shift_truncates_at_mesh() {
        let geo = grid1(-2, 1);
        let omega = ShiftSequence::from_fn(-10, 11, |_, _| 1);
        let g = DyadicGrid::shifted(GridId(1), geo, omega).unwrap();
        let r = g.realize(&g.cube(0, [0])).unwrap();
        assert_eq!(r.corner[0], 0.75);
        assert!(matches!(
            g.realize(&g.cube(5, [0])),
            Err(Error::ScaleOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_shift_is_bad_everywhere() {
        let params = GoodnessParams::new(0.5, 2).unwrap();
        let omega = ShiftSequence::<1>::zero(-12, 12);
        for s in -9..=0 {
            assert_eq!(
                classify_good(&Cube::new(s, [0]), &omega, &params).unwrap(),
                Goodness::Bad
            );
        }
    }

    #[test]
    fn alternating_shift_is_good() {
        let params = GoodnessParams::new(0.5, 2).unwrap();
        let omega = ShiftSequence::<1>::from_fn(-12, 12, |t, _| t.rem_euclid(2) as u8);
        for s in -10..=0 {
            // independent scan of every run length up to the window
            let avail = (s + 12) as u32;
            let mut bad = false;
            for t in 2..=avail {
                let lo = (t as f64 * 0.5).floor() as u32;
                let vals: Vec<u8> = (lo..=t).map(|m| omega.get(s - m as i32).unwrap()[0]).collect();
                bad |= vals.iter().all(|&v| v == vals[0]);
            }
            assert!(!bad);
            assert_eq!(
                classify_good(&Cube::new(s, [3]), &omega, &params).unwrap(),
                Goodness::Good
            );
        }
    }

    #[test]
    fn undecidable_near_mesh() {
        let params = GoodnessParams::new(0.5, 4).unwrap();
        let omega = ShiftSequence::<1>::zero(-8, 8);
        let err = classify_good(&Cube::new(-6, [0]), &omega, &params).unwrap_err();
        assert!(matches!(err, Error::Undecidable { .. }));
    }

    #[test]
    fn goodness_params_minimum() {
        assert!(GoodnessParams::new(0.25, 3).is_err());
        assert!(GoodnessParams::new(0.25, 4).is_ok());
        assert!(GoodnessParams::new(0.75, 3).is_err());
        assert!(GoodnessParams::new(0.75, 4).is_ok());
        assert!(GoodnessParams::new(1.0, 4).is_err());
        assert!(GoodnessParams::new(0.5, 2).unwrap().satisfies_good_is_enough(1.0));
        assert!(!GoodnessParams::new(0.5, 2).unwrap().satisfies_good_is_enough(2.0));
    }

    #[test]
    fn bad_frequency_drops_with_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<_> = (0..400).map(|_| ShiftSequence::<1>::random(&mut rng, -40, 40)).collect();
        let q = Cube::new(0, [0]);
        let freq = |r: u32| {
            let p = GoodnessParams::new(0.5, r).unwrap();
            samples
                .iter()
                .filter(|w| classify_good(&q, w, &p).unwrap() == Goodness::Bad)
                .count()
        };
        let counts: Vec<_> = [2, 4, 6, 8].into_iter().map(freq).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
        assert!(counts[3] < counts[0]);
    }

    #[test]
    fn skeleton_distance_examples() {
        let g = DyadicGrid::standard(grid1(-6, 0));
        let p = Cube::new(0, [0]);
        let d = skeleton_distance(&g, &Cube::new(-3, [2]), &p).unwrap();
        assert_eq!(d, 1.0 / 8.0);
        assert_eq!(skeleton_distance(&g, &Cube::new(-1, [1]), &p).unwrap(), 0.0);
        assert_eq!(skeleton_distance(&g, &Cube::new(-3, [4]), &p).unwrap(), 0.0);
        assert_eq!(
            skeleton_distance(&g, &p, &Cube::new(-3, [4])).unwrap_err(),
            Error::NotContained
        );
    }

    #[test]
    fn relation_examples() {
        let r = 3;
        let g = DyadicGrid::standard(grid1(-8, 2));
        let p = Cube::new(0, [0]);
        let s = -(r as i32) - 1;
        assert_eq!(relation(&g, &p, &Cube::new(s, [0]), r).unwrap(), Relation::Inside);
        assert_eq!(relation(&g, &p, &Cube::new(s, [2 << (r + 1)]), r).unwrap(), Relation::Far);
        assert_eq!(relation(&g, &p, &Cube::new(s, [1 << (r + 1)]), r).unwrap(), Relation::Near);
        assert_eq!(relation(&g, &p, &Cube::new(-1, [2]), r).unwrap(), Relation::Neighbor);
        assert_eq!(relation(&g, &Cube::new(-1, [0]), &p, r).unwrap(), Relation::NotApplicable);
        let other = Cube::on_grid(-1, [0], GridId(4));
        assert!(matches!(relation(&g, &p, &other, r), Err(Error::GridMismatch(..))));
    }

    #[test]
    fn shifted_parent_child_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geo = GridGeometry::<2>::new(-4, 0).unwrap();
        let omega = ShiftSequence::random(&mut rng, -4, 6);
        let g = DyadicGrid::shifted(GridId(9), geo, omega).unwrap();
        for q in g.cubes_meeting_window(-2).unwrap() {
            let p = g.parent(&q).unwrap();
            assert!(g.children(&p).unwrap().contains(&q));
            assert!(g.contains(&p, &q).unwrap());
        }
    }

    #[test]
    fn description_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let geo = GridGeometry::<2>::new(-5, 0).unwrap();
        let omega = ShiftSequence::random(&mut rng, -5, 5);
        let g = DyadicGrid::shifted(GridId(1), geo, omega).unwrap();
        let params = GoodnessParams::new(0.3, 4).unwrap();
        let json = serde_json::to_string(&g.describe(&params, 11)).unwrap();
        let desc: GridDescription = serde_json::from_str(&json).unwrap();
        let (back, p2) = DyadicGrid::<2>::from_description(GridId(1), &desc).unwrap();
        assert_eq!(back, g);
        assert_eq!(p2, params);
        assert_eq!(serde_json::to_string(&back.describe(&p2, 11)).unwrap(), json);
    }
}
