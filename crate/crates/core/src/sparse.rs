//! Sparse collections and forms, the complexity forms `B^{u,v}`, their
//! square functions, the level-set recursion that dominates `B^{u,v}` by a
//! sparse form, and universal sparse forms built over shifted grids.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function::{GridFunction, Pyramid};
use crate::grid::{array_serde, for_each_in_box, Cube, DyadicGrid, GridGeometry, GridId, ShiftSequence};

/// An axis-parallel cube in cell units: `[corner, corner + side)^D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CellBox<const D: usize> {
    #[serde(with = "array_serde")]
    pub corner: [i64; D],
    pub side: i64,
}

impl<const D: usize> CellBox<D> {
    pub fn of_standard(geometry: &GridGeometry<D>, q: &Cube<D>) -> Self {
        let side = geometry.side_in_cells(q.scale);
        Self {
            corner: std::array::from_fn(|k| q.index[k] * side),
            side,
        }
    }

    pub fn of_grid_cube(grid: &DyadicGrid<D>, q: &Cube<D>) -> Result<Self> {
        Ok(Self {
            corner: grid.corner_cells(q)?,
            side: grid.geometry().side_in_cells(q.scale),
        })
    }

    /// Measure in cell units.
    pub fn cells(&self) -> f64 {
        (self.side as f64).powi(D as i32)
    }

    pub fn contains(&self, other: &Self) -> bool {
        (0..D).all(|k| other.corner[k] >= self.corner[k] && other.corner[k] + other.side <= self.corner[k] + self.side)
    }

    pub fn intersects(&self, other: &Self) -> bool {
        (0..D).all(|k| other.corner[k] < self.corner[k] + self.side && self.corner[k] < other.corner[k] + other.side)
    }

    pub fn contains_cell(&self, c: [i64; D]) -> bool {
        (0..D).all(|k| c[k] >= self.corner[k] && c[k] < self.corner[k] + self.side)
    }

    /// The `2^D` halves, row-major.
    pub fn children(&self) -> Vec<Self> {
        let half = self.side / 2;
        let mut out = Vec::with_capacity(1 << D);
        for_each_in_box([0i64; D], 2, |m| {
            out.push(Self {
                corner: std::array::from_fn(|k| self.corner[k] + m[k] * half),
                side: half,
            })
        });
        out
    }
}

/// Summed-area table of a grid function with zero extension.
#[derive(Debug, Clone)]
pub struct BoxSums<const D: usize> {
    n: i64,
    table: Vec<f64>,
}

impl<const D: usize> BoxSums<D> {
    pub fn new(f: &GridFunction<D>) -> Self {
        let geo = f.geometry();
        let n = geo.side_cells();
        let m = (n + 1) as usize;
        let mut table = vec![0.0; m.pow(D as u32)];
        for (i, v) in f.values().iter().enumerate() {
            let c = geo.coord(i);
            let idx = c.iter().fold(0usize, |a, &x| a * m + x as usize + 1);
            table[idx] = *v;
        }
        let mut stride = 1usize;
        for _ in 0..D {
            for idx in 0..table.len() {
                if (idx / stride) % m != 0 {
                    table[idx] += table[idx - stride];
                }
            }
            stride *= m;
        }
        Self { n, table }
    }

    /// `Σ values` over cells of the box, cells outside the window counting zero.
    pub fn sum(&self, b: &CellBox<D>) -> f64 {
        let m = (self.n + 1) as usize;
        let lo: [i64; D] = std::array::from_fn(|k| b.corner[k].clamp(0, self.n));
        let hi: [i64; D] = std::array::from_fn(|k| (b.corner[k] + b.side).clamp(0, self.n));
        if (0..D).any(|k| hi[k] <= lo[k]) {
            return 0.0;
        }
        let mut total = 0.0;
        for mask in 0..(1usize << D) {
            let mut idx = 0usize;
            let mut sign = 1.0;
            for k in 0..D {
                let x = if mask >> (D - 1 - k) & 1 == 1 {
                    hi[k]
                } else {
                    sign = -sign;
                    lo[k]
                };
                idx = idx * m + x as usize;
            }
            total += sign * self.table[idx];
        }
        total
    }

    /// Mean over the box (zero extension outside the window).
    pub fn mean(&self, b: &CellBox<D>) -> f64 {
        self.sum(b) / b.cells()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SparseEntry<const D: usize> {
    pub cube: Cube<D>,
    pub region: CellBox<D>,
    /// Pairwise disjoint boxes inside `region`; the carve-out is the rest.
    pub holes: Vec<CellBox<D>>,
}

impl<const D: usize> SparseEntry<D> {
    pub fn carve_cells(&self) -> f64 {
        self.region.cells() - self.holes.iter().map(CellBox::cells).sum::<f64>()
    }

    pub fn carve_ratio(&self) -> f64 {
        self.carve_cells() / self.region.cells()
    }

    pub fn in_carve(&self, c: [i64; D]) -> bool {
        self.region.contains_cell(c) && !self.holes.iter().any(|h| h.contains_cell(c))
    }
}

/// Cubes `S` with carve-outs `E_S ⊂ S` and a sparsity constant `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCollection<const D: usize> {
    pub geometry: GridGeometry<D>,
    pub c: f64,
    pub entries: Vec<SparseEntry<D>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityCertificate {
    pub c: f64,
    pub entries: usize,
    pub min_carve_ratio: f64,
    pub max_overlap: u64,
    pub passed: bool,
}

impl<const D: usize> SparseCollection<D> {
    pub fn new(geometry: GridGeometry<D>, c: f64) -> Self {
        Self {
            geometry,
            c,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Add a standard-grid cube with standard-grid holes.
    pub fn push_standard(&mut self, cube: Cube<D>, holes: &[Cube<D>]) {
        let region = CellBox::of_standard(&self.geometry, &cube);
        let holes = holes.iter().map(|h| CellBox::of_standard(&self.geometry, h)).collect();
        self.entries.push(SparseEntry { cube, region, holes });
    }

    pub fn push_on_grid(&mut self, grid: &DyadicGrid<D>, cube: Cube<D>, holes: &[Cube<D>]) -> Result<()> {
        let region = CellBox::of_grid_cube(grid, &cube)?;
        let holes = holes
            .iter()
            .map(|h| CellBox::of_grid_cube(grid, h))
            .collect::<Result<Vec<_>>>()?;
        self.entries.push(SparseEntry { cube, region, holes });
        Ok(())
    }

    pub fn extend(&mut self, other: SparseCollection<D>) {
        self.entries.extend(other.entries);
    }

    fn check(&self, f: &GridFunction<D>) -> Result<()> {
        if *f.geometry() != self.geometry {
            return Err(Error::GeometryMismatch);
        }
        Ok(())
    }

    /// `Λ(f, g) = Σ_S ⟨f⟩_S ⟨g⟩_S |S|`, zero extension outside the window.
    pub fn lambda(&self, f: &GridFunction<D>, g: &GridFunction<D>) -> Result<f64> {
        self.check(f)?;
        self.check(g)?;
        let (sf, sg) = (BoxSums::new(f), BoxSums::new(g));
        let cell = self.geometry.cell_measure();
        Ok(self
            .entries
            .iter()
            .map(|e| sf.mean(&e.region) * sg.mean(&e.region) * e.region.cells() * cell)
            .sum())
    }

    /// `Λ` computed as `∫ Σ_S ⟨f⟩_S ⟨g⟩_S 1_S`, accumulating per cell.
    pub fn lambda_pointwise(&self, f: &GridFunction<D>, g: &GridFunction<D>) -> Result<f64> {
        self.check(f)?;
        self.check(g)?;
        let (sf, sg) = (BoxSums::new(f), BoxSums::new(g));
        let geo = self.geometry;
        let n = geo.side_cells();
        let mut acc = vec![0.0; geo.cell_count()];
        let mut outside = 0.0;
        for e in &self.entries {
            let w = sf.mean(&e.region) * sg.mean(&e.region);
            if w == 0.0 {
                continue;
            }
            let lo: [i64; D] = std::array::from_fn(|k| e.region.corner[k].clamp(0, n));
            let hi: [i64; D] = std::array::from_fn(|k| (e.region.corner[k] + e.region.side).clamp(0, n));
            let mut inside = 0.0;
            if (0..D).all(|k| hi[k] > lo[k]) {
                let mut c = lo;
                loop {
                    acc[geo.flat(c)] += w;
                    inside += 1.0;
                    let mut k = D;
                    let done = loop {
                        if k == 0 {
                            break true;
                        }
                        k -= 1;
                        c[k] += 1;
                        if c[k] < hi[k] {
                            break false;
                        }
                        c[k] = lo[k];
                    };
                    if done {
                        break;
                    }
                }
            }
            outside += w * (e.region.cells() - inside);
        }
        Ok((acc.iter().sum::<f64>() + outside) * geo.cell_measure())
    }

    /// Exact minimal carve ratio and maximal overlap of the carve-outs.
    pub fn verify(&self) -> Result<SparsityCertificate> {
        let mut min_ratio = f64::INFINITY;
        for e in &self.entries {
            for (i, h) in e.holes.iter().enumerate() {
                if !e.region.contains(h) {
                    return Err(Error::Support("carve-out hole outside its cube".into()));
                }
                if e.holes[..i].iter().any(|o| o.intersects(h)) {
                    return Err(Error::OverlappingFamily);
                }
            }
            min_ratio = min_ratio.min(e.carve_ratio());
        }
        let max_overlap = self.max_overlap();
        let passed = self.entries.is_empty() || (min_ratio > self.c && max_overlap as f64 <= 1.0 / self.c);
        Ok(SparsityCertificate {
            c: self.c,
            entries: self.entries.len(),
            min_carve_ratio: if self.entries.is_empty() { 1.0 } else { min_ratio },
            max_overlap,
            passed,
        })
    }

    /// `‖Σ_S 1_{E_S}‖_∞` by coordinate compression and a difference array.
    pub fn max_overlap(&self) -> u64 {
        if self.entries.is_empty() {
            return 0;
        }
        let boxes = || self.entries.iter().flat_map(|e| std::iter::once(&e.region).chain(&e.holes));
        let mut axes: Vec<Vec<i64>> = vec![Vec::new(); D];
        for b in boxes() {
            for k in 0..D {
                axes[k].push(b.corner[k]);
                axes[k].push(b.corner[k] + b.side);
            }
        }
        for a in axes.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        let dims: Vec<usize> = axes.iter().map(|a| a.len()).collect();
        let total: usize = dims.iter().product();
        let mut diff = vec![0i64; total];
        let pos = |k: usize, x: i64| axes[k].binary_search(&x).expect("boundary recorded");
        let mut add = |b: &CellBox<D>, w: i64| {
            let lo: Vec<usize> = (0..D).map(|k| pos(k, b.corner[k])).collect();
            let hi: Vec<usize> = (0..D).map(|k| pos(k, b.corner[k] + b.side)).collect();
            for mask in 0..(1usize << D) {
                let mut idx = 0usize;
                let mut sign = w;
                for k in 0..D {
                    let x = if mask >> k & 1 == 1 {
                        sign = -sign;
                        hi[k]
                    } else {
                        lo[k]
                    };
                    idx = idx * dims[k] + x;
                }
                diff[idx] += sign;
            }
        };
        for e in &self.entries {
            add(&e.region, 1);
            for h in &e.holes {
                add(h, -1);
            }
        }
        let mut stride = 1usize;
        for k in (0..D).rev() {
            for idx in 0..total {
                if (idx / stride) % dims[k] != 0 {
                    diff[idx] += diff[idx - stride];
                }
            }
            stride *= dims[k];
        }
        diff.into_iter().max().unwrap_or(0).max(0) as u64
    }
}

/// Runs `[start, len]` of carve-out cells in the region's local row-major order.
fn carve_runs<const D: usize>(e: &SparseEntry<D>) -> Vec<[u64; 2]> {
    let side = e.region.side;
    let rows = (side as u64).pow(D as u32 - 1);
    let mut runs: Vec<[u64; 2]> = Vec::new();
    let mut push = |start: u64, len: u64| {
        if len == 0 {
            return;
        }
        if let Some(last) = runs.last_mut() {
            if last[0] + last[1] == start {
                last[1] += len;
                return;
            }
        }
        runs.push([start, len]);
    };
    for row in 0..rows {
        let mut fixed = [0i64; D];
        let mut r = row;
        for k in (0..D.saturating_sub(1)).rev() {
            fixed[k] = (r % side as u64) as i64;
            r /= side as u64;
        }
        let mut gaps: Vec<(i64, i64)> = e
            .holes
            .iter()
            .filter(|h| (0..D - 1).all(|k| {
                let x = fixed[k] + e.region.corner[k];
                x >= h.corner[k] && x < h.corner[k] + h.side
            }))
            .map(|h| {
                let a = h.corner[D - 1] - e.region.corner[D - 1];
                (a, a + h.side)
            })
            .collect();
        gaps.sort_unstable();
        let base = row * side as u64;
        let mut cur = 0i64;
        for (a, b) in gaps {
            push(base + cur as u64, (a - cur).max(0) as u64);
            cur = cur.max(b);
        }
        push(base + cur as u64, (side - cur).max(0) as u64);
    }
    runs
}

/// Holes (maximal dyadic sub-boxes outside the runs) of a region.
fn holes_from_runs<const D: usize>(region: CellBox<D>, runs: &[[u64; 2]]) -> Vec<CellBox<D>> {
    let side = region.side as u64;
    // included cell count of local row-major interval [a, b)
    let included = |a: u64, b: u64| -> u64 {
        let i = runs.partition_point(|r| r[0] + r[1] <= a);
        let mut s = 0;
        for r in &runs[i..] {
            if r[0] >= b {
                break;
            }
            s += (r[0] + r[1]).min(b) - r[0].max(a);
        }
        s
    };
    let count_in = |b: &CellBox<D>| -> u64 {
        let mut s = 0;
        let rows_side = if D > 1 { b.side } else { 1 };
        let mut corner = [0i64; D];
        for k in 0..D.saturating_sub(1) {
            corner[k] = b.corner[k] - region.corner[k];
        }
        let rows = (rows_side as u64).pow(D as u32 - 1);
        for row in 0..rows {
            let mut r = row;
            let mut idx = 0u64;
            let mut coords = [0i64; D];
            for k in (0..D.saturating_sub(1)).rev() {
                coords[k] = corner[k] + (r % b.side as u64) as i64;
                r /= b.side as u64;
            }
            for k in 0..D - 1 {
                idx = idx * side + coords[k] as u64;
            }
            let start = idx * side + (b.corner[D - 1] - region.corner[D - 1]) as u64;
            s += included(start, start + b.side as u64);
        }
        s
    };
    let mut out = Vec::new();
    let mut stack = vec![region];
    while let Some(b) = stack.pop() {
        let inc = count_in(&b);
        if inc == 0 {
            out.push(b);
        } else if (inc as f64) < b.cells() && b.side > 1 {
            stack.extend(b.children());
        }
    }
    out.sort();
    out
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct EntryRepr<const D: usize> {
    cube: Cube<D>,
    #[serde(with = "array_serde")]
    corner: [i64; D],
    side: i64,
    carve: Vec<[u64; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct CollectionRepr<const D: usize> {
    geometry: GridGeometry<D>,
    c: f64,
    entries: Vec<EntryRepr<D>>,
}

impl<const D: usize> Serialize for SparseCollection<D> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CollectionRepr {
            geometry: self.geometry,
            c: self.c,
            entries: self
                .entries
                .iter()
                .map(|e| EntryRepr {
                    cube: e.cube,
                    corner: e.region.corner,
                    side: e.region.side,
                    carve: carve_runs(e),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de, const D: usize> Deserialize<'de> for SparseCollection<D> {
    fn deserialize<De: serde::Deserializer<'de>>(de: De) -> std::result::Result<Self, De::Error> {
        let r = CollectionRepr::<D>::deserialize(de)?;
        let entries = r
            .entries
            .into_iter()
            .map(|e| {
                let region = CellBox {
                    corner: e.corner,
                    side: e.side,
                };
                SparseEntry {
                    cube: e.cube,
                    region,
                    holes: holes_from_runs(region, &e.carve),
                }
            })
            .collect();
        Ok(SparseCollection {
            geometry: r.geometry,
            c: r.c,
            entries,
        })
    }
}

/// Maximal standard dyadic cubes inside `root` whose cells all satisfy `mask`.
pub fn maximal_components<const D: usize>(geometry: &GridGeometry<D>, mask: &[bool], root: &Cube<D>) -> Vec<Cube<D>> {
    let counts = GridFunction::from_values(*geometry, mask.iter().map(|&b| b as u8 as f64).collect())
        .expect("mask has one entry per cell");
    let pyr = Pyramid::new(&counts);
    let mut out = Vec::new();
    let mut stack = vec![*root];
    while let Some(q) = stack.pop() {
        let m = pyr.mean(&q).unwrap_or(0.0);
        if m >= 1.0 {
            out.push(q);
        } else if m > 0.0 && q.scale > geometry.scale_min() {
            stack.extend(q.children());
        }
    }
    out.sort();
    out
}

/// Scale offsets `u, v ≥ 0` of the complexity form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityFormParams {
    pub u: u32,
    pub v: u32,
}

/// `⟨|D_{s-u} f|⟩_{3P}` for every standard cube `P` at every scale `s`;
/// `terms[j]` holds scale `scale_min + j` in row-major order.
#[derive(Debug, Clone)]
pub struct SquareTerms<const D: usize> {
    geometry: GridGeometry<D>,
    pub u: u32,
    pub terms: Vec<Vec<f64>>,
}

impl<const D: usize> SquareTerms<D> {
    pub fn new(f: &GridFunction<D>, u: u32) -> Result<Self> {
        let geo = *f.geometry();
        if u > geo.level() {
            return Err(Error::InvalidArgument(format!(
                "offset {u} exceeds the mesh depth {}",
                geo.level()
            )));
        }
        let pyr = Pyramid::new(f);
        let terms = (0..=geo.level())
            .into_par_iter()
            .map(|j| {
                let s = geo.scale_min() + j as i32;
                let count = (geo.side_cells() >> j) as usize;
                let count = count.pow(D as u32);
                let k = s - u as i32;
                if k <= geo.scale_min() {
                    return vec![0.0; count];
                }
                let kk = (k - geo.scale_min()) as u32;
                let abs_diff: Vec<f64> = (0..geo.cell_count())
                    .map(|i| (pyr.level(kk - 1)[pyr.parent_flat(i, kk - 1)] - pyr.level(kk)[pyr.parent_flat(i, kk)]).abs())
                    .collect();
                let dp = Pyramid::new(&GridFunction::from_values(geo, abs_diff).expect("sized"));
                geo.cubes_at(s).iter().map(|p| dp.triple_mean(p)).collect()
            })
            .collect();
        Ok(Self { geometry: geo, u, terms })
    }

    pub fn term(&self, p: &Cube<D>) -> f64 {
        let j = (p.scale - self.geometry.scale_min()) as usize;
        let n = self.geometry.side_cells() >> j;
        let idx = p.index.iter().fold(0i64, |a, &m| a * n + m);
        self.terms[j][idx as usize]
    }

    /// `(S_{u,R} f)^2` on the cells of `root`: the sum over `P ⊆ root` only.
    pub fn local_square(&self, root: &Cube<D>) -> Vec<(usize, f64)> {
        let geo = self.geometry;
        let cells = geo.cube_cells(root).expect("root inside window");
        cells
            .into_iter()
            .map(|i| {
                let mut s = 0.0;
                for j in 0..=(root.scale - geo.scale_min()) as u32 {
                    let n = geo.side_cells() >> j;
                    let c = geo.coord(i);
                    let idx = c.iter().fold(0i64, |a, &x| a * n + (x >> j));
                    let t = self.terms[j as usize][idx as usize];
                    s += t * t;
                }
                (i, s)
            })
            .collect()
    }
}

/// `B^{u,v}(f, g) = Σ_{P ⊆ P0} ⟨|D_{i_P-u} f|⟩_{3P} ⟨|D_{i_P-v} g|⟩_{3P} |P|`.
pub fn buv_eval<const D: usize>(f: &GridFunction<D>, g: &GridFunction<D>, params: ComplexityFormParams) -> Result<f64> {
    if f.geometry() != g.geometry() {
        return Err(Error::GeometryMismatch);
    }
    let tf = SquareTerms::new(f, params.u)?;
    let tg = SquareTerms::new(g, params.v)?;
    let geo = f.geometry();
    Ok(tf
        .terms
        .iter()
        .zip(&tg.terms)
        .enumerate()
        .map(|(j, (a, b))| {
            let measure = ((geo.scale_min() + j as i32) as f64 * D as f64).exp2();
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * measure
        })
        .sum())
}

/// `S_u f = (Σ_{P ⊆ P0} ⟨|D_{i_P-u} f|⟩_{3P}^2 1_P)^{1/2}`.
pub fn square_function<const D: usize>(f: &GridFunction<D>, u: u32) -> Result<GridFunction<D>> {
    let terms = SquareTerms::new(f, u)?;
    let geo = *f.geometry();
    let mut out = vec![0.0; geo.cell_count()];
    for (i, s) in terms.local_square(&geo.window()) {
        out[i] = s.sqrt();
    }
    GridFunction::from_values(geo, out)
}

/// Output of the level-set recursion for `B^{u,v}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BuvDomination<const D: usize> {
    pub collection: SparseCollection<D>,
    /// Largest threshold constant used at any node.
    pub constant: f64,
    pub form: f64,
    /// `Σ_P ⟨|f|⟩_{3P} ⟨|g|⟩_{3P} |P|` over the collection.
    pub tripled_sparse: f64,
    /// `C^2 (1+u)(1+v) ·` the tripled sparse sum.
    pub bound: f64,
    pub dominated: bool,
}

/// Check that `f` vanishes outside the middle half `[¼, ¾)` of the window.
pub fn check_middle_support<const D: usize>(f: &GridFunction<D>) -> Result<()> {
    let geo = f.geometry();
    let n = geo.side_cells();
    if n < 4 {
        return Err(Error::Support("window too coarse to hold a half-size support".into()));
    }
    for (i, v) in f.values().iter().enumerate() {
        if *v != 0.0 && geo.coord(i).iter().any(|&c| c < n / 4 || c >= 3 * n / 4) {
            return Err(Error::Support("function must vanish outside the middle half of the window".into()));
        }
    }
    Ok(())
}

/// Dominate `B^{u,v}(f, g)` by a sparse form through the level sets of the
/// localized square functions.
pub fn sparse_dominate_buv<const D: usize>(
    f: &GridFunction<D>,
    g: &GridFunction<D>,
    params: ComplexityFormParams,
) -> Result<BuvDomination<D>> {
    if f.geometry() != g.geometry() {
        return Err(Error::GeometryMismatch);
    }
    check_middle_support(f)?;
    check_middle_support(g)?;
    let geo = *f.geometry();
    let tf = SquareTerms::new(f, params.u)?;
    let tg = SquareTerms::new(g, params.v)?;
    let af = Pyramid::new(&f.abs());
    let ag = Pyramid::new(&g.abs());
    let (cu, cv) = (1.0 + params.u as f64, 1.0 + params.v as f64);
    let mut collection = SparseCollection::new(geo, 0.5);
    let mut constant: f64 = 1.0;
    let mut tripled = 0.0;
    let mut stack = vec![geo.window()];
    while let Some(node) = stack.pop() {
        let (mf, mg) = (af.triple_mean(&node), ag.triple_mean(&node));
        let sf = tf.local_square(&node);
        let sg = tg.local_square(&node);
        let quarter = 0.25 * sf.len() as f64;
        let mut c = 1.0f64;
        let mut doublings = 0;
        let mask = loop {
            let (tf2, tg2) = ((c * cu * mf).powi(2), (c * cv * mg).powi(2));
            let mut mask = vec![false; geo.cell_count()];
            let mut count = 0usize;
            for ((i, a), (_, b)) in sf.iter().zip(&sg) {
                if *a > tf2 || *b > tg2 {
                    mask[*i] = true;
                    count += 1;
                }
            }
            if count as f64 <= quarter {
                break mask;
            }
            c *= 2.0;
            doublings += 1;
            if doublings > 60 {
                return Err(Error::DoublingExhausted(doublings));
            }
        };
        constant = constant.max(c);
        let holes = maximal_components(&geo, &mask, &node);
        collection.push_standard(node, &holes);
        tripled += mf * mg * node.measure();
        stack.extend(holes);
    }
    let form = buv_eval(f, g, params)?;
    let bound = constant * constant * cu * cv * tripled;
    Ok(BuvDomination {
        collection,
        constant,
        form,
        tripled_sparse: tripled,
        bound,
        dominated: form <= bound * (1.0 + 1e-12),
    })
}

/// The `3^d` grids whose shifts are `0`, `1/3` or `2/3` of the sidelength
/// (alternating with the scale) in each coordinate, up to `extra` scales
/// above the window.
pub fn shifted_grid_family<const D: usize>(geometry: &GridGeometry<D>, extra: u32) -> Vec<DyadicGrid<D>> {
    let base = geometry.scale_min();
    let len = (geometry.level() + extra) as usize;
    let mut out = Vec::with_capacity(3usize.pow(D as u32));
    let mut id = 0u32;
    for_each_in_box([0i64; D], 3, |pattern| {
        let omega = ShiftSequence::from_fn(base, len, |t, k| match pattern[k] {
            0 => 0,
            1 => (t.rem_euclid(2) == 0) as u8,
            _ => (t.rem_euclid(2) == 1) as u8,
        });
        let grid_id = if pattern.iter().all(|&p| p == 0) { GridId::STANDARD } else { GridId(id) };
        out.push(DyadicGrid::shifted(grid_id, *geometry, omega).expect("shift covers the window"));
        id += 1;
    });
    out
}

/// Per-entry data of a universal collection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniversalLevel {
    pub grid: GridId,
    pub level: i64,
    pub product: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalSparse<const D: usize> {
    pub collection: SparseCollection<D>,
    pub levels: Vec<UniversalLevel>,
    /// Base `8^{2d}` of the level sets.
    pub base: f64,
}

impl<const D: usize> UniversalSparse<D> {
    /// Sub-collection built on one grid.
    pub fn on_grid(&self, id: GridId) -> SparseCollection<D> {
        let mut out = SparseCollection::new(self.collection.geometry, self.collection.c);
        for (e, l) in self.collection.entries.iter().zip(&self.levels) {
            if l.grid == id {
                out.entries.push(e.clone());
            }
        }
        out
    }
}

/// Additional scales above the window allowed when building level sets.
const MAX_EXTENSION: u32 = 40;

fn level_of(p: f64, base: f64) -> i64 {
    let k = (p.ln() / base.ln()).floor() as i64;
    // guard the floor against rounding at exact powers
    if base.powi((k + 1) as i32) <= p {
        k + 1
    } else if base.powi(k as i32) > p {
        k - 1
    } else {
        k
    }
}

/// Level-set cubes of `⟨f⟩_Q ⟨g⟩_Q` over each grid in `grids`.
pub fn universal_sparse<const D: usize>(
    f: &GridFunction<D>,
    g: &GridFunction<D>,
    grids: &[DyadicGrid<D>],
) -> Result<UniversalSparse<D>> {
    if f.geometry() != g.geometry() {
        return Err(Error::GeometryMismatch);
    }
    if f.values().iter().chain(g.values()).any(|v| *v < 0.0) {
        return Err(Error::Negative);
    }
    let geo = *f.geometry();
    let base = 8f64.powi(2 * D as i32);
    let mut collection = SparseCollection::new(geo, 0.5);
    let mut levels = Vec::new();
    for grid in grids {
        if grid.geometry() != &geo {
            return Err(Error::GeometryMismatch);
        }
        let (c, l) = universal_on_grid(f, g, grid, base)?;
        collection.extend(c);
        levels.extend(l);
    }
    Ok(UniversalSparse {
        collection,
        levels,
        base,
    })
}

type CubeSums<const D: usize> = BTreeMap<[i64; D], (f64, f64)>;

fn universal_on_grid<const D: usize>(
    f: &GridFunction<D>,
    g: &GridFunction<D>,
    grid: &DyadicGrid<D>,
    base: f64,
) -> Result<(SparseCollection<D>, Vec<UniversalLevel>)> {
    let geo = *grid.geometry();
    let cell = geo.cell_measure();
    let mut collection = SparseCollection::new(geo, 0.5);
    let mut levels = Vec::new();
    // sums of f and g over the grid cubes at each scale, from the cells up
    let mut by_scale: Vec<CubeSums<D>> = Vec::new();
    let mut finest: CubeSums<D> = BTreeMap::new();
    for i in 0..geo.cell_count() {
        let (a, b) = (f.values()[i], g.values()[i]);
        if a == 0.0 && b == 0.0 {
            continue;
        }
        let q = grid.cube_containing(geo.coord(i), geo.scale_min())?;
        let e = finest.entry(q.index).or_insert((0.0, 0.0));
        e.0 += a;
        e.1 += b;
    }
    by_scale.push(finest);
    let product = |s: i32, sums: &(f64, f64)| {
        let m = (s as f64 * D as f64).exp2();
        (sums.0 * cell / m) * (sums.1 * cell / m)
    };
    if f.values().iter().all(|v| *v == 0.0) || g.values().iter().all(|v| *v == 0.0) {
        return Ok((collection, levels));
    }
    let mut s = geo.scale_min();
    loop {
        let cur = by_scale.last().expect("nonempty");
        if s >= geo.scale_max() {
            let top_max = cur.values().map(|v| product(s, v)).fold(0.0, f64::max);
            if let Some(k_min) = by_scale_k_min(&by_scale, geo, cell, base) {
                if top_max < base.powi(k_min as i32) {
                    break;
                }
            }
        }
        if s >= geo.scale_max() + MAX_EXTENSION as i32 || s + 1 > grid.top_scale() {
            return Err(Error::InvalidArgument(
                "level sets did not close within the grid extension".into(),
            ));
        }
        let mut next: CubeSums<D> = BTreeMap::new();
        for (m, v) in cur {
            let p = grid.parent(&grid.cube(s, *m))?;
            let e = next.entry(p.index).or_insert((0.0, 0.0));
            e.0 += v.0;
            e.1 += v.1;
        }
        by_scale.push(next);
        s += 1;
    }
    let k_min = by_scale_k_min(&by_scale, geo, cell, base).expect("loop exits with a positive product");
    let top = geo.scale_min() + by_scale.len() as i32 - 1;
    // top-down: anc_max over strict ancestors, emitted flag, level
    struct Node {
        anc_max: f64,
        product: f64,
    }
    let mut nodes: Vec<BTreeMap<[i64; D], Node>> = (0..by_scale.len()).map(|_| BTreeMap::new()).collect();
    for j in (0..by_scale.len()).rev() {
        let s = geo.scale_min() + j as i32;
        for (m, v) in &by_scale[j] {
            let p = product(s, v);
            let anc_max = if s == top {
                0.0
            } else {
                let par = grid.parent(&grid.cube(s, *m))?;
                let pn = &nodes[j + 1][&par.index];
                pn.anc_max.max(pn.product)
            };
            nodes[j].insert(*m, Node { anc_max, product: p });
        }
    }
    let is_emitted = |n: &Node| {
        if n.product <= 0.0 {
            return false;
        }
        let k = level_of(n.product, base);
        k >= k_min && (n.anc_max <= 0.0 || level_of(n.anc_max, base) < k)
    };
    for j in (0..nodes.len()).rev() {
        let s = geo.scale_min() + j as i32;
        for (m, n) in &nodes[j] {
            if !is_emitted(n) {
                continue;
            }
            let k = level_of(n.product, base);
            let threshold = base.powi((k + 1) as i32);
            let q = grid.cube(s, *m);
            // holes: emitted descendants that are maximal at level k + 1
            let mut holes = Vec::new();
            let mut frontier = vec![q];
            while let Some(c) = frontier.pop() {
                if c.scale <= geo.scale_min() {
                    continue;
                }
                for ch in grid.children(&c)? {
                    let jj = (ch.scale - geo.scale_min()) as usize;
                    let Some(nn) = nodes[jj].get(&ch.index) else { continue };
                    if nn.product >= threshold && nn.anc_max < threshold {
                        holes.push(ch);
                    } else {
                        frontier.push(ch);
                    }
                }
            }
            collection.push_on_grid(grid, q, &holes)?;
            levels.push(UniversalLevel {
                grid: grid.id,
                level: k,
                product: n.product,
            });
        }
    }
    Ok((collection, levels))
}

/// `k_min`: level of the smallest nonzero product over the window-scale cubes.
/// Smallest level among cubes up to the window scale; when `f` and `g` only
/// meet in larger cubes, the smallest level seen so far.
fn by_scale_k_min<const D: usize>(
    by_scale: &[CubeSums<D>],
    geo: GridGeometry<D>,
    cell: f64,
    base: f64,
) -> Option<i64> {
    let mut p_min = f64::INFINITY;
    for (j, sums) in by_scale.iter().enumerate() {
        let s = geo.scale_min() + j as i32;
        if s > geo.scale_max() && p_min.is_finite() {
            break;
        }
        let m = (s as f64 * D as f64).exp2();
        for v in sums.values() {
            let p = (v.0 * cell / m) * (v.1 * cell / m);
            if p > 0.0 {
                p_min = p_min.min(p);
            }
        }
    }
    p_min.is_finite().then(|| level_of(p_min, base))
}

/// A random sparse collection on `grid` with constant `c`: each chosen cube
/// receives random disjoint descendants of total measure below `(1-c)|S|`,
/// which become its holes and are recursed on.
pub fn random_sparse_collection<const D: usize, R: Rng + ?Sized>(
    rng: &mut R,
    grid: &DyadicGrid<D>,
    c: f64,
    max_depth: u32,
) -> Result<SparseCollection<D>> {
    let geo = *grid.geometry();
    let mut out = SparseCollection::new(geo, c);
    let top = geo.scale_max();
    let mut stack: Vec<Cube<D>> = grid.cubes_meeting_window(top)?;
    let mut roots = Vec::new();
    // start from a few random cubes a couple of scales below the top
    for r in stack.drain(..) {
        let mut q = r;
        for _ in 0..rng.gen_range(0..=2u32.min(geo.level())) {
            let ch = grid.children(&q)?;
            q = ch[rng.gen_range(0..ch.len())];
        }
        roots.push(q);
    }
    stack = roots;
    while let Some(s) = stack.pop() {
        let budget = (1.0 - c) * s.measure();
        let mut used = 0.0;
        let mut holes: Vec<Cube<D>> = Vec::new();
        let depth_left = (s.scale - geo.scale_min()) as u32;
        if depth_left > 0 && max_depth > 0 {
            for _ in 0..rng.gen_range(0..=4) {
                let down = rng.gen_range(1..=depth_left.min(3));
                let mut q = s;
                for _ in 0..down {
                    let ch = grid.children(&q)?;
                    q = ch[rng.gen_range(0..ch.len())];
                }
                if used + q.measure() >= budget {
                    continue;
                }
                if holes.iter().any(|h| grid.contains(h, &q).unwrap_or(false) || grid.contains(&q, h).unwrap_or(false)) {
                    continue;
                }
                used += q.measure();
                holes.push(q);
            }
        }
        out.push_on_grid(grid, s, &holes)?;
        stack.extend(holes);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geo1(level: u32) -> GridGeometry<1> {
        GridGeometry::unit(level).unwrap()
    }

    fn random_middle<const D: usize>(geo: GridGeometry<D>, seed: u64) -> GridFunction<D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = geo.side_cells();
        let v = (0..geo.cell_count())
            .map(|i| {
                let c = geo.coord(i);
                if c.iter().all(|&x| x >= n / 4 && x < 3 * n / 4) {
                    rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                }
            })
            .collect();
        GridFunction::from_values(geo, v).unwrap()
    }

    #[test]
    fn lambda_examples() {
        let g = geo1(4);
        let mut coll = SparseCollection::new(g, 0.5);
        coll.push_standard(g.window(), &[]);
        let one = GridFunction::constant(g, 1.0);
        let half = GridFunction::indicator(g, &Cube::new(-1, [0]), 1.0).unwrap();
        assert_eq!(coll.lambda(&one, &one).unwrap(), 1.0);
        assert_eq!(coll.lambda(&half, &one).unwrap(), 0.5);
        assert_eq!(coll.lambda_pointwise(&half, &one).unwrap(), 0.5);
    }

    #[test]
    fn sparsity_counting() {
        let g = geo1(5);
        let mut chain = SparseCollection::new(g, 0.5);
        for s in -3..=0 {
            chain.push_standard(Cube::new(s, [0]), &[]);
        }
        let cert = chain.verify().unwrap();
        assert_eq!(cert.max_overlap, 4);
        assert!(!cert.passed);
        let mut disjoint = SparseCollection::new(g, 0.5);
        disjoint.push_standard(Cube::new(-1, [0]), &[Cube::new(-2, [1])]);
        disjoint.push_standard(Cube::new(-2, [1]), &[]);
        disjoint.push_standard(Cube::new(-1, [1]), &[]);
        let cert = disjoint.verify().unwrap();
        assert_eq!(cert.max_overlap, 1);
        assert!(!cert.passed, "ratio 1/2 is not above c = 1/2");
        let mut bad = SparseCollection::new(g, 0.5);
        bad.push_standard(Cube::new(-2, [0]), &[Cube::new(-3, [4])]);
        assert!(bad.verify().is_err());
    }

    #[test]
    fn overlap_matches_brute_force_2d() {
        let geo = GridGeometry::<2>::unit(4).unwrap();
        let grid = DyadicGrid::standard(geo);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let mut coll = random_sparse_collection(&mut rng, &grid, 0.5, 4).unwrap();
            let extra = random_sparse_collection(&mut rng, &grid, 0.5, 4).unwrap();
            coll.extend(extra);
            let mut brute = 0;
            for i in 0..geo.cell_count() {
                let c = geo.coord(i);
                brute = brute.max(coll.entries.iter().filter(|e| e.in_carve(c)).count() as u64);
            }
            assert_eq!(coll.max_overlap(), brute);
        }
    }

    #[test]
    fn json_round_trip() {
        let geo = GridGeometry::<2>::unit(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for grid in shifted_grid_family(&geo, 2) {
            let coll = random_sparse_collection(&mut rng, &grid, 0.5, 4).unwrap();
            let json = serde_json::to_string(&coll).unwrap();
            let back: SparseCollection<2> = serde_json::from_str(&json).unwrap();
            for (a, b) in coll.entries.iter().zip(&back.entries) {
                assert_eq!(a.carve_cells(), b.carve_cells());
                assert_eq!(a.region, b.region);
            }
            assert_eq!(serde_json::to_string(&back).unwrap(), json);
        }
    }

    #[test]
    fn buv_haar_example() {
        let g = geo1(4);
        let mut f = GridFunction::constant(g, 1.0);
        for i in 8..16 {
            f.values_mut()[i] = -1.0;
        }
        let p = ComplexityFormParams { u: 0, v: 0 };
        assert!((buv_eval(&f, &f, p).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        let s = square_function(&f, 0).unwrap();
        assert!(s.values().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(buv_eval(&GridFunction::constant(g, 2.0), &f, p).unwrap(), 0.0);
        assert!(buv_eval(&f, &f, ComplexityFormParams { u: 5, v: 0 }).is_err());
    }

    #[test]
    fn buv_symmetry() {
        let g = GridGeometry::<2>::unit(4).unwrap();
        let f = random_middle(g, 3);
        let h = random_middle(g, 4);
        let a = buv_eval(&f, &h, ComplexityFormParams { u: 1, v: 2 }).unwrap();
        let b = buv_eval(&h, &f, ComplexityFormParams { u: 2, v: 1 }).unwrap();
        assert!((a - b).abs() < 1e-14 * a.abs());
    }

    #[test]
    fn buv_oracle_direct() {
        // direct evaluation from Haar differences and explicit 3P sums
        let g = geo1(5);
        let f = random_middle(g, 5);
        let h = random_middle(g, 6);
        let (u, v) = (1u32, 2u32);
        let diff = |fun: &GridFunction<1>, k: i32| -> Vec<f64> {
            if k <= g.scale_min() {
                vec![0.0; g.cell_count()]
            } else {
                fun.scale_difference(k).unwrap().values().iter().map(|x| x.abs()).collect()
            }
        };
        let mut want = 0.0;
        for p in g.all_cubes() {
            let df = diff(&f, p.scale - u as i32);
            let dh = diff(&h, p.scale - v as i32);
            let side = g.side_in_cells(p.scale);
            let (lo, hi) = ((p.index[0] - 1) * side, (p.index[0] + 2) * side);
            let mut sf = 0.0;
            let mut sh = 0.0;
            for c in lo.max(0)..hi.min(g.side_cells()) {
                sf += df[c as usize];
                sh += dh[c as usize];
            }
            let m3 = 3.0 * side as f64;
            want += sf / m3 * sh / m3 * p.measure();
        }
        let got = buv_eval(&f, &h, ComplexityFormParams { u, v }).unwrap();
        assert!((got - want).abs() < 1e-13 * want, "{got} {want}");
    }

    #[test]
    fn dominate_haar_pair() {
        let g = geo1(4);
        let mut f = GridFunction::zeros(g);
        for i in 4..8 {
            f.values_mut()[i] = 1.0;
        }
        for i in 8..12 {
            f.values_mut()[i] = -1.0;
        }
        let d = sparse_dominate_buv(&f, &f, ComplexityFormParams { u: 0, v: 0 }).unwrap();
        assert!(d.dominated);
        assert_eq!(d.collection.entries[0].cube, g.window());
        assert!(d.collection.verify().unwrap().passed);
    }

    #[test]
    fn dominate_random_pairs() {
        let g = geo1(7);
        for seed in 0..10 {
            let f = random_middle(g, 10 + seed);
            let h = random_middle(g, 100 + seed);
            for (u, v) in [(0, 0), (1, 2), (2, 1)] {
                let d = sparse_dominate_buv(&f, &h, ComplexityFormParams { u, v }).unwrap();
                assert!(d.dominated, "seed {seed} u {u} v {v}: {} > {}", d.form, d.bound);
                let cert = d.collection.verify().unwrap();
                assert!(cert.passed && cert.min_carve_ratio >= 0.75 && cert.max_overlap == 1);
            }
        }
        let outside = GridFunction::constant(g, 1.0);
        assert!(sparse_dominate_buv(&outside, &outside, ComplexityFormParams { u: 0, v: 0 }).is_err());
    }

    #[test]
    fn family_sizes_and_approximation() {
        assert_eq!(shifted_grid_family(&geo1(4), 1).len(), 3);
        let geo2 = GridGeometry::<2>::unit(3).unwrap();
        assert_eq!(shifted_grid_family(&geo2, 1).len(), 9);
        let g = geo1(5);
        let fam = shifted_grid_family(&g, 3);
        let n = g.side_cells();
        for len in 1..=n {
            for a in 0..=(n - len) {
                let q = CellBox { corner: [a], side: len };
                let found = fam.iter().any(|grid| {
                    (g.scale_min()..=g.scale_max() + 3).any(|s| {
                        let side = g.side_in_cells(s);
                        if side > 6 * len {
                            return false;
                        }
                        let p = grid.cube_containing([a], s).unwrap();
                        CellBox::of_grid_cube(grid, &p).unwrap().contains(&q)
                    })
                });
                assert!(found, "no approximating cube for [{a}, {}) cells", a + len);
            }
        }
    }

    #[test]
    fn universal_examples() {
        let g = geo1(4);
        let fam = shifted_grid_family(&g, 20);
        let zero = GridFunction::zeros(g);
        assert!(universal_sparse(&zero, &zero, &fam).unwrap().collection.is_empty());
        let one = GridFunction::constant(g, 1.0);
        let std_only = [DyadicGrid::standard(g)];
        let u = universal_sparse(&one, &one, &std_only).unwrap();
        let cubes: Vec<_> = u.collection.entries.iter().map(|e| e.cube).collect();
        assert_eq!(cubes, vec![g.window()]);
        assert!(universal_sparse(&one.map(|v| -v), &one, &std_only).is_err());
    }

    #[test]
    fn universal_invariants() {
        let geo = GridGeometry::<2>::unit(4).unwrap();
        let fam = shifted_grid_family(&geo, 30);
        let f = random_middle(geo, 7).abs();
        let h = random_middle(geo, 8).map(|v| v * v);
        let u = universal_sparse(&f, &h, &fam).unwrap();
        let sf = BoxSums::new(&f);
        let sh = BoxSums::new(&h);
        for (e, l) in u.collection.entries.iter().zip(&u.levels) {
            let p = sf.mean(&e.region) * sh.mean(&e.region);
            assert!((p - l.product).abs() <= 1e-9 * p);
            let lo = u.base.powi(l.level as i32);
            assert!(p >= lo * (1.0 - 1e-9) && p <= lo * 16.0 * (1.0 + 1e-9));
            assert!(e.carve_ratio() >= 0.5);
        }
        for grid in &fam {
            let sub = u.on_grid(grid.id);
            assert!(sub.max_overlap() <= 1);
        }
    }
}
