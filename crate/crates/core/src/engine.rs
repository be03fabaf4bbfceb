//! Stopping trees, the coefficients of the corona martingale transforms, the
//! four-way split of the paired Haar expansion, and end-to-end sparse bounds.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function::{GridFunction, Pyramid};
use crate::grid::{classify_good, relation, Cube, DyadicGrid, Goodness, GoodnessParams, Relation};
use crate::operator::DiscreteOperator;
use crate::sparse::{maximal_components, shifted_grid_family, universal_sparse, SparseCollection, SparsityCertificate};

pub const DEFAULT_C0: f64 = 4.0;
const MAX_DOUBLINGS: u32 = 20;
/// Scales the shifted grids reach above the window.
pub const UNIVERSAL_EXTENSION: u32 = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct StoppingNode<const D: usize> {
    pub cube: Cube<D>,
    pub sigma_f: f64,
    pub sigma_g: f64,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Maximal cubes for the three stopping conditions.
    pub f1: Vec<Cube<D>>,
    pub f2: Vec<Cube<D>>,
    pub f3: Vec<Cube<D>>,
    /// Maximal dyadic components of `F1 ∪ F2 ∪ F3`; these are the children.
    pub components: Vec<Cube<D>>,
    /// Threshold constant used at this node after any doubling.
    pub c0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingTree<const D: usize> {
    pub nodes: Vec<StoppingNode<D>>,
    pub testing: f64,
    pub c0: f64,
    /// `(node, new constant)` for every local doubling.
    pub doublings: Vec<(usize, f64)>,
    index: HashMap<Cube<D>, usize>,
}

/// Maximal subcubes of `root` (excluding `root`) where `mean > threshold`.
fn maximal_exceeding<const D: usize>(pyr: &Pyramid<D>, root: &Cube<D>, threshold: f64) -> Vec<Cube<D>> {
    let min = pyr.geometry().scale_min();
    let mut out = Vec::new();
    let mut stack = if root.scale > min { root.children() } else { Vec::new() };
    while let Some(q) = stack.pop() {
        if pyr.mean_or_zero(&q) > threshold {
            out.push(q);
        } else if q.scale > min {
            stack.extend(q.children());
        }
    }
    out.sort();
    out
}

fn check_support<const D: usize>(f: &GridFunction<D>, p0: &Cube<D>) -> Result<()> {
    let geo = f.geometry();
    let cells = geo.cube_cells(p0)?;
    let mut inside = vec![false; geo.cell_count()];
    for i in cells {
        inside[i] = true;
    }
    if f.values().iter().enumerate().any(|(i, v)| *v != 0.0 && !inside[i]) {
        return Err(Error::Support("function must vanish outside the top cube".into()));
    }
    Ok(())
}

/// Stopping cubes for `|f|`, `|g|` and `|T1_S|` with threshold `c0`.
pub fn build_stopping_tree<const D: usize>(
    op: &DiscreteOperator<D>,
    f: &GridFunction<D>,
    g: &GridFunction<D>,
    p0: &Cube<D>,
    c0: f64,
) -> Result<StoppingTree<D>> {
    if !(c0 >= 1.0) {
        return Err(Error::InvalidArgument(format!("stopping constant {c0} must be at least 1")));
    }
    let geo = *op.geometry();
    if *f.geometry() != geo || *g.geometry() != geo {
        return Err(Error::GeometryMismatch);
    }
    check_support(f, p0)?;
    check_support(g, p0)?;
    let testing = op.testing_constant_max();
    let pf = Pyramid::new(&f.abs());
    let pg = Pyramid::new(&g.abs());
    let mut nodes: Vec<StoppingNode<D>> = Vec::new();
    let mut doublings = Vec::new();
    let mut queue = vec![(*p0, None::<usize>)];
    while let Some((s, parent)) = queue.pop() {
        let sigma_f = pf.mean(&s)?;
        let sigma_g = pg.mean(&s)?;
        let t1 = op.apply(&GridFunction::indicator(geo, &s, 1.0)?)?.abs();
        let pt = Pyramid::new(&t1);
        let id = nodes.len();
        let mut c = c0;
        let mut count = 0;
        let (f1, f2, f3, components) = loop {
            let f1 = maximal_exceeding(&pf, &s, c * sigma_f);
            let f2 = maximal_exceeding(&pg, &s, c * sigma_g);
            let f3 = maximal_exceeding(&pt, &s, c * testing);
            let mut mask = vec![false; geo.cell_count()];
            for q in f1.iter().chain(&f2).chain(&f3) {
                for i in geo.cube_cells(q)? {
                    mask[i] = true;
                }
            }
            let covered = mask.iter().filter(|b| **b).count() as f64 * geo.cell_measure();
            if covered < 0.5 * s.measure() {
                let components = maximal_components(&geo, &mask, &s);
                break (f1, f2, f3, components);
            }
            count += 1;
            if count > MAX_DOUBLINGS {
                return Err(Error::DoublingExhausted(count));
            }
            c *= 2.0;
            log::info!("stopping node {s:?}: |F_S| ≥ |S|/2, doubling the constant to {c}");
            doublings.push((id, c));
        };
        if let Some(p) = parent {
            nodes[p].children.push(id);
        }
        for q in &components {
            queue.push((*q, Some(id)));
        }
        nodes.push(StoppingNode {
            cube: s,
            sigma_f,
            sigma_g,
            parent,
            children: Vec::new(),
            f1,
            f2,
            f3,
            components,
            c0: c,
        });
    }
    let index = nodes.iter().enumerate().map(|(i, n)| (n.cube, i)).collect();
    Ok(StoppingTree {
        nodes,
        testing,
        c0,
        doublings,
        index,
    })
}

impl<const D: usize> StoppingTree<D> {
    pub fn root(&self) -> &StoppingNode<D> {
        &self.nodes[0]
    }

    pub fn node_of(&self, cube: &Cube<D>) -> Option<usize> {
        self.index.get(cube).copied()
    }

    /// Carve-outs `S ∖ F_S` as a sparse collection with `c = 1/2`.
    pub fn collection(&self, geometry: crate::grid::GridGeometry<D>) -> SparseCollection<D> {
        let mut out = SparseCollection::new(geometry, 0.5);
        for n in &self.nodes {
            out.push_standard(n.cube, &n.components);
        }
        out
    }

    /// `P^σ`: the smallest stopping cube containing `p`.
    pub fn sigma_parent(&self, p: &Cube<D>) -> Option<usize> {
        let top = self.root().cube.scale;
        let mut q = *p;
        while q.scale <= top {
            if let Some(i) = self.node_of(&q) {
                return Some(i);
            }
            q = q.parent();
        }
        None
    }

    /// `Q^τ`: the smallest stopping cube `S` with `Q ⋐ S`; cubes too close
    /// to the top attach to the root.
    pub fn tau(&self, q: &Cube<D>, r: u32) -> usize {
        let top = self.root().cube.scale;
        let mut s = q.ancestor(r);
        while s.scale <= top {
            if let Some(i) = self.node_of(&s) {
                return i;
            }
            s = s.parent();
        }
        0
    }

    /// Cubes `Q` (above the mesh, inside the root) with `Q^τ = node`.
    pub fn corona(&self, node: usize, r: u32, scale_min: i32) -> Vec<Cube<D>> {
        let root = self.root().cube;
        let s = self.nodes[node].cube;
        let mut out = Vec::new();
        let mut stack = vec![s];
        while let Some(q) = stack.pop() {
            if q.scale > scale_min {
                if root.contains(&q) && self.tau(&q, r) == node {
                    out.push(q);
                }
                stack.extend(q.children());
            }
        }
        out.sort();
        out
    }
}

/// `ε_Q` for each `Q` with `Q^τ = S`:
/// `ε_Q ⟨|f|⟩_S = Σ_{P : Q ⋐ P ⊆ S} ⟨Δ_P f⟩_{P_Q}`.
pub fn epsilon_coefficients<const D: usize>(
    tree: &StoppingTree<D>,
    f: &GridFunction<D>,
    node: usize,
    r: u32,
) -> Result<Vec<(Cube<D>, f64)>> {
    let geo = f.geometry();
    let s = tree.nodes[node].cube;
    let pyr = Pyramid::new(f);
    let abs_mean = Pyramid::new(&f.abs()).mean(&s)?;
    if abs_mean == 0.0 {
        return Err(Error::DegenerateCorona);
    }
    let mut out = Vec::new();
    for q in tree.corona(node, r, geo.scale_min()) {
        let mut sum = 0.0;
        let mut child = q.ancestor(r - 1);
        while child.scale < s.scale {
            let p = child.parent();
            sum += pyr.mean(&child)? - pyr.mean(&p)?;
            child = p;
        }
        out.push((q, sum / abs_mean));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Buckets {
    pub inside: f64,
    pub near: f64,
    pub far: f64,
    pub neighbor: f64,
}

impl Buckets {
    pub fn sum(&self) -> f64 {
        self.inside + self.near + self.far + self.neighbor
    }

    fn add(&mut self, rel: Relation, v: f64) {
        match rel {
            Relation::Inside => self.inside += v,
            Relation::Near => self.near += v,
            Relation::Far => self.far += v,
            Relation::Neighbor => self.neighbor += v,
            Relation::NotApplicable => {}
        }
    }

    fn merge(mut self, o: Buckets) -> Buckets {
        self.inside += o.inside;
        self.near += o.near;
        self.far += o.far;
        self.neighbor += o.neighbor;
        self
    }
}

/// One half (`ℓP ≥ ℓQ`) of the good-good pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfDecomposition {
    pub buckets: Buckets,
    /// Independently computed `Σ_{good s ≥ s'} ⟨T D_s f, D_{s'} g⟩`.
    pub total: f64,
    /// Pairs with `ℓP = ℓQ`, counted in both halves.
    pub equal_scale: f64,
    /// `Σ |far terms|` by scale gap `log2(ℓP/ℓQ)`.
    pub far_by_gap: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub forward: HalfDecomposition,
    /// The `ℓQ ≥ ℓP` half, computed with the transposed operator on `(g, f)`.
    pub reverse: HalfDecomposition,
    /// `⟨T P^good f, P^good g⟩` computed directly.
    pub full: f64,
    pub full_residual: f64,
}

fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn good_scales<const D: usize>(grid: &DyadicGrid<D>, params: &GoodnessParams) -> Vec<bool> {
    let geo = grid.geometry();
    (geo.scale_min()..=geo.scale_max())
        .map(|s| {
            s > geo.scale_min()
                && matches!(
                    classify_good(&Cube::new(s, [0; D]), grid.omega(), params),
                    Ok(Goodness::Good)
                )
        })
        .collect()
}

fn half_decomposition<const D: usize>(
    op: &DiscreteOperator<D>,
    f: &GridFunction<D>,
    g: &GridFunction<D>,
    good: &[bool],
    r: u32,
) -> Result<HalfDecomposition> {
    let geo = *op.geometry();
    let std = DyadicGrid::standard(geo);
    let pf = Pyramid::new(f);
    let pg = Pyramid::new(g);
    let is_good = |q: &Cube<D>| good[(q.scale - geo.scale_min()) as usize];
    let cubes: Vec<Cube<D>> = geo.all_cubes().into_iter().filter(|q| is_good(q)).collect();
    // Haar pieces as (cells, values)
    let haar = |pyr: &Pyramid<D>, q: &Cube<D>| -> Result<(Vec<usize>, Vec<f64>)> {
        let cells = geo.cube_cells(q)?;
        let parent = pyr.mean(q)?;
        let k = (q.scale - 1 - geo.scale_min()) as u32;
        let vals = cells.iter().map(|&i| pyr.level(k)[pyr.parent_flat(i, k)] - parent).collect();
        Ok((cells, vals))
    };
    let dq: Vec<(Vec<usize>, Vec<f64>)> = cubes.iter().map(|q| haar(&pg, q)).collect::<Result<_>>()?;
    let levels = geo.level() as usize + 1;
    let results: Vec<(Buckets, f64, Vec<f64>)> = cubes
        .par_iter()
        .map(|p| -> Result<(Buckets, f64, Vec<f64>)> {
            let (cells, vals) = haar(&pf, p)?;
            let mut dp = GridFunction::zeros(geo);
            for (i, v) in cells.iter().zip(&vals) {
                dp.values_mut()[*i] = *v;
            }
            let u = op.apply(&dp)?;
            let cell = geo.cell_measure();
            let mut b = Buckets::default();
            let mut equal = 0.0;
            let mut far_gap = vec![0.0; levels];
            for (q, (qc, qv)) in cubes.iter().zip(&dq) {
                if q.scale > p.scale {
                    continue;
                }
                let term: f64 = qc.iter().zip(qv).map(|(i, v)| u.values()[*i] * v).sum::<f64>() * cell;
                let rel = relation(&std, p, q, r)?;
                b.add(rel, term);
                if q.scale == p.scale {
                    equal += term;
                }
                if rel == Relation::Far {
                    far_gap[(p.scale - q.scale) as usize] += term.abs();
                }
            }
            Ok((b, equal, far_gap))
        })
        .collect::<Result<_>>()?;
    let mut buckets = Buckets::default();
    let mut equal_scale = 0.0;
    let mut far_by_gap = vec![0.0; levels];
    for (b, e, fg) in results {
        buckets = buckets.merge(b);
        equal_scale += e;
        for (a, x) in far_by_gap.iter_mut().zip(fg) {
            *a += x;
        }
    }
    // independent total from scale differences
    let mut total = 0.0;
    let mut g_acc = GridFunction::zeros(geo);
    for (j, s) in (geo.scale_min()..=geo.scale_max()).enumerate() {
        if !good[j] {
            continue;
        }
        g_acc = &g_acc + &g.scale_difference(s)?;
        total += op.bilinear_form(&f.scale_difference(s)?, &g_acc)?;
    }
    let residual = relative(buckets.sum(), total);
    Ok(HalfDecomposition {
        buckets,
        total,
        equal_scale,
        far_by_gap,
        residual,
    })
}

/// Split `⟨T P^good f, P^good g⟩` over pairs of good cubes by relation;
/// goodness is read off `grid`'s shift (undecidable scales count as bad).
pub fn decompose_form<const D: usize>(
    op: &DiscreteOperator<D>,
    f: &GridFunction<D>,
    g: &GridFunction<D>,
    grid: &DyadicGrid<D>,
    params: &GoodnessParams,
) -> Result<DecompositionReport> {
    if grid.geometry() != op.geometry() {
        return Err(Error::GeometryMismatch);
    }
    let good = good_scales(grid, params);
    let forward = half_decomposition(op, f, g, &good, params.r)?;
    let reverse = half_decomposition(&op.transpose(), g, f, &good, params.r)?;
    let gf = crate::function::project(f, |q| good[(q.scale - op.geometry().scale_min()) as usize]);
    let gg = crate::function::project(g, |q| good[(q.scale - op.geometry().scale_min()) as usize]);
    let full = op.bilinear_form(&gf, &gg)?;
    let combined = forward.buckets.sum() + reverse.buckets.sum() - forward.equal_scale;
    Ok(DecompositionReport {
        full_residual: relative(combined, full),
        forward,
        reverse,
        full,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseBoundConfig {
    pub c0: f64,
    /// Scales the shifted grids reach above the window.
    pub extension: u32,
}

impl Default for SparseBoundConfig {
    fn default() -> Self {
        Self {
            c0: DEFAULT_C0,
            extension: UNIVERSAL_EXTENSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificates {
    pub universal: SparsityCertificate,
    pub stopping: SparsityCertificate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseBoundReport {
    pub b_t: f64,
    pub lambda_universal: f64,
    pub lambda_stopping: f64,
    pub ratio: f64,
    pub ratio_stopping: f64,
    pub universal_cubes: usize,
    pub stopping_cubes: usize,
    pub certificates: Certificates,
    pub timings: Timings,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub form_ms: f64,
    pub universal_ms: f64,
    pub stopping_ms: f64,
}

fn ratio(b: f64, lambda: f64) -> Result<f64> {
    if lambda == 0.0 {
        if b == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::VanishingSparseForm(b));
    }
    Ok(b.abs() / lambda)
}

/// `|B_T(f, g)|` against the universal sparse form of `(|f|, |g|)` and the
/// sparse form of the stopping tree.
pub fn sparse_bound_verify<const D: usize>(
    op: &DiscreteOperator<D>,
    f: &GridFunction<D>,
    g: &GridFunction<D>,
    config: &SparseBoundConfig,
) -> Result<SparseBoundReport> {
    let geo = *op.geometry();
    crate::sparse::check_middle_support(f)?;
    crate::sparse::check_middle_support(g)?;
    let t = Instant::now();
    let b_t = op.bilinear_form(f, g)?;
    let form_ms = t.elapsed().as_secs_f64() * 1e3;
    let (af, ag) = (f.abs(), g.abs());

    let t = Instant::now();
    let grids = shifted_grid_family(&geo, config.extension);
    let mut universal = universal_sparse(&af, &ag, &grids)?.collection;
    universal.c = 3f64.powi(-(D as i32));
    let lambda_universal = universal.lambda(&af, &ag)?;
    let universal_ms = t.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let tree = build_stopping_tree(op, f, g, &geo.window(), config.c0)?;
    let stopping = tree.collection(geo);
    let lambda_stopping = stopping.lambda(&af, &ag)?;
    let stopping_ms = t.elapsed().as_secs_f64() * 1e3;

    Ok(SparseBoundReport {
        ratio: ratio(b_t, lambda_universal)?,
        ratio_stopping: ratio(b_t, lambda_stopping)?,
        b_t,
        lambda_universal,
        lambda_stopping,
        universal_cubes: universal.len(),
        stopping_cubes: stopping.len(),
        certificates: Certificates {
            universal: universal.verify()?,
            stopping: stopping.verify()?,
        },
        timings: Timings {
            form_ms,
            universal_ms,
            stopping_ms,
        },
    })
}
