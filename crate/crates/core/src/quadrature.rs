//! Gauss–Legendre rules and tensor quadrature over boxes.

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Tensor Gauss rule over `[lo, hi]` in `D` dimensions.
#[derive(Debug, Clone)]
pub struct TensorRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl TensorRule {
    pub fn new(order: usize) -> Self {
        let (nodes, weights) = gauss_legendre(order);
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn integrate<const D: usize>(&self, lo: [f64; D], hi: [f64; D], f: &impl Fn([f64; D]) -> f64) -> f64 {
        let q = self.nodes.len();
        let mut half = [0.0; D];
        let mut mid = [0.0; D];
        let mut jac = 1.0;
        for k in 0..D {
            half[k] = 0.5 * (hi[k] - lo[k]);
            mid[k] = 0.5 * (hi[k] + lo[k]);
            jac *= half[k];
        }
        let mut idx = [0usize; D];
        let mut total = 0.0;
        loop {
            let mut x = [0.0; D];
            let mut w = 1.0;
            for k in 0..D {
                x[k] = mid[k] + half[k] * self.nodes[idx[k]];
                w *= self.weights[idx[k]];
            }
            total += w * f(x);
            let mut k = D;
            loop {
                if k == 0 {
                    return total * jac;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < q {
                    break;
                }
                idx[k] = 0;
            }
        }
    }

    /// Integrate over a box split into `pieces^D` equal sub-boxes.
    pub fn integrate_split<const D: usize>(
        &self,
        lo: [f64; D],
        hi: [f64; D],
        pieces: usize,
        f: &impl Fn([f64; D]) -> f64,
    ) -> f64 {
        if pieces <= 1 {
            return self.integrate(lo, hi, f);
        }
        let mut total = 0.0;
        crate::grid::for_each_in_box([0i64; D], pieces as i64, |m| {
            let mut a = [0.0; D];
            let mut b = [0.0; D];
            for k in 0..D {
                let step = (hi[k] - lo[k]) / pieces as f64;
                a[k] = lo[k] + step * m[k] as f64;
                b[k] = a[k] + step;
            }
            total += self.integrate(a, b, f);
        });
        total
    }

    /// Integrate over a box whose corner `corner_at_lo[k] ? lo : hi` holds an
    /// integrable singularity: the box is halved toward that corner `depth`
    /// times and the last corner box is dropped.
    pub fn integrate_graded<const D: usize>(
        &self,
        lo: [f64; D],
        hi: [f64; D],
        corner_at_lo: [bool; D],
        depth: u32,
        f: &impl Fn([f64; D]) -> f64,
    ) -> f64 {
        let mut lo = lo;
        let mut hi = hi;
        let mut total = 0.0;
        for _ in 0..depth {
            let mut mid = [0.0; D];
            for k in 0..D {
                mid[k] = 0.5 * (lo[k] + hi[k]);
            }
            crate::grid::for_each_in_box([0i64; D], 2, |m| {
                let mut is_corner = true;
                let mut a = [0.0; D];
                let mut b = [0.0; D];
                for k in 0..D {
                    let upper = m[k] == 1;
                    if upper == corner_at_lo[k] {
                        is_corner = false;
                    }
                    if upper {
                        a[k] = mid[k];
                        b[k] = hi[k];
                    } else {
                        a[k] = lo[k];
                        b[k] = mid[k];
                    }
                }
                if !is_corner {
                    total += self.integrate(a, b, f);
                }
            });
            for k in 0..D {
                if corner_at_lo[k] {
                    hi[k] = mid[k];
                } else {
                    lo[k] = mid[k];
                }
            }
        }
        total
    }
}
