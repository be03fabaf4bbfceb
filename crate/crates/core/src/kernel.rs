//! Translation-invariant singular kernels `K(x, y) = k(x - y)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelKind {
    /// `1/(x - y)`, d = 1.
    Hilbert,
    /// `(x - y)/((x - y)² + δ²)`, d = 1.
    Smoothed { delta: f64 },
    /// `(x₁ - y₁)/|x - y|³`, d = 2.
    Riesz2d,
    /// `|x - y|^{-d}`; positive, used for Hardy-type sums.
    Hardy,
    Zero,
}

impl KernelKind {
    /// Parses `hilbert`, `smoothed:<delta>`, `riesz2d`, `hardy`, `zero`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "hilbert" => Ok(Self::Hilbert),
            "riesz2d" => Ok(Self::Riesz2d),
            "hardy" => Ok(Self::Hardy),
            "zero" => Ok(Self::Zero),
            _ => {
                let delta = s
                    .strip_prefix("smoothed:")
                    .ok_or_else(|| Error::Parse(format!("unknown kernel {s:?}")))?
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad smoothing parameter: {e}")))?;
                if !(delta > 0.0 && delta.is_finite()) {
                    return Err(Error::Parse(format!("smoothing parameter {delta} must be positive")));
                }
                Ok(Self::Smoothed { delta })
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Hilbert => "hilbert".into(),
            Self::Smoothed { delta } => format!("smoothed:{delta}"),
            Self::Riesz2d => "riesz2d".into(),
            Self::Hardy => "hardy".into(),
            Self::Zero => "zero".into(),
        }
    }
}

/// A kernel together with its smoothness exponent and size constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec<const D: usize> {
    pub kind: KernelKind,
    pub eta: f64,
    /// Declared constant in `|K| ≤ 𝒦/|x-y|^d` and the Hölder bound.
    pub size_constant: f64,
    pub antisymmetric: bool,
}

impl<const D: usize> KernelSpec<D> {
    pub fn new(kind: KernelKind) -> Result<Self> {
        let (size_constant, antisymmetric) = match kind {
            KernelKind::Hilbert | KernelKind::Smoothed { .. } if D != 1 => {
                return Err(Error::InvalidArgument(format!("{} kernel needs d = 1", kind.name())))
            }
            KernelKind::Riesz2d if D != 2 => {
                return Err(Error::InvalidArgument("riesz2d kernel needs d = 2".into()))
            }
            KernelKind::Hilbert => (2.0, true),
            KernelKind::Smoothed { .. } => (4.0, true),
            KernelKind::Riesz2d => (16.0, true),
            KernelKind::Hardy => (D as f64 * (1u64 << (D + 1)) as f64, false),
            KernelKind::Zero => (0.0, true),
        };
        Ok(Self {
            kind,
            eta: 1.0,
            size_constant,
            antisymmetric,
        })
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::new(KernelKind::parse(s)?)
    }

    pub fn name(&self) -> String {
        self.kind.name()
    }

    /// `k(z)` for `z = x - y ≠ 0`.
    pub fn profile(&self, z: [f64; D]) -> f64 {
        let r2: f64 = z.iter().map(|v| v * v).sum();
        match self.kind {
            KernelKind::Hilbert => 1.0 / z[0],
            KernelKind::Smoothed { delta } => z[0] / (z[0] * z[0] + delta * delta),
            KernelKind::Riesz2d => z[0] / (r2 * r2.sqrt()),
            KernelKind::Hardy => r2.powf(-(D as f64) / 2.0),
            KernelKind::Zero => 0.0,
        }
    }

    pub fn eval(&self, x: [f64; D], y: [f64; D]) -> f64 {
        let mut z = [0.0; D];
        for k in 0..D {
            z[k] = x[k] - y[k];
        }
        self.profile(z)
    }

    /// Check the size and Hölder bounds on `samples` deterministic triples.
    pub fn certify(&self, samples: usize) -> Certification {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6b65726e);
        let d = D as f64;
        let mut size_max: f64 = 0.0;
        let mut smooth_max: f64 = 0.0;
        for _ in 0..samples {
            let rho = rng.gen_range(-8.0..8.0f64).exp2();
            let dir = unit_vector::<D>(&mut rng);
            let y: [f64; D] = std::array::from_fn(|_| rng.gen_range(-4.0..4.0));
            let x: [f64; D] = std::array::from_fn(|k| y[k] + rho * dir[k]);
            let tau = rng.gen_range(1e-3..0.499);
            let dir2 = unit_vector::<D>(&mut rng);
            let step: [f64; D] = std::array::from_fn(|k| tau * rho * dir2[k]);
            let x2: [f64; D] = std::array::from_fn(|k| x[k] + step[k]);
            let y2: [f64; D] = std::array::from_fn(|k| y[k] + step[k]);
            let dist = rho;
            let e = tau * rho;
            let k0 = self.eval(x, y);
            size_max = size_max.max(k0.abs() * dist.powf(d));
            let scale = dist.powf(d + self.eta) / e.powf(self.eta);
            smooth_max = smooth_max.max((k0 - self.eval(x2, y)).abs() * scale);
            smooth_max = smooth_max.max((k0 - self.eval(x, y2)).abs() * scale);
        }
        let measured = size_max.max(smooth_max);
        Certification {
            kernel: self.name(),
            samples,
            size_ratio_max: size_max,
            smoothness_ratio_max: smooth_max,
            measured_constant: measured,
            declared_constant: self.size_constant,
            passed: measured <= self.size_constant * (1.0 + 1e-12),
        }
    }
}

fn unit_vector<const D: usize>(rng: &mut ChaCha8Rng) -> [f64; D] {
    loop {
        let v: [f64; D] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|a| a / n);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certification {
    pub kernel: String,
    pub samples: usize,
    pub size_ratio_max: f64,
    pub smoothness_ratio_max: f64,
    /// Smallest constant consistent with every sampled triple.
    pub measured_constant: f64,
    pub declared_constant: f64,
    pub passed: bool,
}
