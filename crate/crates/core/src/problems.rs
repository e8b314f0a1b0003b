//! Seeded generators for the synthetic benchmark problems.
//!
//! | Problem | P | Q |
//! |---------|---|---|
//! | SG    | N(0, I_d) | N(0, I_d) |
//! | GMD   | N(0, I_d) | N((shift, 0, .., 0), I_d), shift = 1 by default |
//! | GVD   | N(0, I_d) | N(0, diag(2, 1, .., 1)) |
//! | Blobs | 4×4 grid of unit Gaussians | same grid, rotated anisotropic components |

use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::statistics::SampleSet;

/// Geometry of the Blobs mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobsConfig {
    /// Components per grid side (the mixture has `grid²` components).
    pub grid: usize,
    /// Distance between neighbouring centers.
    pub spacing: f64,
    /// Eigenvalues of each Q component's covariance (P uses the identity).
    pub q_eigenvalues: (f64, f64),
    /// Angle of the leading Q eigenvector.
    pub angle: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            spacing: 5.0,
            q_eigenvalues: (2.0, 1.0),
            angle: FRAC_PI_4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Problem {
    /// Same Gaussian; the null holds.
    Sg,
    /// Gaussian mean difference along the first coordinate.
    Gmd { shift: f64 },
    /// Gaussian variance difference along the first coordinate.
    Gvd,
    Blobs(BlobsConfig),
}

impl Problem {
    pub fn name(&self) -> &'static str {
        match self {
            Problem::Sg => "SG",
            Problem::Gmd { .. } => "GMD",
            Problem::Gvd => "GVD",
            Problem::Blobs(_) => "Blobs",
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sg" => Ok(Problem::Sg),
            "gmd" => Ok(Problem::Gmd { shift: 1.0 }),
            "gvd" => Ok(Problem::Gvd),
            "blobs" => Ok(Problem::Blobs(BlobsConfig::default())),
            _ => Err(Error::InvalidConfig(format!("unknown problem `{s}`"))),
        }
    }
}

/// Which of the two distributions to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    P,
    Q,
}

impl Side {
    fn tag(self) -> u64 {
        match self {
            Side::P => 0x50,
            Side::Q => 0x51,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub problem: Problem,
    pub d: usize,
}

impl ProblemSpec {
    /// Validates the problem/dimension combination (Blobs lives in R²).
    pub fn new(problem: Problem, d: usize) -> Result<Self> {
        let spec = Self { problem, d };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidConfig("dimension must be at least 1".into()));
        }
        match self.problem {
            Problem::Blobs(cfg) => {
                if self.d != 2 {
                    return Err(Error::InvalidConfig(format!("Blobs is two-dimensional, got d = {}", self.d)));
                }
                if cfg.grid == 0 || !(cfg.q_eigenvalues.0 > 0.0 && cfg.q_eigenvalues.1 > 0.0) {
                    return Err(Error::InvalidConfig("invalid Blobs geometry".into()));
                }
            }
            Problem::Gmd { shift } if !shift.is_finite() => {
                return Err(Error::InvalidConfig(format!("non-finite mean shift {shift}")));
            }
            _ => {}
        }
        Ok(())
    }

    /// Whether P = Q for this problem.
    pub fn h0_holds(&self) -> bool {
        match self.problem {
            Problem::Sg => true,
            Problem::Gmd { shift } => shift == 0.0,
            Problem::Gvd | Problem::Blobs(_) => false,
        }
    }
}

/// `n` i.i.d. draws from one side of a problem; deterministic in `seed`.
pub fn sample_problem(spec: &ProblemSpec, n: usize, side: Side, seed: u64) -> Result<SampleSet> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[side.tag()]));
    let d = spec.d;
    let mut data: Array2<f64> = Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal));
    match (spec.problem, side) {
        (_, Side::P) if !matches!(spec.problem, Problem::Blobs(_)) => {}
        (Problem::Sg, _) => {}
        (Problem::Gmd { shift }, Side::Q) => data.column_mut(0).mapv_inplace(|v| v + shift),
        (Problem::Gvd, Side::Q) => data.column_mut(0).mapv_inplace(|v| v * 2f64.sqrt()),
        (Problem::Blobs(cfg), side) => {
            let (c, s) = (cfg.angle.cos(), cfg.angle.sin());
            let (a, b) = (cfg.q_eigenvalues.0.sqrt(), cfg.q_eigenvalues.1.sqrt());
            for mut row in data.rows_mut() {
                let (u, v) = (row[0], row[1]);
                let (u, v) = match side {
                    Side::P => (u, v),
                    // R diag(√λ₁, √λ₂) z
                    Side::Q => (c * a * u - s * b * v, s * a * u + c * b * v),
                };
                let cx = rng.random_range(0..cfg.grid) as f64 * cfg.spacing;
                let cy = rng.random_range(0..cfg.grid) as f64 * cfg.spacing;
                row[0] = cx + u;
                row[1] = cy + v;
            }
        }
        _ => unreachable!("P side handled above"),
    }
    SampleSet::new(data, format!("{}-{:?}", spec.problem, side))
}

/// Mean-shift problem with an arbitrary first-coordinate shift on the Q side.
pub fn sample_gmd_shift(shift: f64, d: usize, n: usize, side: Side, seed: u64) -> Result<SampleSet> {
    sample_problem(&ProblemSpec::new(Problem::Gmd { shift }, d)?, n, side, seed)
}
