//! Small dense symmetric matrices: covariance assembly and the regularized
//! inverse square root used by every normalized statistic.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::kernels::FeatureVector;

const SYMMETRY_TOL: f64 = 1e-10;

/// Real symmetric positive semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Array2<f64>);

impl SpdMatrix {
    /// Wraps `m`, checking that it is square, finite and symmetric to 1e-10
    /// (relative to its largest entry).
    pub fn new(m: Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c {
            return Err(Error::DimensionMismatch {
                expected: r,
                found: c,
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        let scale = m.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for i in 0..r {
            for j in (i + 1)..r {
                if (m[[i, j]] - m[[j, i]]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidConfig(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(Array2::eye(n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Unbiased sample covariance of the rows of `rows` (two-pass).
pub fn covariance_of_rows(rows: ArrayView2<'_, f64>) -> Result<SpdMatrix> {
    let n = rows.nrows();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: n });
    }
    let mean = rows.mean_axis(Axis(0)).expect("nonempty");
    let centered = &rows - &mean;
    let mut cov = centered.t().dot(&centered);
    cov /= (n - 1) as f64;
    symmetrize(&mut cov);
    Ok(SpdMatrix(cov))
}

/// Unbiased sample covariance of a list of feature vectors.
pub fn empirical_covariance(features: &[FeatureVector]) -> Result<SpdMatrix> {
    if features.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: features.len(),
        });
    }
    let p = features[0].len();
    let mut m = Array2::zeros((features.len(), p));
    for (i, f) in features.iter().enumerate() {
        if f.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: f.len(),
            });
        }
        m.row_mut(i).assign(&Array1::from(f.0.clone()));
    }
    covariance_of_rows(m.view())
}

/// `Σx/ρ̂ + Σy/(1-ρ̂)` with `ρ̂ = n1/(n1+n2)`.
pub fn pooled_covariance(cov_x: &SpdMatrix, cov_y: &SpdMatrix, n1: usize, n2: usize) -> Result<SpdMatrix> {
    if cov_x.dim() != cov_y.dim() {
        return Err(Error::DimensionMismatch {
            expected: cov_x.dim(),
            found: cov_y.dim(),
        });
    }
    let t = (n1 + n2) as f64;
    let wx = t / n1 as f64;
    let wy = t / n2 as f64;
    Ok(SpdMatrix(&cov_x.0 * wx + &cov_y.0 * wy))
}

/// Tolerances for [`spectral_inv_sqrt`].
#[derive(Debug, Clone, Copy)]
pub struct InvSqrtOptions {
    /// Smallest admissible eigenvalue of `m + γI`.
    pub singular_threshold: f64,
    /// Bound on `‖R²(m + γI) - I‖_F / ‖I‖_F`.
    pub residual_tolerance: f64,
}

impl Default for InvSqrtOptions {
    fn default() -> Self {
        Self {
            singular_threshold: 1e-12,
            residual_tolerance: 1e-8,
        }
    }
}

/// `(m + γI)^{-1/2}` together with the spectrum it was built from.
#[derive(Debug, Clone)]
pub struct SpectralInvSqrt {
    pub inv_sqrt: SpdMatrix,
    /// Eigenvalues of `m + γI`, each floored at γ.
    pub eigenvalues: Array1<f64>,
    /// Orthonormal eigenvectors, one per column.
    pub eigenvectors: Array2<f64>,
}

/// `(m + γI)^{-1/2}` with default tolerances.
pub fn regularized_inv_sqrt(m: &SpdMatrix, gamma: f64) -> Result<SpdMatrix> {
    spectral_inv_sqrt(m, gamma, InvSqrtOptions::default()).map(|s| s.inv_sqrt)
}

/// Inverse square root by symmetric eigendecomposition, mapping each
/// eigenvalue `λ ↦ (max(λ, 0) + γ)^{-1/2}`.
pub fn spectral_inv_sqrt(m: &SpdMatrix, gamma: f64, opts: InvSqrtOptions) -> Result<SpectralInvSqrt> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidConfig(format!("regularization must be >= 0, got {gamma}")));
    }
    let p = m.dim();
    if p == 0 {
        return Err(Error::EmptyInput("matrix"));
    }
    let dm = DMatrix::from_fn(p, p, |i, j| 0.5 * (m.0[[i, j]] + m.0[[j, i]]));
    let eig = SymmetricEigen::new(dm.clone());
    if eig.eigenvalues.iter().chain(eig.eigenvectors.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigendecomposition"));
    }
    let eigenvalues = Array1::from_iter(eig.eigenvalues.iter().map(|&l| l.max(0.0) + gamma));
    let min = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < opts.singular_threshold {
        return Err(Error::NearSingular { min_eigenvalue: min });
    }
    let u = Array2::from_shape_fn((p, p), |(i, j)| eig.eigenvectors[(i, j)]);
    let scaled = &u * &eigenvalues.mapv(|l| l.powf(-0.5));
    let mut r = scaled.dot(&u.t());
    symmetrize(&mut r);
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("inverse square root"));
    }

    let mut reg = Array2::from_shape_fn((p, p), |(i, j)| dm[(i, j)]);
    reg.diag_mut().mapv_inplace(|v| v + gamma);
    let mut resid = r.dot(&r).dot(&reg);
    resid.diag_mut().mapv_inplace(|v| v - 1.0);
    let residual = resid.iter().map(|v| v * v).sum::<f64>().sqrt() / (p as f64).sqrt();
    if !residual.is_finite() || residual > opts.residual_tolerance {
        return Err(Error::InvSqrtResidual { residual });
    }

    Ok(SpectralInvSqrt {
        inv_sqrt: SpdMatrix(r),
        eigenvalues,
        eigenvectors: u,
    })
}

fn symmetrize(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
}
