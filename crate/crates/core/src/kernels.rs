//! Isotropic Gaussian kernel and the two feature maps built on it.
//!
//! The mean-embedding (ME) map evaluates `k(x, T_j)` at every test location;
//! the smooth characteristic function (SCF) map evaluates `cos(T_j·x̃) f(x̃)`
//! and `sin(T_j·x̃) f(x̃)` at every frequency, where `x̃ = x / σ` and
//! `f(u) = exp(-‖u‖²/2)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian kernel width σ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma.is_finite() && sigma > 0.0 {
            Ok(Self(sigma))
        } else {
            Err(Error::InvalidBandwidth(sigma))
        }
    }

    /// Bandwidth from its logarithm, the parameterization used by the optimizer.
    pub fn from_log(log_sigma: f64) -> Result<Self> {
        Self::new(log_sigma.exp())
    }

    #[inline]
    pub fn sigma(self) -> f64 {
        self.0
    }
}

/// J test locations (ME) or frequencies (SCF) in R^d, plus the kernel width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestLocations {
    points: Array2<f64>,
    bandwidth: Bandwidth,
}

impl TestLocations {
    pub fn new(points: Array2<f64>, bandwidth: Bandwidth) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::EmptyInput("test locations"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("test locations"));
        }
        Ok(Self { points, bandwidth })
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn bandwidth(&self) -> Bandwidth {
        self.bandwidth
    }

    /// Number of locations J.
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn with_bandwidth(&self, bandwidth: Bandwidth) -> Self {
        Self {
            points: self.points.clone(),
            bandwidth,
        }
    }
}

/// Feature vector of a single observation: length J for ME, 2J for SCF.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Which distribution representative a location test evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureFamily {
    /// Mean embeddings evaluated at spatial locations.
    Me,
    /// Smooth characteristic functions evaluated at frequencies.
    Scf,
}

impl FeatureFamily {
    /// Length of the feature vector for `j` locations.
    pub fn feature_len(self, j: usize) -> usize {
        match self {
            FeatureFamily::Me => j,
            FeatureFamily::Scf => 2 * j,
        }
    }

    /// Feature matrix (one row per observation) for every row of `data`.
    pub fn features(self, data: ArrayView2<'_, f64>, locations: &TestLocations) -> Result<Array2<f64>> {
        match self {
            FeatureFamily::Me => me_features(data, locations),
            FeatureFamily::Scf => scf_features(data, locations),
        }
    }
}

fn check_dims(x: usize, y: usize) -> Result<()> {
    if x == y {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: x,
            found: y,
        })
    }
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `k(x, y) = exp(-‖x - y‖² / (2σ²))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], bw: Bandwidth) -> Result<f64> {
    check_dims(x.len(), y.len())?;
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel argument"));
    }
    let s = bw.sigma();
    Ok((-squared_distance(x, y) / (2.0 * s * s)).exp())
}

/// `(k(x, T_1), ..., k(x, T_J))`.
pub fn me_feature(x: &[f64], locations: &TestLocations) -> Result<FeatureVector> {
    check_dims(locations.dim(), x.len())?;
    locations
        .points
        .rows()
        .into_iter()
        .map(|t| gaussian_kernel(x, t.as_slice().expect("standard layout"), locations.bandwidth))
        .collect::<Result<Vec<_>>>()
        .map(FeatureVector)
}

/// `(cos(T_j·x̃) f(x̃))_j` followed by `(sin(T_j·x̃) f(x̃))_j`.
pub fn scf_feature(x: &[f64], locations: &TestLocations) -> Result<FeatureVector> {
    check_dims(locations.dim(), x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel argument"));
    }
    let s = locations.bandwidth.sigma();
    let scaled: Vec<f64> = x.iter().map(|v| v / s).collect();
    let envelope = (-0.5 * scaled.iter().map(|v| v * v).sum::<f64>()).exp();
    let phases: Vec<f64> = locations
        .points
        .rows()
        .into_iter()
        .map(|t| t.iter().zip(&scaled).map(|(a, b)| a * b).sum())
        .collect();
    let mut out = Vec::with_capacity(2 * phases.len());
    out.extend(phases.iter().map(|a| a.cos() * envelope));
    out.extend(phases.iter().map(|a| a.sin() * envelope));
    Ok(FeatureVector(out))
}

fn row_sq_norms(m: ArrayView2<'_, f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r))
}

/// Squared distances between every row of `data` and every location (n×J).
pub(crate) fn squared_distances(data: ArrayView2<'_, f64>, points: ArrayView2<'_, f64>) -> Array2<f64> {
    let xn = row_sq_norms(data);
    let tn = row_sq_norms(points);
    let mut d = data.dot(&points.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (xn[i] + tn[j] - 2.0 * *v).max(0.0);
    }
    d
}

fn check_matrix(data: ArrayView2<'_, f64>, locations: &TestLocations) -> Result<()> {
    check_dims(locations.dim(), data.ncols())?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample"));
    }
    Ok(())
}

/// ME features for every row of `data` (n×J).
pub fn me_features(data: ArrayView2<'_, f64>, locations: &TestLocations) -> Result<Array2<f64>> {
    check_matrix(data, locations)?;
    let s = locations.bandwidth.sigma();
    let scale = -1.0 / (2.0 * s * s);
    let mut d = squared_distances(data, locations.points());
    d.mapv_inplace(|v| (v * scale).exp());
    Ok(d)
}

/// Scaled inputs, their envelopes `f(x̃)`, and the phases `T_j·x̃`.
pub(crate) struct ScfParts {
    pub scaled: Array2<f64>,
    pub envelope: Array1<f64>,
    pub phases: Array2<f64>,
}

pub(crate) fn scf_parts(data: ArrayView2<'_, f64>, locations: &TestLocations) -> ScfParts {
    let s = locations.bandwidth.sigma();
    let scaled = data.mapv(|v| v / s);
    let envelope = row_sq_norms(scaled.view()).mapv(|v| (-0.5 * v).exp());
    let phases = scaled.dot(&locations.points.t());
    ScfParts {
        scaled,
        envelope,
        phases,
    }
}

/// SCF features for every row of `data` (n×2J, cosines first).
pub fn scf_features(data: ArrayView2<'_, f64>, locations: &TestLocations) -> Result<Array2<f64>> {
    check_matrix(data, locations)?;
    let parts = scf_parts(data, locations);
    let (n, j) = parts.phases.dim();
    let mut out = Array2::zeros((n, 2 * j));
    for i in 0..n {
        let f = parts.envelope[i];
        for k in 0..j {
            let (sin, cos) = parts.phases[[i, k]].sin_cos();
            out[[i, k]] = cos * f;
            out[[i, j + k]] = sin * f;
        }
    }
    Ok(out)
}

/// Pulls a gradient with respect to the feature matrix back to the test
/// locations and the log-bandwidth.
///
/// `grad` has the shape of `family.features(data, locations)`. Returns the
/// J×d location gradient and the derivative with respect to `ln σ`.
pub(crate) fn pullback(
    family: FeatureFamily,
    data: ArrayView2<'_, f64>,
    locations: &TestLocations,
    grad: ArrayView2<'_, f64>,
) -> (Array2<f64>, f64) {
    let s2 = locations.bandwidth.sigma().powi(2);
    match family {
        FeatureFamily::Me => {
            let d = squared_distances(data, locations.points());
            let scale = -1.0 / (2.0 * s2);
            // h_ij = g_ij * k(x_i, T_j)
            let mut h = d.mapv(|v| (v * scale).exp());
            h *= &grad;
            let log_sigma = (&h * &d).sum() / s2;
            let col_sums = h.sum_axis(Axis(0));
            let mut g_loc = h.t().dot(&data);
            // Σ_i h_ij (x_i - T_j) / σ²
            for (j, mut row) in g_loc.rows_mut().into_iter().enumerate() {
                row.scaled_add(-col_sums[j], &locations.points.row(j));
                row /= s2;
            }
            (g_loc, log_sigma)
        }
        FeatureFamily::Scf => {
            let parts = scf_parts(data, locations);
            let (n, j) = parts.phases.dim();
            let sq: Array1<f64> = row_sq_norms(parts.scaled.view());
            // coefficient of x̃_i in ∂/∂T_j
            let mut w = Array2::zeros((n, j));
            let mut log_sigma = 0.0;
            for i in 0..n {
                let f = parts.envelope[i];
                for k in 0..j {
                    let a = parts.phases[[i, k]];
                    let (sin, cos) = a.sin_cos();
                    let gc = grad[[i, k]];
                    let gs = grad[[i, j + k]];
                    w[[i, k]] = f * (gs * cos - gc * sin);
                    log_sigma += gc * f * (sin * a + cos * sq[i]) + gs * f * (sin * sq[i] - cos * a);
                }
            }
            (w.t().dot(&parts.scaled), log_sigma)
        }
    }
}
