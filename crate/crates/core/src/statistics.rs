//! Two-sample test statistics.
//!
//! Location statistics come in two constructions:
//!
//! * **pooled** (L1-ME, L1-SCF): separate covariances for each sample,
//!   combined as `Σx/ρ̂ + Σy/(1-ρ̂)`, scaled by `√t` with `t = N₁ + N₂`;
//!   sample sizes may differ.
//! * **paired** (ME, SCF): differences `z_i = φ(x_i) - φ(y_i)` with a single
//!   covariance, scaled by `√n`; requires `N₁ = N₂`.
//!
//! Both are regularized by `γI` before the inverse square root. The MMD
//! estimators at the bottom serve as baselines.

use std::time::Duration;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_alpha, Error, Result};
use crate::kernels::{Bandwidth, FeatureFamily, TestLocations};
use crate::matops::{covariance_of_rows, pooled_covariance, spectral_inv_sqrt, InvSqrtOptions, SpectralInvSqrt};

/// Default regularization added to the covariance before inversion.
pub const DEFAULT_GAMMA: f64 = 1e-5;

/// An n×d sample of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    data: Array2<f64>,
    label: String,
}

impl SampleSet {
    pub fn new(data: Array2<f64>, label: impl Into<String>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::EmptyInput("sample"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample"));
        }
        Ok(Self {
            data,
            label: label.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    /// New sample made of the given rows, in order.
    pub fn select(&self, indices: &[usize], label: impl Into<String>) -> SampleSet {
        SampleSet {
            data: self.data.select(Axis(0), indices),
            label: label.into(),
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn concat(&self, other: &SampleSet) -> Result<SampleSet> {
        check_same_dim(self, other)?;
        let data = ndarray::concatenate(Axis(0), &[self.data.view(), other.data.view()])
            .expect("column counts checked");
        Ok(SampleSet {
            data,
            label: format!("{}+{}", self.label, other.label),
        })
    }
}

fn check_same_dim(x: &SampleSet, y: &SampleSet) -> Result<()> {
    if x.dim() == y.dim() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: x.dim(),
            found: y.dim(),
        })
    }
}

fn check_locations(x: &SampleSet, locations: &TestLocations) -> Result<()> {
    if x.dim() == locations.dim() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: locations.dim(),
            found: x.dim(),
        })
    }
}

/// Norm applied to the (normalized) difference vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    L1,
    /// Squared Euclidean norm.
    L2,
}

impl Norm {
    fn apply(self, v: ArrayView1<'_, f64>) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.dot(&v),
        }
    }

    /// Derivative of [`Norm::apply`] with respect to `v` (0 at the ℓ1 kink).
    fn derivative(self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        match self {
            Norm::L1 => v.mapv(|x| if x == 0.0 { 0.0 } else { x.signum() }),
            Norm::L2 => v.mapv(|x| 2.0 * x),
        }
    }
}

/// Value of a location statistic together with the quantities it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationStatistic {
    pub value: f64,
    /// Difference of the empirical representatives, `S`.
    pub s_vector: Array1<f64>,
    /// `√t (Σ + γI)^{-1/2} S` (or `√n ...` for paired statistics); `None` when unnormalized.
    pub normalized_vector: Option<Array1<f64>>,
    pub family: FeatureFamily,
    pub norm: Norm,
    pub n1: usize,
    pub n2: usize,
}

impl LocationStatistic {
    pub fn normalized(&self) -> bool {
        self.normalized_vector.is_some()
    }

    /// Recomputes `value` from the stored vectors.
    pub fn recompute(&self) -> f64 {
        match &self.normalized_vector {
            Some(v) => self.norm.apply(v.view()),
            None => {
                let n = self.n1 as f64;
                match self.norm {
                    Norm::L1 => n.sqrt() * Norm::L1.apply(self.s_vector.view()),
                    Norm::L2 => n * Norm::L2.apply(self.s_vector.view()),
                }
            }
        }
    }
}

/// Result of a full test: statistic, threshold and decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test_name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub alpha: f64,
    pub reject: bool,
    pub locations_used: Option<TestLocations>,
    pub elapsed: Duration,
}

impl TestOutcome {
    /// Rejects iff `statistic > threshold`.
    pub fn new(
        test_name: impl Into<String>,
        statistic: f64,
        threshold: f64,
        alpha: f64,
        locations_used: Option<TestLocations>,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            test_name: test_name.into(),
            statistic,
            threshold,
            alpha,
            reject: statistic > threshold,
            locations_used,
            elapsed: Duration::ZERO,
        })
    }

    pub fn with_elapsed(mut self, elapsed: Duration) -> Self {
        self.elapsed = elapsed;
        self
    }
}

/// `μ_X(T_j) = (1/n) Σ_i k(x_i, T_j)` for each location.
pub fn mean_embedding_at(sample: &SampleSet, locations: &TestLocations) -> Result<Array1<f64>> {
    check_locations(sample, locations)?;
    let f = FeatureFamily::Me.features(sample.data(), locations)?;
    Ok(f.mean_axis(Axis(0)).expect("sample is nonempty"))
}

// ---------------------------------------------------------------------------
// Differentiable normalized pipeline
// ---------------------------------------------------------------------------

/// Forward state of a normalized statistic, kept for the backward pass.
pub(crate) struct NormalizedState {
    pub value: f64,
    pub s: Array1<f64>,
    pub v: Array1<f64>,
    pub spectral: SpectralInvSqrt,
    /// `√t` (pooled) or `√n` (paired).
    pub scale: f64,
    pub norm: Norm,
}

impl NormalizedState {
    fn new(s: Array1<f64>, spectral: SpectralInvSqrt, scale: f64, norm: Norm) -> Result<Self> {
        let v = spectral.inv_sqrt.as_array().dot(&s) * scale;
        let value = norm.apply(v.view());
        if !value.is_finite() {
            return Err(Error::NonFinite("statistic"));
        }
        Ok(Self {
            value,
            s,
            v,
            spectral,
            scale,
            norm,
        })
    }

    /// Gradients of `value` with respect to `S` and to the regularized
    /// covariance (symmetric).
    fn backward(&self) -> (Array1<f64>, Array2<f64>) {
        let w = self.norm.derivative(self.v.view());
        let r = self.spectral.inv_sqrt.as_array();
        let grad_s = r.dot(&w) * self.scale;

        // value depends on R through Σ_ab scale·w_a R_ab s_b
        let u = &self.spectral.eigenvectors;
        let p = w.len();
        let outer = Array2::from_shape_fn((p, p), |(a, b)| self.scale * w[a] * self.s[b]);
        let mut c = u.t().dot(&outer).dot(u);
        let roots = self.spectral.eigenvalues.mapv(f64::sqrt);
        for a in 0..p {
            for b in 0..p {
                // divided difference of λ^{-1/2}
                let g = -1.0 / (roots[a] * roots[b] * (roots[a] + roots[b]));
                c[[a, b]] *= g;
            }
        }
        let wm = u.dot(&c).dot(&u.t());
        let grad_cov = (&wm + &wm.t()) * 0.5;
        (grad_s, grad_cov)
    }
}

fn mean_rows(f: ArrayView2<'_, f64>) -> Array1<f64> {
    f.mean_axis(Axis(0)).expect("nonempty")
}

pub(crate) fn pooled_forward(
    fx: ArrayView2<'_, f64>,
    fy: ArrayView2<'_, f64>,
    gamma: f64,
    norm: Norm,
    opts: InvSqrtOptions,
) -> Result<NormalizedState> {
    let (n1, n2) = (fx.nrows(), fy.nrows());
    let s = mean_rows(fx) - mean_rows(fy);
    let cov = pooled_covariance(&covariance_of_rows(fx)?, &covariance_of_rows(fy)?, n1, n2)?;
    let spectral = spectral_inv_sqrt(&cov, gamma, opts)?;
    NormalizedState::new(s, spectral, ((n1 + n2) as f64).sqrt(), norm)
}

/// Gradients of a pooled statistic with respect to each feature row of X and Y.
pub(crate) fn pooled_backward(
    state: &NormalizedState,
    fx: ArrayView2<'_, f64>,
    fy: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (n1, n2) = (fx.nrows() as f64, fy.nrows() as f64);
    let t = n1 + n2;
    let (grad_s, grad_cov) = state.backward();
    let side = |f: ArrayView2<'_, f64>, n: f64, sign: f64| {
        let centered = &f - &mean_rows(f);
        // d pooled / d Σ_side = t/n; d Σ_side / d z_i = 2/(n-1) (·) c_i
        let mut g = centered.dot(&grad_cov) * (2.0 * t / (n * (n - 1.0)));
        g += &(&grad_s * (sign / n));
        g
    };
    (side(fx, n1, 1.0), side(fy, n2, -1.0))
}

pub(crate) fn paired_forward(
    fx: ArrayView2<'_, f64>,
    fy: ArrayView2<'_, f64>,
    gamma: f64,
    norm: Norm,
    opts: InvSqrtOptions,
) -> Result<NormalizedState> {
    let (n1, n2) = (fx.nrows(), fy.nrows());
    if n1 != n2 {
        return Err(Error::UnsupportedPairing { n1, n2 });
    }
    let z = &fx - &fy;
    let s = mean_rows(z.view());
    let cov = covariance_of_rows(z.view())?;
    let spectral = spectral_inv_sqrt(&cov, gamma, opts)?;
    NormalizedState::new(s, spectral, (n1 as f64).sqrt(), norm)
}

/// Gradient of a paired statistic with respect to each difference row `z_i`
/// (the X features receive `+g`, the Y features `-g`).
pub(crate) fn paired_backward(state: &NormalizedState, fx: ArrayView2<'_, f64>, fy: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = fx.nrows() as f64;
    let z = &fx - &fy;
    let centered = &z - &mean_rows(z.view());
    let (grad_s, grad_cov) = state.backward();
    let mut g = centered.dot(&grad_cov) * (2.0 / (n - 1.0));
    g += &(&grad_s / n);
    g
}

fn check_pair(x: &SampleSet, y: &SampleSet, locations: &TestLocations) -> Result<()> {
    check_same_dim(x, y)?;
    check_locations(x, locations)?;
    for s in [x, y] {
        if s.n() < 2 {
            return Err(Error::TooFewSamples { needed: 2, found: s.n() });
        }
    }
    Ok(())
}

/// Pooled normalized statistic computed from precomputed feature matrices.
pub fn pooled_statistic_from_features(
    fx: ArrayView2<'_, f64>,
    fy: ArrayView2<'_, f64>,
    family: FeatureFamily,
    norm: Norm,
    gamma: f64,
) -> Result<LocationStatistic> {
    for f in [fx, fy] {
        if f.nrows() < 2 {
            return Err(Error::TooFewSamples { needed: 2, found: f.nrows() });
        }
    }
    if fx.ncols() != fy.ncols() {
        return Err(Error::DimensionMismatch {
            expected: fx.ncols(),
            found: fy.ncols(),
        });
    }
    let state = pooled_forward(fx, fy, gamma, norm, InvSqrtOptions::default())?;
    Ok(LocationStatistic {
        value: state.value,
        s_vector: state.s,
        normalized_vector: Some(state.v),
        family,
        norm,
        n1: fx.nrows(),
        n2: fy.nrows(),
    })
}

/// `‖√t (Σ_{N₁,N₂} + γI)^{-1/2} S‖` for either feature family and norm.
pub fn pooled_statistic(
    x: &SampleSet,
    y: &SampleSet,
    locations: &TestLocations,
    family: FeatureFamily,
    norm: Norm,
    gamma: f64,
) -> Result<LocationStatistic> {
    check_pair(x, y, locations)?;
    let fx = family.features(x.data(), locations)?;
    let fy = family.features(y.data(), locations)?;
    pooled_statistic_from_features(fx.view(), fy.view(), family, norm, gamma)
}

/// Paired normalized statistic `‖√n (Σ_n + γI)^{-1/2} S_n‖`.
pub fn paired_statistic(
    x: &SampleSet,
    y: &SampleSet,
    locations: &TestLocations,
    family: FeatureFamily,
    norm: Norm,
    gamma: f64,
) -> Result<LocationStatistic> {
    check_pair(x, y, locations)?;
    if x.n() != y.n() {
        return Err(Error::UnsupportedPairing { n1: x.n(), n2: y.n() });
    }
    let fx = family.features(x.data(), locations)?;
    let fy = family.features(y.data(), locations)?;
    let state = paired_forward(fx.view(), fy.view(), gamma, norm, InvSqrtOptions::default())?;
    Ok(LocationStatistic {
        value: state.value,
        s_vector: state.s,
        normalized_vector: Some(state.v),
        family,
        norm,
        n1: x.n(),
        n2: y.n(),
    })
}

/// L1-ME statistic.
pub fn l1_me_statistic(x: &SampleSet, y: &SampleSet, locations: &TestLocations, gamma: f64) -> Result<LocationStatistic> {
    pooled_statistic(x, y, locations, FeatureFamily::Me, Norm::L1, gamma)
}

/// L1-SCF statistic.
pub fn l1_scf_statistic(x: &SampleSet, y: &SampleSet, locations: &TestLocations, gamma: f64) -> Result<LocationStatistic> {
    pooled_statistic(x, y, locations, FeatureFamily::Scf, Norm::L1, gamma)
}

/// ME statistic (squared ℓ2, paired construction); χ²(J) under the null.
pub fn me_statistic_l2(x: &SampleSet, y: &SampleSet, locations: &TestLocations, gamma: f64) -> Result<LocationStatistic> {
    paired_statistic(x, y, locations, FeatureFamily::Me, Norm::L2, gamma)
}

/// SCF statistic (squared ℓ2, paired construction); χ²(2J) under the null.
pub fn scf_statistic_l2(x: &SampleSet, y: &SampleSet, locations: &TestLocations, gamma: f64) -> Result<LocationStatistic> {
    paired_statistic(x, y, locations, FeatureFamily::Scf, Norm::L2, gamma)
}

/// Unnormalized `(√n ‖S‖₁, n ‖S‖₂²)` on equal-size samples.
pub fn unnormalized_statistics(
    x: &SampleSet,
    y: &SampleSet,
    locations: &TestLocations,
    family: FeatureFamily,
) -> Result<(f64, f64)> {
    check_same_dim(x, y)?;
    check_locations(x, locations)?;
    if x.n() != y.n() {
        return Err(Error::UnsupportedPairing { n1: x.n(), n2: y.n() });
    }
    let fx = family.features(x.data(), locations)?;
    let fy = family.features(y.data(), locations)?;
    let s = mean_rows(fx.view()) - mean_rows(fy.view());
    Ok(unnormalized_from_difference(s.view(), x.n()))
}

pub(crate) fn unnormalized_from_difference(s: ArrayView1<'_, f64>, n: usize) -> (f64, f64) {
    let n = n as f64;
    (n.sqrt() * Norm::L1.apply(s), n * Norm::L2.apply(s))
}

/// Closed-form acceptance bound `K √((N₁+N₂)/(N₁N₂)) √(2 ln(J/α))`.
pub fn hoeffding_threshold(n1: usize, n2: usize, j: usize, alpha: f64, kernel_bound: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let (a, b) = (n1 as f64, n2 as f64);
    Ok(kernel_bound * ((a + b) / (a * b)).sqrt() * (2.0 * (j as f64 / alpha).ln()).sqrt())
}

/// Finite-sample test on `(1/J) ‖S‖₁` with a Hoeffding threshold; no
/// asymptotics and no Monte Carlo.
pub fn hoeffding_test(
    x: &SampleSet,
    y: &SampleSet,
    locations: &TestLocations,
    alpha: f64,
    kernel_bound: f64,
) -> Result<TestOutcome> {
    check_alpha(alpha)?;
    if !(kernel_bound >= 2.0 && kernel_bound.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "kernel bound must be at least 2 for the Gaussian kernel, got {kernel_bound}"
        )));
    }
    check_same_dim(x, y)?;
    let s = mean_embedding_at(x, locations)? - mean_embedding_at(y, locations)?;
    let j = locations.len();
    let statistic = Norm::L1.apply(s.view()) / j as f64;
    let threshold = hoeffding_threshold(x.n(), y.n(), j, alpha, kernel_bound)?;
    TestOutcome::new("Hoeffding-L1", statistic, threshold, alpha, Some(locations.clone()))
}

// ---------------------------------------------------------------------------
// MMD baselines
// ---------------------------------------------------------------------------

const BLOCK: usize = 256;

/// Sum of `k(a_i, b_j)` over all pairs, optionally skipping `i == j`
/// (only meaningful when `a` and `b` are the same sample).
pub(crate) fn kernel_sum(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bw: Bandwidth, skip_diagonal: bool) -> f64 {
    let scale = -1.0 / (2.0 * bw.sigma().powi(2));
    let bn = b.map_axis(Axis(1), |r| r.dot(&r));
    let mut total = 0.0;
    let mut start = 0;
    while start < a.nrows() {
        let end = (start + BLOCK).min(a.nrows());
        let chunk = a.slice(ndarray::s![start..end, ..]);
        let an = chunk.map_axis(Axis(1), |r| r.dot(&r));
        let g = chunk.dot(&b.t());
        for (ii, row) in g.rows().into_iter().enumerate() {
            let i = start + ii;
            let mut acc = 0.0;
            for (j, &dot) in row.iter().enumerate() {
                if skip_diagonal && i == j {
                    continue;
                }
                acc += ((an[ii] + bn[j] - 2.0 * dot).max(0.0) * scale).exp();
            }
            total += acc;
        }
        start = end;
    }
    total
}

/// Unbiased U-statistic estimate of MMD².
pub fn mmd2_unbiased(x: &SampleSet, y: &SampleSet, bw: Bandwidth) -> Result<f64> {
    check_same_dim(x, y)?;
    for s in [x, y] {
        if s.n() < 2 {
            return Err(Error::TooFewSamples { needed: 2, found: s.n() });
        }
    }
    let (n1, n2) = (x.n() as f64, y.n() as f64);
    let xx = kernel_sum(x.data(), x.data(), bw, true) / (n1 * (n1 - 1.0));
    let yy = kernel_sum(y.data(), y.data(), bw, true) / (n2 * (n2 - 1.0));
    let xy = kernel_sum(x.data(), y.data(), bw, false) / (n1 * n2);
    Ok(xx + yy - 2.0 * xy)
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// The `⌊n/2⌋` terms `h((x₁,y₁),(x₂,y₂)) = k(x₁,x₂) + k(y₁,y₂) - k(x₁,y₂) - k(x₂,y₁)`
/// of the linear-time estimator.
pub fn mmd_linear_terms(x: &SampleSet, y: &SampleSet, bw: Bandwidth) -> Result<Array1<f64>> {
    check_same_dim(x, y)?;
    if x.n() != y.n() {
        return Err(Error::UnsupportedPairing { n1: x.n(), n2: y.n() });
    }
    if x.n() < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: x.n() });
    }
    let scale = -1.0 / (2.0 * bw.sigma().powi(2));
    let k = |a, b| (sq_dist(a, b) * scale).exp();
    let m = x.n() / 2;
    Ok(Array1::from_iter((0..m).map(|i| {
        let (x1, x2) = (x.row(2 * i), x.row(2 * i + 1));
        let (y1, y2) = (y.row(2 * i), y.row(2 * i + 1));
        k(x1, x2) + k(y1, y2) - k(x1, y2) - k(x2, y1)
    })))
}

/// Linear-time unbiased estimate of MMD² from disjoint pairs.
pub fn mmd2_linear(x: &SampleSet, y: &SampleSet, bw: Bandwidth) -> Result<f64> {
    let h = mmd_linear_terms(x, y, bw)?;
    Ok(h.mean().expect("at least one term"))
}

/// MMD² and an estimate of the variance of the unbiased estimator under the
/// alternative, computed on equal-size samples.
pub fn mmd2_with_h1_variance(x: &SampleSet, y: &SampleSet, bw: Bandwidth) -> Result<(f64, f64)> {
    check_same_dim(x, y)?;
    if x.n() != y.n() {
        return Err(Error::UnsupportedPairing { n1: x.n(), n2: y.n() });
    }
    let n = x.n();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: n });
    }
    let g = |a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>| gram(a, b, bw);
    let kxx = g(x.data(), x.data());
    let kyy = g(y.data(), y.data());
    let kxy = g(x.data(), y.data());
    // H_ij = k(x_i,x_j) + k(y_i,y_j) - k(x_i,y_j) - k(x_j,y_i), i ≠ j
    let nf = n as f64;
    let mut row_sums = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            if i != j {
                acc += kxx[[i, j]] + kyy[[i, j]] - kxy[[i, j]] - kxy[[j, i]];
            }
        }
        row_sums[i] = acc;
        total += acc;
    }
    let mmd2 = total / (nf * (nf - 1.0));
    let var = 4.0 / nf.powi(3) * row_sums.iter().map(|r| r * r).sum::<f64>() - 4.0 / nf.powi(4) * total * total;
    Ok((mmd2, var))
}

/// Full Gram matrix `k(a_i, b_j)`.
pub(crate) fn gram(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bw: Bandwidth) -> Array2<f64> {
    let scale = -1.0 / (2.0 * bw.sigma().powi(2));
    let an = a.map_axis(Axis(1), |r| r.dot(&r));
    let bn = b.map_axis(Axis(1), |r| r.dot(&r));
    let mut g = a.dot(&b.t());
    for ((i, j), v) in g.indexed_iter_mut() {
        *v = ((an[i] + bn[j] - 2.0 * *v).max(0.0) * scale).exp();
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gaussian_kernel, me_feature};
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sample(rows: Array2<f64>) -> SampleSet {
        SampleSet::new(rows, "s").unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> SampleSet {
        sample(Array2::from_shape_fn((n, d), |(_, k)| {
            rng.sample::<f64, _>(StandardNormal) + if k == 0 { shift } else { 0.0 }
        }))
    }

    fn locs(points: Array2<f64>, sigma: f64) -> TestLocations {
        TestLocations::new(points, Bandwidth::new(sigma).unwrap()).unwrap()
    }

    fn var_unbiased(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    }

    #[test]
    fn mean_embedding_examples() {
        let l = locs(array![[1.0, 2.0]], 1.0);
        assert_eq!(mean_embedding_at(&sample(array![[1.0, 2.0]]), &l).unwrap()[0], 1.0);

        let l = locs(array![[0.0]], 0.5);
        let m = mean_embedding_at(&sample(array![[0.5], [-0.5]]), &l).unwrap();
        assert_relative_eq!(m[0], (-0.5f64).exp(), epsilon = 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 20, 3, 0.0);
        let l = locs(Array2::from_shape_fn((4, 3), |_| rng.sample(StandardNormal)), 1.2);
        let m = mean_embedding_at(&x, &l).unwrap();
        let mut oracle = vec![0.0; 4];
        for r in x.data().rows() {
            let f = me_feature(&r.to_vec(), &l).unwrap();
            for j in 0..4 {
                oracle[j] += f.0[j] / 20.0;
            }
        }
        for j in 0..4 {
            assert_relative_eq!(m[j], oracle[j], epsilon = 1e-13);
        }
    }

    #[test]
    fn identical_samples_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, 30, 2, 0.0);
        let l = locs(array![[0.0, 0.0], [1.0, -1.0]], 1.0);
        assert_eq!(l1_me_statistic(&x, &x, &l, DEFAULT_GAMMA).unwrap().value, 0.0);
        assert_eq!(l1_scf_statistic(&x, &x, &l, DEFAULT_GAMMA).unwrap().value, 0.0);
        assert_eq!(me_statistic_l2(&x, &x, &l, DEFAULT_GAMMA).unwrap().value, 0.0);
        assert_eq!(scf_statistic_l2(&x, &x, &l, DEFAULT_GAMMA).unwrap().value, 0.0);
        assert_eq!(unnormalized_statistics(&x, &x, &l, FeatureFamily::Me).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn l1_me_scalar_pipeline() {
        // J = 1, d = 1, four points per side
        let xs = [0.0, 0.3, -0.5, 1.0];
        let ys = [0.8, 1.5, 0.2, 2.0];
        let x = sample(Array2::from_shape_vec((4, 1), xs.to_vec()).unwrap());
        let y = sample(Array2::from_shape_vec((4, 1), ys.to_vec()).unwrap());
        let l = locs(array![[0.5]], 0.9);
        let bw = l.bandwidth();
        let kx: Vec<f64> = xs.iter().map(|v| gaussian_kernel(&[*v], &[0.5], bw).unwrap()).collect();
        let ky: Vec<f64> = ys.iter().map(|v| gaussian_kernel(&[*v], &[0.5], bw).unwrap()).collect();
        let s = kx.iter().sum::<f64>() / 4.0 - ky.iter().sum::<f64>() / 4.0;
        let gamma = 1e-5;
        // t/n1 = t/n2 = 2
        let pooled = 2.0 * var_unbiased(&kx) + 2.0 * var_unbiased(&ky);
        let want = 8f64.sqrt() * s.abs() / (pooled + gamma).sqrt();
        let got = l1_me_statistic(&x, &y, &l, gamma).unwrap();
        assert_relative_eq!(got.value, want, max_relative = 1e-12);
        assert_relative_eq!(got.recompute(), got.value, max_relative = 1e-14);
    }

    #[test]
    fn l1_scf_two_feature_pipeline() {
        let xs = [0.0, 0.4, -0.7];
        let ys = [0.9, 1.2, 0.1];
        let x = sample(Array2::from_shape_vec((3, 1), xs.to_vec()).unwrap());
        let y = sample(Array2::from_shape_vec((3, 1), ys.to_vec()).unwrap());
        let (t, sigma) = (1.3, 0.8);
        let l = locs(array![[t]], sigma);
        let feat = |v: f64| {
            let u = v / sigma;
            let f = (-0.5 * u * u).exp();
            [(t * u).cos() * f, (t * u).sin() * f]
        };
        let fx: Vec<[f64; 2]> = xs.iter().map(|v| feat(*v)).collect();
        let fy: Vec<[f64; 2]> = ys.iter().map(|v| feat(*v)).collect();
        let mean = |f: &[[f64; 2]], k: usize| f.iter().map(|r| r[k]).sum::<f64>() / f.len() as f64;
        let cov2 = |f: &[[f64; 2]]| {
            let (m0, m1) = (mean(f, 0), mean(f, 1));
            let mut c = [[0.0; 2]; 2];
            for r in f {
                let d = [r[0] - m0, r[1] - m1];
                for a in 0..2 {
                    for b in 0..2 {
                        c[a][b] += d[a] * d[b] / (f.len() - 1) as f64;
                    }
                }
            }
            c
        };
        let (cx, cy) = (cov2(&fx), cov2(&fy));
        let gamma = 1e-3;
        // pooled 2×2 matrix, with t/n = 2 on both sides
        let m = [
            [2.0 * (cx[0][0] + cy[0][0]) + gamma, 2.0 * (cx[0][1] + cy[0][1])],
            [2.0 * (cx[1][0] + cy[1][0]), 2.0 * (cx[1][1] + cy[1][1]) + gamma],
        ];
        // inverse square root of a 2×2 SPD matrix: (M + √det I) / (√det · √(tr + 2√det))
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let sd = det.sqrt();
        let denom = sd * (m[0][0] + m[1][1] + 2.0 * sd).sqrt();
        let r = [
            [(m[1][1] + sd) / denom, -m[0][1] / denom],
            [-m[1][0] / denom, (m[0][0] + sd) / denom],
        ];
        let s = [mean(&fx, 0) - mean(&fy, 0), mean(&fx, 1) - mean(&fy, 1)];
        let v0 = 6f64.sqrt() * (r[0][0] * s[0] + r[0][1] * s[1]);
        let v1 = 6f64.sqrt() * (r[1][0] * s[0] + r[1][1] * s[1]);
        let got = l1_scf_statistic(&x, &y, &l, gamma).unwrap();
        assert_relative_eq!(got.value, v0.abs() + v1.abs(), max_relative = 1e-9);
    }

    #[test]
    fn me_l2_scalar_oracle() {
        let xs = [0.0, 0.3, -0.5, 1.0, 0.1];
        let ys = [0.8, 1.5, 0.2, 2.0, -0.3];
        let x = sample(Array2::from_shape_vec((5, 1), xs.to_vec()).unwrap());
        let y = sample(Array2::from_shape_vec((5, 1), ys.to_vec()).unwrap());
        let l = locs(array![[0.5]], 0.9);
        let z: Vec<f64> = xs
            .iter()
            .zip(&ys)
            .map(|(a, b)| {
                gaussian_kernel(&[*a], &[0.5], l.bandwidth()).unwrap()
                    - gaussian_kernel(&[*b], &[0.5], l.bandwidth()).unwrap()
            })
            .collect();
        let s = z.iter().sum::<f64>() / 5.0;
        let gamma = 1e-5;
        let want = 5.0 * s * s / (var_unbiased(&z) + gamma);
        let got = me_statistic_l2(&x, &y, &l, gamma).unwrap();
        assert_relative_eq!(got.value, want, max_relative = 1e-12);
    }

    #[test]
    fn scf_l2_scalar_oracle() {
        // J = 1 with T = 0: sin features vanish identically, so the 2×2
        // covariance is diag(var, 0) + γI and only the cosine term survives.
        let xs = [0.0, 0.3, -0.5, 1.0];
        let ys = [0.8, 1.5, 0.2, 2.0];
        let x = sample(Array2::from_shape_vec((4, 1), xs.to_vec()).unwrap());
        let y = sample(Array2::from_shape_vec((4, 1), ys.to_vec()).unwrap());
        let sigma = 1.1;
        let l = locs(array![[0.0]], sigma);
        let f = |v: f64| (-0.5 * (v / sigma).powi(2)).exp();
        let z: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| f(*a) - f(*b)).collect();
        let s = z.iter().sum::<f64>() / 4.0;
        let gamma = 1e-4;
        let want = 4.0 * s * s / (var_unbiased(&z) + gamma);
        let got = scf_statistic_l2(&x, &y, &l, gamma).unwrap();
        assert_relative_eq!(got.value, want, max_relative = 1e-10);
    }

    #[test]
    fn paired_statistics_need_equal_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, 10, 2, 0.0);
        let y = randn(&mut rng, 12, 2, 0.0);
        let l = locs(array![[0.0, 0.0]], 1.0);
        assert!(matches!(me_statistic_l2(&x, &y, &l, 1e-5), Err(Error::UnsupportedPairing { .. })));
        assert!(matches!(
            unnormalized_statistics(&x, &y, &l, FeatureFamily::Me),
            Err(Error::UnsupportedPairing { .. })
        ));
        assert!(matches!(mmd2_linear(&x, &y, l.bandwidth()), Err(Error::UnsupportedPairing { .. })));
        // pooled statistics accept unequal sizes
        assert!(l1_me_statistic(&x, &y, &l, 1e-5).is_ok());
    }

    #[test]
    fn unnormalized_definition() {
        // J = 2 with difference vector (a, b)
        let x = sample(array![[0.0], [0.0], [0.0]]);
        let y = sample(array![[1.0], [1.0], [1.0]]);
        let l = locs(array![[0.0], [2.0]], 1.0);
        let bw = l.bandwidth();
        let a = 1.0 - gaussian_kernel(&[1.0], &[0.0], bw).unwrap();
        let b = gaussian_kernel(&[0.0], &[2.0], bw).unwrap() - gaussian_kernel(&[1.0], &[2.0], bw).unwrap();
        let (l1, l2) = unnormalized_statistics(&x, &y, &l, FeatureFamily::Me).unwrap();
        assert_relative_eq!(l1, 3f64.sqrt() * (a.abs() + b.abs()), max_relative = 1e-12);
        assert_relative_eq!(l2, 3.0 * (a * a + b * b), max_relative = 1e-12);
    }

    #[test]
    fn hoeffding_examples() {
        let thr = hoeffding_threshold(100, 100, 3, 0.01, 2.0).unwrap();
        let want = 2.0 * (200.0f64 / 10000.0).sqrt() * (2.0 * 300f64.ln()).sqrt();
        assert_relative_eq!(thr, want, max_relative = 1e-14);
        assert!((thr - 0.9554).abs() < 1e-3);

        let mut prev = f64::INFINITY;
        for n1 in [10, 50, 100, 500, 5000] {
            let t = hoeffding_threshold(n1, 100, 3, 0.01, 2.0).unwrap();
            assert!(t < prev);
            prev = t;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, 40, 2, 0.0);
        let l = locs(array![[0.0, 0.0], [1.0, 1.0], [-1.0, 0.5]], 1.0);
        let out = hoeffding_test(&x, &x, &l, 0.01, 2.0).unwrap();
        assert_eq!(out.statistic, 0.0);
        assert!(!out.reject);
        assert!(matches!(hoeffding_test(&x, &x, &l, 1.5, 2.0), Err(Error::InvalidAlpha(_))));
        assert!(hoeffding_test(&x, &x, &l, 0.05, 1.0).is_err());
    }

    fn naive_mmd2(x: &SampleSet, y: &SampleSet, bw: Bandwidth) -> f64 {
        let k = |a: ArrayView1<f64>, b: ArrayView1<f64>| gaussian_kernel(&a.to_vec(), &b.to_vec(), bw).unwrap();
        let (n1, n2) = (x.n(), y.n());
        let mut xx = 0.0;
        for i in 0..n1 {
            for j in 0..n1 {
                if i != j {
                    xx += k(x.row(i), x.row(j));
                }
            }
        }
        let mut yy = 0.0;
        for i in 0..n2 {
            for j in 0..n2 {
                if i != j {
                    yy += k(y.row(i), y.row(j));
                }
            }
        }
        let mut xy = 0.0;
        for i in 0..n1 {
            for j in 0..n2 {
                xy += k(x.row(i), y.row(j));
            }
        }
        let (a, b) = (n1 as f64, n2 as f64);
        xx / (a * (a - 1.0)) + yy / (b * (b - 1.0)) - 2.0 * xy / (a * b)
    }

    #[test]
    fn mmd2_unbiased_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (n1, n2) in [(2, 2), (5, 9), (30, 30), (17, 30)] {
            let x = randn(&mut rng, n1, 3, 0.0);
            let y = randn(&mut rng, n2, 3, 0.7);
            let bw = Bandwidth::new(1.3).unwrap();
            let got = mmd2_unbiased(&x, &y, bw).unwrap();
            assert!((got - naive_mmd2(&x, &y, bw)).abs() < 1e-12);
        }
    }

    #[test]
    fn mmd2_two_point_hand_value() {
        let x = sample(array![[0.0], [1.0]]);
        let y = sample(array![[2.0], [4.0]]);
        let bw = Bandwidth::new(1.0).unwrap();
        let k = |d: f64| (-d * d / 2.0).exp();
        let want = k(1.0) + k(2.0) - 0.5 * (k(2.0) + k(4.0) + k(1.0) + k(3.0));
        assert_relative_eq!(mmd2_unbiased(&x, &y, bw).unwrap(), want, epsilon = 1e-15);
    }

    #[test]
    fn mmd2_duplicated_sample_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, 40, 2, 0.0);
        let bw = Bandwidth::new(1.0).unwrap();
        let v = mmd2_unbiased(&x, &x, bw).unwrap();
        // identical samples: xx = yy = (S - n)/(n(n-1)), xy = S/n², so v = 2(S - n²)/(n²(n-1)) ≤ 0
        assert!(v <= 0.0);
        assert!(v.abs() < 2.0 / 40.0);
        assert!((v - naive_mmd2(&x, &x, bw)).abs() < 1e-12);
        assert!(mmd2_unbiased(&x.select(&[0], "one"), &x, bw).is_err());
    }

    #[test]
    fn mmd2_linear_hand_oracle() {
        let x = sample(array![[0.0], [1.0], [0.5], [2.0]]);
        let y = sample(array![[1.0], [3.0], [0.0], [0.5]]);
        let bw = Bandwidth::new(1.0).unwrap();
        let k = |a: f64, b: f64| (-(a - b) * (a - b) / 2.0).exp();
        let h1 = k(0.0, 1.0) + k(1.0, 3.0) - k(0.0, 3.0) - k(1.0, 1.0);
        let h2 = k(0.5, 2.0) + k(0.0, 0.5) - k(0.5, 0.5) - k(2.0, 0.0);
        assert_relative_eq!(mmd2_linear(&x, &y, bw).unwrap(), 0.5 * (h1 + h2), epsilon = 1e-15);
        assert_eq!(mmd2_linear(&x, &x, bw).unwrap(), 0.0);
    }

    #[test]
    fn mmd2_linear_consistent_with_quadratic() {
        // mean of the linear estimator over resamples vs the U-statistic mean
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bw = Bandwidth::new(1.0).unwrap();
        let reps = 1000;
        let mut lin = Vec::with_capacity(reps);
        let mut quad = Vec::with_capacity(reps);
        for _ in 0..reps {
            let x = randn(&mut rng, 40, 1, 0.0);
            let y = randn(&mut rng, 40, 1, 0.8);
            lin.push(mmd2_linear(&x, &y, bw).unwrap());
            quad.push(mmd2_unbiased(&x, &y, bw).unwrap());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let se = (var_unbiased(&lin) / reps as f64 + var_unbiased(&quad) / reps as f64).sqrt();
        assert!((mean(&lin) - mean(&quad)).abs() < 3.0 * se, "{} vs {}", mean(&lin), mean(&quad));
    }

    #[test]
    fn mmd_h1_variance_matches_unbiased_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, 25, 2, 0.0);
        let y = randn(&mut rng, 25, 2, 1.0);
        let bw = Bandwidth::new(1.0).unwrap();
        let (m, var) = mmd2_with_h1_variance(&x, &y, bw).unwrap();
        // with N₁ = N₂ the paired H-statistic differs from the U-statistic
        // only through the excluded cross terms k(x_i, y_i)
        let u = mmd2_unbiased(&x, &y, bw).unwrap();
        let diag: f64 = (0..25)
            .map(|i| gaussian_kernel(&x.row(i).to_vec(), &y.row(i).to_vec(), bw).unwrap())
            .sum();
        let xy_all = kernel_sum(x.data(), y.data(), bw, false);
        let adj = u + 2.0 * xy_all / 625.0 - 2.0 * (xy_all - diag) / 600.0;
        assert_relative_eq!(m, adj, max_relative = 1e-12);
        assert!(var > 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::seq::SliceRandom;
        use rand::Rng;

        fn setup(seed: u64, n1: usize, n2: usize, shift: f64) -> (SampleSet, SampleSet, TestLocations) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn(&mut rng, n1, 2, 0.0);
            let y = randn(&mut rng, n2, 2, shift);
            let l = TestLocations::new(
                Array2::from_shape_fn((3, 2), |_| rng.sample(StandardNormal)),
                Bandwidth::new(rng.random_range(0.5..2.0)).unwrap(),
            )
            .unwrap();
            (x, y, l)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn l1_dominates_l2_on_shared_intermediates(seed in any::<u64>(), n1 in 5usize..40, n2 in 5usize..40, shift in 0.0f64..1.5) {
                let (x, y, l) = setup(seed, n1, n2, shift);
                for family in [FeatureFamily::Me, FeatureFamily::Scf] {
                    let a = pooled_statistic(&x, &y, &l, family, Norm::L1, 1e-5).unwrap();
                    let b = pooled_statistic(&x, &y, &l, family, Norm::L2, 1e-5).unwrap();
                    let v = b.normalized_vector.as_ref().unwrap();
                    prop_assert!((a.value - v.iter().map(|e| e.abs()).sum::<f64>()).abs() <= 1e-12 * a.value.max(1.0));
                    prop_assert!(a.value + 1e-12 >= b.value.sqrt());
                }
            }

            #[test]
            fn normalized_invariant_to_feature_scale(seed in any::<u64>(), c in 0.01f64..100.0) {
                let (x, y, l) = setup(seed, 20, 25, 0.5);
                for family in [FeatureFamily::Me, FeatureFamily::Scf] {
                    let fx = family.features(x.data(), &l).unwrap();
                    let fy = family.features(y.data(), &l).unwrap();
                    let a = pooled_statistic_from_features(fx.view(), fy.view(), family, Norm::L1, 0.0);
                    let b = pooled_statistic_from_features((&fx * c).view(), (&fy * c).view(), family, Norm::L1, 0.0);
                    if let (Ok(a), Ok(b)) = (a, b) {
                        prop_assert!((a.value - b.value).abs() <= 1e-6 * a.value.max(1.0));
                    }
                }
            }

            #[test]
            fn statistics_invariant_to_row_permutation(seed in any::<u64>()) {
                let (x, y, l) = setup(seed, 15, 15, 0.4);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
                let mut idx: Vec<usize> = (0..15).collect();
                idx.shuffle(&mut rng);
                let (xp, yp) = (x.select(&idx, "x"), y.select(&idx, "y"));
                let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
                prop_assert!(close(l1_scf_statistic(&x, &y, &l, 1e-5).unwrap().value, l1_scf_statistic(&xp, &yp, &l, 1e-5).unwrap().value));
                prop_assert!(close(me_statistic_l2(&x, &y, &l, 1e-5).unwrap().value, me_statistic_l2(&xp, &yp, &l, 1e-5).unwrap().value));
                prop_assert!(close(scf_statistic_l2(&x, &y, &l, 1e-5).unwrap().value, scf_statistic_l2(&xp, &yp, &l, 1e-5).unwrap().value));
                let bw = l.bandwidth();
                let mut idy = idx.clone();
                idy.reverse();
                prop_assert!(close(mmd2_unbiased(&x, &y, bw).unwrap(), mmd2_unbiased(&xp, &y.select(&idy, "y"), bw).unwrap()));
            }

            #[test]
            fn unnormalized_norm_domination(seed in any::<u64>()) {
                let (x, y, l) = setup(seed, 12, 12, 0.3);
                for family in [FeatureFamily::Me, FeatureFamily::Scf] {
                    let (l1, l2) = unnormalized_statistics(&x, &y, &l, family).unwrap();
                    prop_assert!(l1 + 1e-12 >= l2.sqrt());
                }
            }

            #[test]
            fn statistics_deterministic(seed in any::<u64>()) {
                let (x, y, l) = setup(seed, 10, 14, 0.2);
                let a = l1_me_statistic(&x, &y, &l, 1e-5).unwrap().value;
                let b = l1_me_statistic(&x, &y, &l, 1e-5).unwrap().value;
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
