//! Gradient ascent on the test-power proxy over test locations and log-bandwidth.
//!
//! The proxy is the statistic itself evaluated on a training split: the L1
//! statistic for the ℓ1 tests, the squared ℓ2 paired statistic for ME/SCF.
//! At iteration `t` the update is `θ ← θ + g / (‖g‖₂ √t)`; steps whose
//! inverse square root fails are rolled back, and the best θ seen is returned.

use nalgebra::{Cholesky, DMatrix};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{pullback, squared_distances, Bandwidth, FeatureFamily, TestLocations};
use crate::matops::{covariance_of_rows, InvSqrtOptions};
use crate::statistics::{
    paired_backward, paired_forward, pooled_backward, pooled_forward, Norm, SampleSet, DEFAULT_GAMMA,
};

/// Pairwise distances for the median heuristic use at most this many points.
pub const MEDIAN_MAX_POINTS: usize = 1000;

/// Exponents `k` of the bandwidth grid `median · 2^k`.
pub const BANDWIDTH_GRID: [i32; 5] = [-2, -1, 0, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitStrategy {
    /// Locations drawn alternately from Gaussians fitted to X and to Y.
    FitGaussians,
    /// Locations drawn from N(0, I_d).
    StandardNormal,
}

impl InitStrategy {
    pub fn for_family(family: FeatureFamily) -> Self {
        match family {
            FeatureFamily::Me => InitStrategy::FitGaussians,
            FeatureFamily::Scf => InitStrategy::StandardNormal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientMethod {
    /// Reverse-mode gradient through features, covariance and inverse square root.
    Analytic,
    /// Central finite differences.
    FiniteDifference,
}

/// Which power proxy to maximize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// `‖√t (Σ_{N₁,N₂} + γI)^{-1/2} S‖₁` (L1-ME, L1-SCF).
    L1Pooled,
    /// `‖√n (Σ_n + γI)^{-1/2} S_n‖₂²` with paired differences (ME, SCF).
    L2Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub gamma: f64,
    /// `None` picks the family default (fitted Gaussians for ME, N(0, I) for SCF).
    pub init_strategy: Option<InitStrategy>,
    pub seed: u64,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Stop at the first failed step instead of retrying with a shorter one.
    pub abort_on_singular: bool,
    pub gradient: GradientMethod,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            gamma: DEFAULT_GAMMA,
            init_strategy: None,
            seed: 0,
            fd_step: 1e-4,
            abort_on_singular: false,
            gradient: GradientMethod::Analytic,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.fd_step > 0.0 && self.fd_step <= 1e-2) {
            return Err(Error::InvalidConfig(format!("fd_step must lie in (0, 1e-2], got {}", self.fd_step)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Optimization variables: J×d locations and `ln σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub locations: Array2<f64>,
    pub log_sigma: f64,
}

impl Theta {
    pub fn new(locations: Array2<f64>, log_sigma: f64) -> Self {
        Self { locations, log_sigma }
    }

    pub fn from_locations(locations: &TestLocations) -> Self {
        Self {
            locations: locations.points().to_owned(),
            log_sigma: locations.bandwidth().sigma().ln(),
        }
    }

    pub fn to_locations(&self) -> Result<TestLocations> {
        TestLocations::new(self.locations.clone(), Bandwidth::from_log(self.log_sigma)?)
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    /// Locations row-major, then `ln σ`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.locations.iter().copied().collect();
        v.push(self.log_sigma);
        v
    }

    pub fn from_flat(flat: &[f64], j: usize, d: usize) -> Self {
        Self {
            locations: Array2::from_shape_vec((j, d), flat[..j * d].to_vec()).expect("flat length"),
            log_sigma: flat[j * d],
        }
    }
}

/// Gradient with respect to [`Theta`].
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGradient {
    pub locations: Array2<f64>,
    pub log_sigma: f64,
}

impl ThetaGradient {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.locations.iter().copied().collect();
        v.push(self.log_sigma);
        v
    }

    pub fn norm(&self) -> f64 {
        (self.locations.iter().map(|v| v * v).sum::<f64>() + self.log_sigma * self.log_sigma).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.log_sigma.is_finite() && self.locations.iter().all(|v| v.is_finite())
    }
}

fn check_training(x: &SampleSet, y: &SampleSet) -> Result<()> {
    for s in [x, y] {
        if s.n() < 2 {
            return Err(Error::TooFewSamples { needed: 2, found: s.n() });
        }
    }
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            found: y.dim(),
        });
    }
    Ok(())
}

/// Value of `objective` at θ on the training samples.
pub fn objective_value(
    objective: Objective,
    theta: &Theta,
    x: &SampleSet,
    y: &SampleSet,
    family: FeatureFamily,
    gamma: f64,
) -> Result<f64> {
    check_training(x, y)?;
    let locations = theta.to_locations()?;
    let fx = family.features(x.data(), &locations)?;
    let fy = family.features(y.data(), &locations)?;
    let opts = InvSqrtOptions::default();
    let state = match objective {
        Objective::L1Pooled => pooled_forward(fx.view(), fy.view(), gamma, Norm::L1, opts)?,
        Objective::L2Paired => paired_forward(fx.view(), fy.view(), gamma, Norm::L2, opts)?,
    };
    Ok(state.value)
}

/// L1 power proxy `λ̂ₜ` on the training split.
pub fn power_proxy(theta: &Theta, x: &SampleSet, y: &SampleSet, family: FeatureFamily, gamma: f64) -> Result<f64> {
    objective_value(Objective::L1Pooled, theta, x, y, family, gamma)
}

/// Objective value and its exact gradient with respect to θ.
///
/// At an ℓ1 kink (a zero entry of the whitened difference vector) the
/// subgradient with zero in that coordinate is used.
pub fn value_and_gradient(
    objective: Objective,
    theta: &Theta,
    x: &SampleSet,
    y: &SampleSet,
    family: FeatureFamily,
    gamma: f64,
) -> Result<(f64, ThetaGradient)> {
    check_training(x, y)?;
    let locations = theta.to_locations()?;
    let fx = family.features(x.data(), &locations)?;
    let fy = family.features(y.data(), &locations)?;
    let opts = InvSqrtOptions::default();
    let (value, gfx, gfy) = match objective {
        Objective::L1Pooled => {
            let state = pooled_forward(fx.view(), fy.view(), gamma, Norm::L1, opts)?;
            let (gx, gy) = pooled_backward(&state, fx.view(), fy.view());
            (state.value, gx, gy)
        }
        Objective::L2Paired => {
            let state = paired_forward(fx.view(), fy.view(), gamma, Norm::L2, opts)?;
            let gz = paired_backward(&state, fx.view(), fy.view());
            let gy = -&gz;
            (state.value, gz, gy)
        }
    };
    let (lx, sx) = pullback(family, x.data(), &locations, gfx.view());
    let (ly, sy) = pullback(family, y.data(), &locations, gfy.view());
    let grad = ThetaGradient {
        locations: lx + ly,
        log_sigma: sx + sy,
    };
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((value, grad))
}

/// Central finite-difference gradient of `f` at `x`; the step for
/// coordinate `i` is `step · max(1, |x_i|)`. Coordinates where either
/// perturbed evaluation fails come back as NaN.
pub fn central_difference<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            match (up, down) {
                (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a - b) / (2.0 * h),
                _ => f64::NAN,
            }
        })
        .collect()
}

/// Finite-difference gradient of an arbitrary objective.
pub fn objective_fd_gradient(
    objective: Objective,
    theta: &Theta,
    x: &SampleSet,
    y: &SampleSet,
    family: FeatureFamily,
    gamma: f64,
    fd_step: f64,
) -> Result<ThetaGradient> {
    let value = objective_value(objective, theta, x, y, family, gamma)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("power proxy"));
    }
    let (j, d) = theta.locations.dim();
    let flat = central_difference(
        |v| objective_value(objective, &Theta::from_flat(v, j, d), x, y, family, gamma),
        &theta.to_flat(),
        fd_step,
    );
    Ok(ThetaGradient {
        locations: Array2::from_shape_vec((j, d), flat[..j * d].to_vec()).expect("flat length"),
        log_sigma: flat[j * d],
    })
}

/// Central finite-difference gradient of [`power_proxy`]. Entries whose
/// perturbed proxy fails are NaN.
pub fn proxy_gradient(
    theta: &Theta,
    x: &SampleSet,
    y: &SampleSet,
    family: FeatureFamily,
    gamma: f64,
    fd_step: f64,
) -> Result<ThetaGradient> {
    objective_fd_gradient(Objective::L1Pooled, theta, x, y, family, gamma, fd_step)
}

/// Median pairwise Euclidean distance of the rows (strided subsample of at
/// most [`MEDIAN_MAX_POINTS`] rows).
pub fn median_heuristic(data: ArrayView2<'_, f64>) -> f64 {
    let n = data.nrows();
    let stride = n.div_ceil(MEDIAN_MAX_POINTS).max(1);
    let sub = data.select(Axis(0), &(0..n).step_by(stride).collect::<Vec<_>>());
    let sq = squared_distances(sub.view(), sub.view());
    let m = sub.nrows();
    let mut dists = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for a in 0..m {
        dists.extend(sq.row(a).iter().skip(a + 1));
    }
    if dists.is_empty() {
        return 0.0;
    }
    // squared distances share the order of distances
    let k = dists.len();
    let (_, upper, _) = dists.select_nth_unstable_by(k / 2, f64::total_cmp);
    let upper = upper.sqrt();
    if k % 2 == 1 {
        upper
    } else {
        let lower = dists[..k / 2].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower.sqrt() + upper)
    }
}

fn pooled_median(x: &SampleSet, y: &SampleSet) -> Result<f64> {
    let pooled = x.concat(y)?;
    let med = median_heuristic(pooled.data());
    if med > 0.0 && med.is_finite() {
        Ok(med)
    } else {
        log::warn!("median pairwise distance is zero; using unit bandwidth");
        Ok(1.0)
    }
}

/// Mean and a sampling factor for a Gaussian fitted to `s`: the Cholesky
/// factor of the covariance when `n > d` and it is positive definite,
/// otherwise the diagonal of standard deviations.
fn fit_gaussian(s: &SampleSet) -> (Array1<f64>, Array2<f64>) {
    let mean = s.data().mean_axis(Axis(0)).expect("nonempty");
    let d = s.dim();
    if s.n() > d {
        if let Ok(cov) = covariance_of_rows(s.data()) {
            let c = cov.as_array();
            let m = DMatrix::from_fn(d, d, |i, j| c[[i, j]]);
            if let Some(ch) = Cholesky::new(m) {
                let l = ch.l();
                return (mean, Array2::from_shape_fn((d, d), |(i, j)| l[(i, j)]));
            }
        }
    }
    let mut factor = Array2::zeros((d, d));
    if s.n() >= 2 {
        let centered = &s.data() - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / (s.n() - 1) as f64;
        factor.diag_mut().assign(&var.mapv(f64::sqrt));
    }
    (mean, factor)
}

/// Initial θ: locations per `strategy`, `ln σ` at the log median heuristic.
pub fn init_theta_with(
    x: &SampleSet,
    y: &SampleSet,
    j: usize,
    strategy: InitStrategy,
    seed: u64,
) -> Result<Theta> {
    if j == 0 {
        return Err(Error::InvalidConfig("J must be at least 1".into()));
    }
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            found: y.dim(),
        });
    }
    let d = x.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locations = match strategy {
        InitStrategy::StandardNormal => Array2::from_shape_simple_fn((j, d), || rng.sample(StandardNormal)),
        InitStrategy::FitGaussians => {
            let fits = [fit_gaussian(x), fit_gaussian(y)];
            let mut locs = Array2::zeros((j, d));
            for (k, mut row) in locs.rows_mut().into_iter().enumerate() {
                let (mean, factor) = &fits[k % 2];
                let z = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
                row.assign(&(mean + &factor.dot(&z)));
            }
            if locs.iter().any(|v| !v.is_finite()) {
                log::warn!("fitted Gaussian initialization degenerate; using N(0, I)");
                locs = Array2::from_shape_simple_fn((j, d), || rng.sample(StandardNormal));
            }
            locs
        }
    };
    Ok(Theta::new(locations, pooled_median(x, y)?.ln()))
}

/// Initial θ with the family's default location strategy.
pub fn init_theta(x: &SampleSet, y: &SampleSet, j: usize, family: FeatureFamily, seed: u64) -> Result<Theta> {
    init_theta_with(x, y, j, InitStrategy::for_family(family), seed)
}

/// Keeps `theta`'s locations and picks `σ = median · 2^k` maximizing the
/// objective on the training samples.
pub fn grid_search_bandwidth(
    objective: Objective,
    theta: &Theta,
    x: &SampleSet,
    y: &SampleSet,
    family: FeatureFamily,
    gamma: f64,
) -> Result<(Theta, f64)> {
    let median = pooled_median(x, y)?;
    let mut best: Option<(Theta, f64)> = None;
    for k in BANDWIDTH_GRID {
        let cand = Theta::new(theta.locations.clone(), (median * 2f64.powi(k)).ln());
        if let Ok(v) = objective_value(objective, &cand, x, y, family, gamma) {
            if v.is_finite() && best.as_ref().is_none_or(|(_, b)| v > *b) {
                best = Some((cand, v));
            }
        }
    }
    best.ok_or(Error::NonFinite("power proxy on every bandwidth"))
}

/// Outcome of [`optimize_theta`].
#[derive(Debug, Clone)]
pub struct OptimizationResult {
    /// Best θ seen.
    pub theta: Theta,
    pub best_value: f64,
    pub initial_value: f64,
    /// Objective at every accepted iterate, starting with the initialization.
    pub trace: Vec<f64>,
    /// Steps rejected because the objective could not be evaluated.
    pub rollbacks: usize,
    pub warnings: Vec<String>,
}

/// Maximizes the L1 power proxy over locations and bandwidth.
pub fn optimize_theta(
    x: &SampleSet,
    y: &SampleSet,
    j: usize,
    family: FeatureFamily,
    config: &OptimizerConfig,
) -> Result<OptimizationResult> {
    optimize_objective(Objective::L1Pooled, x, y, j, family, config)
}

/// Gradient ascent on `objective` from the configured initialization.
pub fn optimize_objective(
    objective: Objective,
    x: &SampleSet,
    y: &SampleSet,
    j: usize,
    family: FeatureFamily,
    config: &OptimizerConfig,
) -> Result<OptimizationResult> {
    config.validate()?;
    check_training(x, y)?;
    let strategy = config.init_strategy.unwrap_or(InitStrategy::for_family(family));
    let theta = init_theta_with(x, y, j, strategy, config.seed)?;
    ascend(objective, theta, x, y, family, config)
}

/// Gradient ascent from a given starting point.
pub fn ascend(
    objective: Objective,
    start: Theta,
    x: &SampleSet,
    y: &SampleSet,
    family: FeatureFamily,
    config: &OptimizerConfig,
) -> Result<OptimizationResult> {
    config.validate()?;
    let eval = |theta: &Theta| -> Result<(f64, ThetaGradient)> {
        match config.gradient {
            GradientMethod::Analytic => value_and_gradient(objective, theta, x, y, family, config.gamma),
            GradientMethod::FiniteDifference => {
                let v = objective_value(objective, theta, x, y, family, config.gamma)?;
                let g = objective_fd_gradient(objective, theta, x, y, family, config.gamma, config.fd_step)?;
                Ok((v, g))
            }
        }
    };

    let mut warnings = Vec::new();
    let mut theta = start;
    let (mut value, mut grad) = match eval(&theta) {
        Ok(vg) => vg,
        Err(e) => {
            let msg = format!("initial point failed ({e}); restarting from N(0, I) locations");
            log::warn!("{msg}");
            warnings.push(msg);
            theta = init_theta_with(x, y, theta.locations.nrows(), InitStrategy::StandardNormal, config.seed ^ 1)?;
            eval(&theta)?
        }
    };
    let initial_value = value;
    let mut best = (theta.clone(), value);
    let mut trace = vec![value];
    let mut rollbacks = 0;

    for t in 1..=config.max_iters {
        let gnorm = grad.norm();
        if !(gnorm > 0.0 && gnorm.is_finite()) {
            break;
        }
        let step = 1.0 / (gnorm * (t as f64).sqrt());
        let candidate = Theta::new(
            &theta.locations + &(&grad.locations * step),
            theta.log_sigma + grad.log_sigma * step,
        );
        match eval(&candidate) {
            Ok((v, g)) if v.is_finite() && g.is_finite() => {
                theta = candidate;
                value = v;
                grad = g;
                trace.push(value);
                if value > best.1 {
                    best = (theta.clone(), value);
                }
            }
            other => {
                rollbacks += 1;
                if let Err(e) = other {
                    log::debug!("step {t} rolled back: {e}");
                }
                if config.abort_on_singular {
                    warnings.push(format!("halted at step {t} after a failed inverse square root"));
                    break;
                }
            }
        }
    }

    Ok(OptimizationResult {
        theta: best.0,
        best_value: best.1,
        initial_value,
        trace,
        rollbacks,
        warnings,
    })
}

/// Objective evaluated while one location sweeps a 2-d grid over its first
/// two coordinates; the other locations and σ stay fixed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeGrid {
    pub location_index: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `values[iy][ix]`; NaN where the objective failed.
    pub values: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    /// Grid point with the largest finite value.
    pub fn argmax(&self) -> Option<(f64, f64, f64)> {
        let mut best: Option<(f64, f64, f64)> = None;
        for (iy, row) in self.values.iter().enumerate() {
            for (ix, &v) in row.iter().enumerate() {
                if v.is_finite() && best.is_none_or(|b| v > b.2) {
                    best = Some((self.xs[ix], self.ys[iy], v));
                }
            }
        }
        best
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Sweeps location `index` over `[x_range] × [y_range]` at `resolution²` points.
#[allow(clippy::too_many_arguments)]
pub fn objective_landscape(
    objective: Objective,
    theta: &Theta,
    index: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: usize,
    x: &SampleSet,
    y: &SampleSet,
    family: FeatureFamily,
    gamma: f64,
) -> Result<LandscapeGrid> {
    let (j, d) = theta.locations.dim();
    if index >= j {
        return Err(Error::InvalidConfig(format!("location index {index} out of range for J = {j}")));
    }
    if d < 2 {
        return Err(Error::InvalidConfig("landscape needs at least two dimensions".into()));
    }
    if resolution == 0 {
        return Err(Error::InvalidConfig("resolution must be positive".into()));
    }
    let xs = linspace(x_range.0, x_range.1, resolution);
    let ys = linspace(y_range.0, y_range.1, resolution);
    let mut probe = theta.clone();
    let values = ys
        .iter()
        .map(|&b| {
            xs.iter()
                .map(|&a| {
                    probe.locations[[index, 0]] = a;
                    probe.locations[[index, 1]] = b;
                    objective_value(objective, &probe, x, y, family, gamma).unwrap_or(f64::NAN)
                })
                .collect()
        })
        .collect();
    Ok(LandscapeGrid {
        location_index: index,
        xs,
        ys,
        values,
    })
}
