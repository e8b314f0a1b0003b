//! Null-distribution thresholds.
//!
//! * Monte-Carlo quantiles of `Σ_j |Z_j|` (a sum of J i.i.d. Nakagami(½, 1)
//!   variables), certified by the Dvoretzky–Kiefer–Wolfowitz bound.
//! * Chi-squared quantiles by inverting the regularized incomplete gamma
//!   function.
//! * Permutation nulls, generic and with fast paths for MMD and the
//!   unnormalized location statistics.

use std::collections::HashMap;
use std::sync::{OnceLock, RwLock};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::gamma_ur;

use crate::error::{check_alpha, Error, Result};
use crate::kernels::Bandwidth;
use crate::statistics::{gram, unnormalized_from_difference, SampleSet};

/// Default Monte-Carlo sample count for Nakagami-sum quantiles.
pub const DEFAULT_N_MC: usize = 100_000;
/// Smallest Monte-Carlo sample count accepted.
pub const MIN_N_MC: usize = 1000;
/// Confidence level of the DKW certificate is `1 - DKW_DELTA`.
pub const DKW_DELTA: f64 = 0.01;
/// Seed of the Monte-Carlo null draws unless configured otherwise.
pub const DEFAULT_MC_SEED: u64 = 1;
/// Permutations used for permutation nulls unless configured otherwise.
pub const DEFAULT_N_PERM: usize = 200;

/// Sorted Monte-Carlo draws supporting CDF and quantile queries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    draws: Vec<f64>,
    seed: u64,
}

impl EmpiricalCdf {
    pub fn new(mut draws: Vec<f64>, seed: u64) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::EmptyInput("Monte-Carlo draws"));
        }
        if draws.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Monte-Carlo draws"));
        }
        draws.sort_by(f64::total_cmp);
        Ok(Self { draws, seed })
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draws(&self) -> &[f64] {
        &self.draws
    }

    /// Fraction of draws `<= x`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.draws.partition_point(|&d| d <= x) as f64 / self.draws.len() as f64
    }

    /// Quantile by linear interpolation between order statistics.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidConfig(format!("quantile level must lie in (0, 1), got {q}")));
        }
        let h = q * (self.draws.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(self.draws.len() - 1);
        let frac = h - lo as f64;
        Ok(self.draws[lo] + frac * (self.draws[hi] - self.draws[lo]))
    }

    /// DKW half-width at confidence `1 - DKW_DELTA`.
    pub fn dkw_epsilon(&self) -> f64 {
        dkw_epsilon(self.draws.len(), DKW_DELTA)
    }
}

/// `ε = √(ln(2/δ) / (2n))`: with probability `1 - δ` the empirical CDF is
/// uniformly within ε of the true one.
pub fn dkw_epsilon(n: usize, delta: f64) -> f64 {
    ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// Threshold of the ℓ1 location tests under the null.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NakaQuantile {
    pub threshold: f64,
    pub dkw_eps: f64,
    pub n_mc: usize,
    /// Set when `n_mc · α < 10`: too few draws land in the rejection tail.
    pub underresolved: bool,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Per-draw `(‖Z‖₁, ‖Z‖₂)` for `n_mc` standard normal vectors in R^J.
pub fn norm_draws(j: usize, n_mc: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = normal_matrix(&mut rng, n_mc, j);
    let l1 = z.map_axis(Axis(1), |r| r.iter().map(|v| v.abs()).sum::<f64>());
    let l2 = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    (l1.to_vec(), l2.to_vec())
}

/// Empirical CDF of the sum of J i.i.d. Nakagami(½, 1) variables.
pub fn naka_sum_cdf(j: usize, n_mc: usize, seed: u64) -> Result<EmpiricalCdf> {
    if j == 0 {
        return Err(Error::InvalidConfig("J must be at least 1".into()));
    }
    if n_mc < MIN_N_MC {
        return Err(Error::InvalidConfig(format!(
            "at least {MIN_N_MC} Monte-Carlo draws are required, got {n_mc}"
        )));
    }
    EmpiricalCdf::new(norm_draws(j, n_mc, seed).0, seed)
}

/// `(1 - α)`-quantile of `Σ_{j=1}^J |Z_j|` from `n_mc` draws, with its DKW
/// half-width at 99% confidence.
pub fn naka_sum_quantile(j: usize, alpha: f64, n_mc: usize, seed: u64) -> Result<NakaQuantile> {
    check_alpha(alpha)?;
    let cdf = naka_sum_cdf(j, n_mc, seed)?;
    let underresolved = (n_mc as f64) * alpha < 10.0;
    if underresolved {
        log::warn!("{n_mc} draws resolve the {alpha} tail with fewer than 10 samples");
    }
    Ok(NakaQuantile {
        threshold: cdf.quantile(1.0 - alpha)?,
        dkw_eps: cdf.dkw_epsilon(),
        n_mc,
        underresolved,
    })
}

/// `(1 - α)`-quantiles of `‖Z‖₁` and `‖Z‖₂` computed on the same draws.
pub fn norm_quantiles(j: usize, alpha: f64, n_mc: usize, seed: u64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    let (l1, l2) = norm_draws(j, n_mc, seed);
    let q = 1.0 - alpha;
    Ok((EmpiricalCdf::new(l1, seed)?.quantile(q)?, EmpiricalCdf::new(l2, seed)?.quantile(q)?))
}

type CacheKey = (usize, u64, usize, u64);

/// Memo of Nakagami-sum thresholds keyed by `(J, α, n_mc, seed)`.
#[derive(Debug, Default)]
pub struct ThresholdCache {
    entries: RwLock<HashMap<CacheKey, NakaQuantile>>,
}

impl ThresholdCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_compute(&self, j: usize, alpha: f64, n_mc: usize, seed: u64) -> Result<NakaQuantile> {
        let key = (j, alpha.to_bits(), n_mc, seed);
        if let Some(q) = self.entries.read().expect("cache lock poisoned").get(&key) {
            return Ok(*q);
        }
        let q = naka_sum_quantile(j, alpha, n_mc, seed)?;
        // a concurrent writer may have won; both computed the same value
        self.entries
            .write()
            .expect("cache lock poisoned")
            .entry(key)
            .or_insert(q);
        Ok(q)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Process-wide threshold cache.
pub fn shared_cache() -> &'static ThresholdCache {
    static CACHE: OnceLock<ThresholdCache> = OnceLock::new();
    CACHE.get_or_init(ThresholdCache::new)
}

/// `(1 - α)`-quantile of the chi-squared distribution with `dof` degrees of
/// freedom, to absolute accuracy 1e-10.
pub fn chi2_quantile(dof: usize, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if dof == 0 {
        return Err(Error::InvalidConfig("chi-squared needs at least one degree of freedom".into()));
    }
    let a = dof as f64 / 2.0;
    let upper = |x: f64| gamma_ur(a, x / 2.0);
    let mut lo = 0.0;
    let mut hi = dof as f64 + 10.0;
    while upper(hi) > alpha {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-10 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if upper(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Order statistic `⌈(1 - α)(n + 1)⌉` of `values`; `+∞` when that index
/// exceeds the number of values.
pub fn permutation_quantile(values: &mut [f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if values.is_empty() {
        return Err(Error::EmptyInput("permutation statistics"));
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let k = ((1.0 - alpha) * (n + 1) as f64 - 1e-9).ceil() as usize;
    Ok(if k > n { f64::INFINITY } else { values[k.max(1) - 1] })
}

/// Random relabelings of a pooled sample of size `n_total`; each item lists
/// the pooled indices assigned to the first sample (in shuffled order) and
/// then to the second.
struct Permutations {
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl Permutations {
    fn new(n_total: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n_total).collect(),
        }
    }

    fn next_order(&mut self) -> &[usize] {
        self.order.shuffle(&mut self.rng);
        &self.order
    }
}

/// Permutation threshold for an arbitrary statistic.
///
/// The pooled sample is relabeled `n_perm` times, split back into sizes
/// `N₁, N₂`, and the statistic recomputed on each split.
pub fn permutation_threshold<F>(x: &SampleSet, y: &SampleSet, n_perm: usize, alpha: f64, seed: u64, stat: F) -> Result<f64>
where
    F: Fn(&SampleSet, &SampleSet) -> Result<f64>,
{
    check_alpha(alpha)?;
    if n_perm == 0 {
        return Err(Error::InvalidConfig("need at least one permutation".into()));
    }
    let pooled = x.concat(y)?;
    let n1 = x.n();
    let mut perms = Permutations::new(pooled.n(), seed);
    let mut values = Vec::with_capacity(n_perm);
    for _ in 0..n_perm {
        let order = perms.next_order();
        let xp = pooled.select(&order[..n1], "perm-x");
        let yp = pooled.select(&order[n1..], "perm-y");
        values.push(stat(&xp, &yp)?);
    }
    permutation_quantile(&mut values, alpha)
}

/// Permutation threshold of [`crate::statistics::mmd2_unbiased`], computed
/// from one pooled Gram matrix. Uses the same relabelings as
/// [`permutation_threshold`] for equal `seed`.
pub fn mmd_permutation_threshold(
    x: &SampleSet,
    y: &SampleSet,
    bw: Bandwidth,
    n_perm: usize,
    alpha: f64,
    seed: u64,
) -> Result<f64> {
    check_alpha(alpha)?;
    if n_perm == 0 {
        return Err(Error::InvalidConfig("need at least one permutation".into()));
    }
    let (n1, n2) = (x.n(), y.n());
    if n1 < 2 || n2 < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: n1.min(n2) });
    }
    let pooled = x.concat(y)?;
    let n = pooled.n();
    let k = gram(pooled.data(), pooled.data(), bw);
    let row_sums = k.sum_axis(Axis(1));
    let diag: Array1<f64> = k.diag().to_owned();

    let mut perms = Permutations::new(n, seed);
    let mut indicators = Array2::<f64>::zeros((n, n_perm));
    let mut members: Vec<Vec<usize>> = Vec::with_capacity(n_perm);
    for p in 0..n_perm {
        let order = perms.next_order();
        for &i in &order[..n1] {
            indicators[[i, p]] = 1.0;
        }
        members.push(order[..n1].to_vec());
    }
    let ka = k.dot(&indicators);
    let (a, b) = (n1 as f64, n2 as f64);
    let mut values = Vec::with_capacity(n_perm);
    for p in 0..n_perm {
        let col = ka.column(p);
        let mut in_x = vec![false; n];
        for &i in &members[p] {
            in_x[i] = true;
        }
        let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            if in_x[i] {
                xx += col[i] - diag[i];
                xy += row_sums[i] - col[i];
            } else {
                yy += row_sums[i] - col[i] - diag[i];
            }
        }
        values.push(xx / (a * (a - 1.0)) + yy / (b * (b - 1.0)) - 2.0 * xy / (a * b));
    }
    permutation_quantile(&mut values, alpha)
}

/// Permutation thresholds `(ℓ1, ℓ2²)` for the unnormalized location
/// statistics, given the pooled feature matrix (first `n1` rows from X).
///
/// Both thresholds come from the same relabelings.
pub fn unnormalized_permutation_thresholds(
    pooled_features: ArrayView2<'_, f64>,
    n1: usize,
    n_perm: usize,
    alpha: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    let n = pooled_features.nrows();
    if n1 == 0 || n1 >= n {
        return Err(Error::InvalidConfig(format!("cannot split {n} rows at {n1}")));
    }
    if n != 2 * n1 {
        return Err(Error::UnsupportedPairing { n1, n2: n - n1 });
    }
    let total = pooled_features.sum_axis(Axis(0));
    let mut perms = Permutations::new(n, seed);
    let mut l1 = Vec::with_capacity(n_perm);
    let mut l2 = Vec::with_capacity(n_perm);
    let nf = n1 as f64;
    for _ in 0..n_perm {
        let order = perms.next_order();
        let mut sum_x = Array1::<f64>::zeros(pooled_features.ncols());
        for &i in &order[..n1] {
            sum_x += &pooled_features.row(i);
        }
        let s = (&sum_x / nf) - ((&total - &sum_x) / nf);
        let (a, b) = unnormalized_from_difference(s.view(), n1);
        l1.push(a);
        l2.push(b);
    }
    Ok((permutation_quantile(&mut l1, alpha)?, permutation_quantile(&mut l2, alpha)?))
}
