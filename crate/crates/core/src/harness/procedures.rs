//! One function per registered test: tune on the training split, decide on
//! the test split.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use super::TestName;
use crate::error::{Error, Result};
use crate::kernels::{Bandwidth, FeatureFamily, TestLocations};
use crate::nulldist::{chi2_quantile, mmd_permutation_threshold, shared_cache, DEFAULT_MC_SEED, DEFAULT_N_MC, DEFAULT_N_PERM};
use crate::optimizer::{
    grid_search_bandwidth, init_theta, median_heuristic, optimize_objective, Objective, OptimizerConfig, BANDWIDTH_GRID,
};
use crate::seed::derive_seed;
use crate::statistics::{
    hoeffding_test, l1_me_statistic, l1_scf_statistic, me_statistic_l2, mmd2_unbiased, mmd2_with_h1_variance,
    mmd_linear_terms, scf_statistic_l2, SampleSet, TestOutcome, DEFAULT_GAMMA,
};

/// Kernel bound used by the Hoeffding test (the Gaussian kernel is bounded by 1).
pub const HOEFFDING_KERNEL_BOUND: f64 = 2.0;

/// Knobs shared by all test procedures.
#[derive(Debug, Clone, PartialEq)]
pub struct TestParams {
    pub j: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub max_iters: usize,
    pub n_mc: usize,
    pub mc_seed: u64,
    pub n_perm: usize,
}

impl Default for TestParams {
    fn default() -> Self {
        Self {
            j: 5,
            alpha: 0.01,
            gamma: DEFAULT_GAMMA,
            max_iters: 200,
            n_mc: DEFAULT_N_MC,
            mc_seed: DEFAULT_MC_SEED,
            n_perm: DEFAULT_N_PERM,
        }
    }
}

/// Training and test halves of one trial. Index sets are disjoint by
/// construction.
#[derive(Debug, Clone)]
pub struct Split {
    pub x_train: SampleSet,
    pub y_train: SampleSet,
    pub x_test: SampleSet,
    pub y_test: SampleSet,
}

/// Randomly drops rows of the larger sample so both have the same size.
pub fn equalize(x: &SampleSet, y: &SampleSet, seed: u64) -> (SampleSet, SampleSet) {
    let m = x.n().min(y.n());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shrink = |s: &SampleSet| {
        if s.n() == m {
            return s.clone();
        }
        let mut idx = sample_indices(&mut rng, s.n(), m).into_vec();
        idx.sort_unstable();
        s.select(&idx, s.label().to_string())
    };
    (shrink(x), shrink(y))
}

fn l1_threshold(family: FeatureFamily, p: &TestParams) -> Result<f64> {
    Ok(shared_cache()
        .get_or_compute(family.feature_len(p.j), p.alpha, p.n_mc, p.mc_seed)?
        .threshold)
}

fn optimizer_config(p: &TestParams, seed: u64) -> OptimizerConfig {
    OptimizerConfig {
        max_iters: p.max_iters,
        gamma: p.gamma,
        seed,
        ..OptimizerConfig::default()
    }
}

fn l1_location_test(
    name: TestName,
    family: FeatureFamily,
    locations: TestLocations,
    split: &Split,
    p: &TestParams,
) -> Result<TestOutcome> {
    let stat = match family {
        FeatureFamily::Me => l1_me_statistic(&split.x_test, &split.y_test, &locations, p.gamma)?,
        FeatureFamily::Scf => l1_scf_statistic(&split.x_test, &split.y_test, &locations, p.gamma)?,
    };
    TestOutcome::new(name.as_str(), stat.value, l1_threshold(family, p)?, p.alpha, Some(locations))
}

fn l1_opt(name: TestName, family: FeatureFamily, split: &Split, p: &TestParams, seed: u64) -> Result<TestOutcome> {
    let res = optimize_objective(
        Objective::L1Pooled,
        &split.x_train,
        &split.y_train,
        p.j,
        family,
        &optimizer_config(p, seed),
    )?;
    l1_location_test(name, family, res.theta.to_locations()?, split, p)
}

fn l1_grid(name: TestName, family: FeatureFamily, split: &Split, p: &TestParams, seed: u64) -> Result<TestOutcome> {
    let init = init_theta(&split.x_train, &split.y_train, p.j, family, seed)?;
    let (theta, _) = grid_search_bandwidth(Objective::L1Pooled, &init, &split.x_train, &split.y_train, family, p.gamma)?;
    l1_location_test(name, family, theta.to_locations()?, split, p)
}

fn l2_full(name: TestName, family: FeatureFamily, split: &Split, p: &TestParams, seed: u64) -> Result<TestOutcome> {
    let (xtr, ytr) = equalize(&split.x_train, &split.y_train, derive_seed(seed, &[1]));
    let (xte, yte) = equalize(&split.x_test, &split.y_test, derive_seed(seed, &[2]));
    let res = optimize_objective(Objective::L2Paired, &xtr, &ytr, p.j, family, &optimizer_config(p, seed))?;
    let locations = res.theta.to_locations()?;
    let stat = match family {
        FeatureFamily::Me => me_statistic_l2(&xte, &yte, &locations, p.gamma)?,
        FeatureFamily::Scf => scf_statistic_l2(&xte, &yte, &locations, p.gamma)?,
    };
    let threshold = chi2_quantile(family.feature_len(p.j), p.alpha)?;
    TestOutcome::new(name.as_str(), stat.value, threshold, p.alpha, Some(locations))
}

fn bandwidth_grid(x: &SampleSet, y: &SampleSet) -> Result<Vec<Bandwidth>> {
    let pooled = x.concat(y)?;
    let mut med = median_heuristic(pooled.data());
    if !(med > 0.0 && med.is_finite()) {
        med = 1.0;
    }
    BANDWIDTH_GRID.iter().map(|&k| Bandwidth::new(med * 2f64.powi(k))).collect()
}

/// Bandwidth maximizing `criterion` on the training split; ties and failures
/// fall back to the median heuristic.
fn pick_bandwidth<F>(x: &SampleSet, y: &SampleSet, criterion: F) -> Result<Bandwidth>
where
    F: Fn(Bandwidth) -> Result<f64>,
{
    let grid = bandwidth_grid(x, y)?;
    let mut best = (grid[grid.len() / 2], f64::NEG_INFINITY);
    for bw in grid {
        if let Ok(v) = criterion(bw) {
            if v.is_finite() && v > best.1 {
                best = (bw, v);
            }
        }
    }
    Ok(best.0)
}

fn mmd_quad(split: &Split, p: &TestParams, seed: u64) -> Result<TestOutcome> {
    let (xtr, ytr) = equalize(&split.x_train, &split.y_train, derive_seed(seed, &[1]));
    let bw = pick_bandwidth(&xtr, &ytr, |bw| {
        let (m, var) = mmd2_with_h1_variance(&xtr, &ytr, bw)?;
        if var > 0.0 {
            Ok(m / var.sqrt())
        } else {
            Err(Error::NonFinite("MMD variance"))
        }
    })?;
    let stat = mmd2_unbiased(&split.x_test, &split.y_test, bw)?;
    let threshold = mmd_permutation_threshold(&split.x_test, &split.y_test, bw, p.n_perm, p.alpha, derive_seed(seed, &[3]))?;
    TestOutcome::new(TestName::MmdQuad.as_str(), stat, threshold, p.alpha, None)
}

fn mean_sd(h: &ndarray::Array1<f64>) -> (f64, f64) {
    let m = h.len() as f64;
    let mean = h.mean().unwrap_or(0.0);
    let var = if h.len() > 1 {
        h.mapv(|v| (v - mean).powi(2)).sum() / (m - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn mmd_lin(split: &Split, p: &TestParams, seed: u64) -> Result<TestOutcome> {
    let (xtr, ytr) = equalize(&split.x_train, &split.y_train, derive_seed(seed, &[1]));
    let (xte, yte) = equalize(&split.x_test, &split.y_test, derive_seed(seed, &[2]));
    let bw = pick_bandwidth(&xtr, &ytr, |bw| {
        let (mean, sd) = mean_sd(&mmd_linear_terms(&xtr, &ytr, bw)?);
        if sd > 0.0 {
            Ok(mean / sd)
        } else {
            Err(Error::NonFinite("MMD-lin variance"))
        }
    })?;
    let h = mmd_linear_terms(&xte, &yte, bw)?;
    let (stat, sd) = mean_sd(&h);
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - p.alpha);
    let threshold = z * sd / (h.len() as f64).sqrt();
    TestOutcome::new(TestName::MmdLin.as_str(), stat, threshold, p.alpha, None)
}

fn hoeffding(split: &Split, p: &TestParams, seed: u64) -> Result<TestOutcome> {
    let theta = init_theta(&split.x_train, &split.y_train, p.j, FeatureFamily::Me, seed)?;
    let mut out = hoeffding_test(
        &split.x_test,
        &split.y_test,
        &theta.to_locations()?,
        p.alpha,
        HOEFFDING_KERNEL_BOUND,
    )?;
    out.test_name = TestName::HoeffdingL1.as_str().to_string();
    Ok(out)
}

/// Runs one test on one split; `seed` drives every random choice it makes.
/// The recorded elapsed time covers tuning and testing.
pub fn run_test(name: TestName, split: &Split, params: &TestParams, seed: u64) -> Result<TestOutcome> {
    let start = Instant::now();
    let out = match name {
        TestName::L1OptMe => l1_opt(name, FeatureFamily::Me, split, params, seed),
        TestName::L1OptScf => l1_opt(name, FeatureFamily::Scf, split, params, seed),
        TestName::L1GridMe => l1_grid(name, FeatureFamily::Me, split, params, seed),
        TestName::L1GridScf => l1_grid(name, FeatureFamily::Scf, split, params, seed),
        TestName::MeFull => l2_full(name, FeatureFamily::Me, split, params, seed),
        TestName::ScfFull => l2_full(name, FeatureFamily::Scf, split, params, seed),
        TestName::MmdQuad => mmd_quad(split, params, seed),
        TestName::MmdLin => mmd_lin(split, params, seed),
        TestName::HoeffdingL1 => hoeffding(split, params, seed),
    }?;
    Ok(out.with_elapsed(start.elapsed()))
}
