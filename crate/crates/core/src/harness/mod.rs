//! Experiment orchestration: trial loops, splitting, aggregation and I/O.

mod io;
mod procedures;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{
    emit_landscape, emit_results, load_csv, read_results, records, write_csv, write_results, OutputFormat, ResultRecord,
};
pub use procedures::{equalize, run_test, Split, TestParams, HOEFFDING_KERNEL_BOUND};

use crate::error::{check_alpha, Error, Result};
use crate::problems::{sample_problem, ProblemSpec, Side};
use crate::seed::{derive_seed, label_hash};
use crate::statistics::{SampleSet, TestOutcome};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "L1TEST_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TestName {
    L1OptMe,
    L1GridMe,
    L1OptScf,
    L1GridScf,
    MeFull,
    ScfFull,
    MmdQuad,
    MmdLin,
    HoeffdingL1,
}

impl TestName {
    pub const ALL: [TestName; 9] = [
        TestName::L1OptMe,
        TestName::L1GridMe,
        TestName::L1OptScf,
        TestName::L1GridScf,
        TestName::MeFull,
        TestName::ScfFull,
        TestName::MmdQuad,
        TestName::MmdLin,
        TestName::HoeffdingL1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TestName::L1OptMe => "L1-opt-ME",
            TestName::L1GridMe => "L1-grid-ME",
            TestName::L1OptScf => "L1-opt-SCF",
            TestName::L1GridScf => "L1-grid-SCF",
            TestName::MeFull => "ME-full",
            TestName::ScfFull => "SCF-full",
            TestName::MmdQuad => "MMD-quad",
            TestName::MmdLin => "MMD-lin",
            TestName::HoeffdingL1 => "Hoeffding-L1",
        }
    }
}

impl fmt::Display for TestName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TestName::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownTest(s.to_string()))
    }
}

impl TryFrom<String> for TestName {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TestName> for String {
    fn from(t: TestName) -> String {
        t.as_str().to_string()
    }
}

/// Where the two samples come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Fresh draws every trial.
    Synthetic(ProblemSpec),
    /// Fixed samples, re-split into train and test every trial.
    Files {
        name: String,
        x: Arc<SampleSet>,
        y: Arc<SampleSet>,
    },
}

impl DataSource {
    pub fn name(&self) -> String {
        match self {
            DataSource::Synthetic(spec) => spec.problem.name().to_string(),
            DataSource::Files { name, .. } => name.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DataSource::Synthetic(spec) => spec.d,
            DataSource::Files { x, .. } => x.dim(),
        }
    }

    /// `Some(true)` when the null is known to hold; unknown for file data.
    pub fn h0_holds(&self) -> Option<bool> {
        match self {
            DataSource::Synthetic(spec) => Some(spec.h0_holds()),
            DataSource::Files { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub tests: Vec<TestName>,
    /// Test-split size per sample; the training split has the same size.
    pub n_te: usize,
    pub n_trials: usize,
    pub alpha: f64,
    pub j: usize,
    pub seed: u64,
    pub gamma: f64,
    pub max_iters: usize,
    pub n_mc: usize,
    pub n_perm: usize,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(data: DataSource, tests: Vec<TestName>, n_te: usize) -> Self {
        let p = TestParams::default();
        Self {
            data,
            tests,
            n_te,
            n_trials: 500,
            alpha: p.alpha,
            j: p.j,
            seed: 0,
            gamma: p.gamma,
            max_iters: p.max_iters,
            n_mc: p.n_mc,
            n_perm: p.n_perm,
            output: None,
        }
    }

    pub fn params(&self) -> TestParams {
        TestParams {
            j: self.j,
            alpha: self.alpha,
            gamma: self.gamma,
            max_iters: self.max_iters,
            n_mc: self.n_mc,
            n_perm: self.n_perm,
            ..TestParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.n_trials == 0 {
            return Err(Error::InvalidConfig("n_trials must be at least 1".into()));
        }
        if self.j == 0 {
            return Err(Error::InvalidConfig("J must be at least 1".into()));
        }
        if self.tests.is_empty() {
            return Err(Error::InvalidConfig("no tests selected".into()));
        }
        if self.n_te < 4 {
            return Err(Error::TooFewSamples { needed: 4, found: self.n_te });
        }
        match &self.data {
            DataSource::Synthetic(spec) => spec.validate(),
            DataSource::Files { x, y, .. } => {
                if x.dim() != y.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: x.dim(),
                        found: y.dim(),
                    });
                }
                let have = x.n().min(y.n());
                if have < 2 * self.n_te {
                    return Err(Error::TooFewSamples {
                        needed: 2 * self.n_te,
                        found: have,
                    });
                }
                Ok(())
            }
        }
    }

    /// Summary echoed into reports.
    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            problem: self.data.name(),
            d: self.data.dim(),
            j: self.j,
            n_te: self.n_te,
            alpha: self.alpha,
            n_trials: self.n_trials,
            seed: self.seed,
            tests: self.tests.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub problem: String,
    pub d: usize,
    pub j: usize,
    pub n_te: usize,
    pub alpha: f64,
    pub n_trials: usize,
    pub seed: u64,
    pub tests: Vec<TestName>,
}

const TRAIN: u64 = 0x7472;
const TEST: u64 = 0x7465;

/// Seed of trial `trial`.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    derive_seed(seed, &[trial as u64])
}

/// Split drawn for trial `trial`, together with the row indices used from
/// each file sample (empty for synthetic data).
pub fn make_split(config: &ExperimentConfig, trial: usize) -> Result<(Split, SplitIndices)> {
    let ts = trial_seed(config.seed, trial);
    let n = config.n_te;
    match &config.data {
        DataSource::Synthetic(spec) => {
            let draw = |side, part| sample_problem(spec, n, side, derive_seed(ts, &[part]));
            Ok((
                Split {
                    x_train: draw(Side::P, TRAIN)?,
                    y_train: draw(Side::Q, TRAIN)?,
                    x_test: draw(Side::P, TEST)?,
                    y_test: draw(Side::Q, TEST)?,
                },
                SplitIndices::default(),
            ))
        }
        DataSource::Files { x, y, .. } => {
            let have = x.n().min(y.n());
            if have < 2 * n {
                return Err(Error::TooFewSamples { needed: 2 * n, found: have });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ts, &[TRAIN, TEST]));
            let mut split_one = |s: &SampleSet| {
                let mut order: Vec<usize> = (0..s.n()).collect();
                order.shuffle(&mut rng);
                let train = order[..n].to_vec();
                let test = order[n..2 * n].to_vec();
                (s.select(&train, "train"), s.select(&test, "test"), train, test)
            };
            let (xtr, xte, xi_tr, xi_te) = split_one(x);
            let (ytr, yte, yi_tr, yi_te) = split_one(y);
            Ok((
                Split {
                    x_train: xtr,
                    y_train: ytr,
                    x_test: xte,
                    y_test: yte,
                },
                SplitIndices {
                    x_train: xi_tr,
                    x_test: xi_te,
                    y_train: yi_tr,
                    y_test: yi_te,
                },
            ))
        }
    }
}

/// Row indices drawn from file data in one trial.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitIndices {
    pub x_train: Vec<usize>,
    pub x_test: Vec<usize>,
    pub y_train: Vec<usize>,
    pub y_test: Vec<usize>,
}

/// All configured tests on trial `trial`. Each test gets its own seed,
/// derived from the trial seed and the test's name.
pub fn run_trial(config: &ExperimentConfig, trial: usize) -> Result<Vec<TestOutcome>> {
    let (split, _) = make_split(config, trial)?;
    let params = config.params();
    let ts = trial_seed(config.seed, trial);
    config
        .tests
        .iter()
        .map(|&name| run_test(name, &split, &params, derive_seed(ts, &[label_hash(name.as_str())])))
        .collect()
}

/// Per-test summary over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestAggregate {
    pub test: TestName,
    pub n_trials: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    pub type_i_error: Option<f64>,
    pub type_ii_error: Option<f64>,
    pub mean_runtime_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub config: ConfigEcho,
    /// `trials[i][k]` is test `config.tests[k]` on trial `i`.
    pub trials: Vec<Vec<TestOutcome>>,
    pub aggregates: Vec<TestAggregate>,
}

impl TrialReport {
    pub fn aggregate_for(&self, test: TestName) -> Option<&TestAggregate> {
        self.aggregates.iter().find(|a| a.test == test)
    }

    pub fn rejection_rate(&self, test: TestName) -> Option<f64> {
        self.aggregate_for(test).map(|a| a.rejection_rate)
    }
}

/// Rejection rates and mean runtimes per test. `h0_holds` selects whether
/// the rate is reported as a type-I or type-II error (neither when unknown).
pub fn aggregate(config: ConfigEcho, h0_holds: Option<bool>, trials: Vec<Vec<TestOutcome>>) -> Result<TrialReport> {
    if trials.is_empty() {
        return Err(Error::EmptyInput("trial outcomes"));
    }
    let tests = &config.tests;
    if let Some(bad) = trials.iter().find(|t| t.len() != tests.len()) {
        return Err(Error::DimensionMismatch {
            expected: tests.len(),
            found: bad.len(),
        });
    }
    let n = trials.len();
    let aggregates = tests
        .iter()
        .enumerate()
        .map(|(k, &test)| {
            let rejections = trials.iter().filter(|t| t[k].reject).count();
            let rate = rejections as f64 / n as f64;
            let ms: f64 = trials.iter().map(|t| t[k].elapsed.as_secs_f64() * 1e3).sum();
            TestAggregate {
                test,
                n_trials: n,
                rejections,
                rejection_rate: rate,
                type_i_error: (h0_holds == Some(true)).then_some(rate),
                type_ii_error: (h0_holds == Some(false)).then_some(1.0 - rate),
                mean_runtime_ms: ms / n as f64,
            }
        })
        .collect();
    Ok(TrialReport {
        config: ConfigEcho { n_trials: n, ..config },
        trials,
        aggregates,
    })
}

/// Runs every trial (in parallel when a thread pool is available) and
/// aggregates. Results do not depend on the number of worker threads.
pub fn run_experiment(config: &ExperimentConfig) -> Result<TrialReport> {
    config.validate()?;
    let trials = (0..config.n_trials)
        .into_par_iter()
        .map(|t| run_trial(config, t))
        .collect::<Result<Vec<_>>>()?;
    aggregate(config.echo(), config.data.h0_holds(), trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::Problem;
    use std::time::Duration;

    fn outcome(reject: bool) -> TestOutcome {
        let (s, t) = if reject { (2.0, 1.0) } else { (0.5, 1.0) };
        TestOutcome::new("L1-opt-ME", s, t, 0.01, None)
            .unwrap()
            .with_elapsed(Duration::from_millis(4))
    }

    fn echo() -> ConfigEcho {
        ConfigEcho {
            problem: "SG".into(),
            d: 2,
            j: 5,
            n_te: 10,
            alpha: 0.01,
            n_trials: 0,
            seed: 0,
            tests: vec![TestName::L1OptMe],
        }
    }

    #[test]
    fn names_round_trip() {
        for t in TestName::ALL {
            assert_eq!(t.as_str().parse::<TestName>().unwrap(), t);
            assert_eq!(t.as_str().to_lowercase().parse::<TestName>().unwrap(), t);
        }
        assert!(matches!("L2-opt-ME".parse::<TestName>(), Err(Error::UnknownTest(_))));
        let json = serde_json::to_string(&TestName::MmdLin).unwrap();
        assert_eq!(json, "\"MMD-lin\"");
    }

    #[test]
    fn aggregate_examples() {
        let all = aggregate(echo(), Some(true), vec![vec![outcome(true)]; 4]).unwrap();
        assert_eq!(all.aggregates[0].rejection_rate, 1.0);
        assert_eq!(all.aggregates[0].type_i_error, Some(1.0));
        assert_eq!(all.aggregates[0].mean_runtime_ms, 4.0);
        let none = aggregate(echo(), Some(false), vec![vec![outcome(false)]; 4]).unwrap();
        assert_eq!(none.aggregates[0].rejection_rate, 0.0);
        assert_eq!(none.aggregates[0].type_ii_error, Some(1.0));
        let trials: Vec<_> = (0..500).map(|i| vec![outcome(i < 137)]).collect();
        let r = aggregate(echo(), None, trials).unwrap();
        assert_eq!(r.aggregates[0].rejection_rate, 0.274);
        assert_eq!(r.config.n_trials, 500);
        assert!(matches!(aggregate(echo(), None, vec![]), Err(Error::EmptyInput(_))));
    }

    fn small_config(problem: Problem, d: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(
            DataSource::Synthetic(ProblemSpec::new(problem, d).unwrap()),
            TestName::ALL.to_vec(),
            60,
        );
        cfg.n_trials = 2;
        cfg.max_iters = 10;
        cfg.n_mc = 2000;
        cfg.n_perm = 20;
        cfg.seed = 17;
        cfg
    }

    #[test]
    fn trial_outcomes_follow_contract() {
        let cfg = small_config(Problem::Sg, 3);
        let outs = run_trial(&cfg, 0).unwrap();
        assert_eq!(outs.len(), TestName::ALL.len());
        for o in outs {
            assert_eq!(o.reject, o.statistic > o.threshold);
        }
    }

    fn strip_timing(mut r: TrialReport) -> TrialReport {
        for t in r.trials.iter_mut().flatten() {
            t.elapsed = Duration::ZERO;
        }
        for a in &mut r.aggregates {
            a.mean_runtime_ms = 0.0;
        }
        r
    }

    #[test]
    fn experiment_deterministic() {
        let mut cfg = small_config(Problem::Gmd { shift: 1.0 }, 2);
        cfg.n_trials = 1;
        let a = strip_timing(run_experiment(&cfg).unwrap());
        let b = strip_timing(run_experiment(&cfg).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.trials.len(), 1);
    }

    #[test]
    fn adding_a_test_leaves_others_unchanged() {
        let mut cfg = small_config(Problem::Gmd { shift: 1.0 }, 2);
        cfg.tests = vec![TestName::L1GridMe];
        let alone = run_trial(&cfg, 0).unwrap();
        cfg.tests = vec![TestName::MmdLin, TestName::L1GridMe];
        let both = run_trial(&cfg, 0).unwrap();
        assert_eq!(alone[0].statistic, both[1].statistic);
    }

    #[test]
    fn file_splits_are_disjoint_and_resampled() {
        let x = crate::problems::sample_gmd_shift(0.0, 2, 50, Side::P, 1).unwrap();
        let y = crate::problems::sample_gmd_shift(0.0, 2, 45, Side::Q, 1).unwrap();
        let mut cfg = ExperimentConfig::new(
            DataSource::Files {
                name: "files".into(),
                x: Arc::new(x),
                y: Arc::new(y),
            },
            vec![TestName::L1GridMe],
            20,
        );
        cfg.validate().unwrap();
        let (_, a) = make_split(&cfg, 0).unwrap();
        let (_, b) = make_split(&cfg, 1).unwrap();
        for idx in [&a, &b] {
            assert!(idx.x_train.iter().all(|i| !idx.x_test.contains(i)));
            assert!(idx.y_train.iter().all(|i| !idx.y_test.contains(i)));
        }
        assert_ne!(a, b);
        assert_eq!(cfg.data.h0_holds(), None);

        cfg.n_te = 23;
        assert!(matches!(cfg.validate(), Err(Error::TooFewSamples { needed: 46, .. })));
        assert!(make_split(&cfg, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(Problem::Sg, 2);
        cfg.n_trials = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(Problem::Sg, 2);
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
    }
}
