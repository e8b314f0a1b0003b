//! `l1test`: synthetic benchmarks, CSV two-sample tests, proxy landscapes and
//! null threshold tables.

mod config;

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{apply, FileConfig};
use l1test::harness::{
    load_csv, run_experiment, run_trial, write_results, DataSource, ExperimentConfig, OutputFormat, TestName,
    OUTPUT_DIR_ENV,
};
use l1test::kernels::FeatureFamily;
use l1test::nulldist::{chi2_quantile, naka_sum_quantile, DEFAULT_MC_SEED};
use l1test::optimizer::{init_theta, objective_landscape, Objective};
use l1test::problems::{sample_problem, Problem, ProblemSpec, Side};
use l1test::seed::derive_seed;

#[derive(Parser, Debug)]
#[command(name = "l1test", version, about = "Kernel two-sample tests with optimized test locations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rejection rates over repeated synthetic trials, swept over sizes and dimensions.
    Bench(BenchArgs),
    /// Runs the selected tests once on two CSV samples.
    Test(TestArgs),
    /// Dumps the power proxy as one location sweeps a 2-d grid.
    Landscape(LandscapeArgs),
    /// Prints null thresholds for a range of J and alpha.
    Null(NullArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Significance level.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// Number of test locations.
    #[arg(long = "J", default_value_t = 5)]
    j: usize,
    /// Comma-separated test names (default: all).
    #[arg(long, value_delimiter = ',')]
    tests: Vec<TestName>,
    /// Gradient-ascent iterations for the optimized tests.
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Monte-Carlo draws for the L1 null thresholds.
    #[arg(long, default_value_t = 100_000)]
    n_mc: usize,
    /// Permutations for MMD-quad.
    #[arg(long, default_value_t = 200)]
    n_perm: usize,
    /// Covariance regularization.
    #[arg(long, default_value_t = 1e-5)]
    gamma: f64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// sg, gmd, gvd or blobs.
    #[arg(long, default_value = "gmd")]
    problem: String,
    /// Dimensions to sweep.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    dim: Vec<usize>,
    /// Test-set sizes to sweep (the training set has the same size).
    #[arg(long, value_delimiter = ',', default_value = "1000")]
    nte: Vec<usize>,
    /// Trials per setting.
    #[arg(long, default_value_t = 500)]
    trials: usize,
    /// json-lines or csv.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Output file (default: stdout, or the output directory when set).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Directory receiving `results.<ext>` when --output is absent.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    /// TOML file whose keys override the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TestArgs {
    #[command(flatten)]
    common: Common,
    /// CSV file with the first sample.
    #[arg(long)]
    x: PathBuf,
    /// CSV file with the second sample.
    #[arg(long)]
    y: PathBuf,
    /// Test-split size per sample (default: half of the smaller file).
    #[arg(long)]
    nte: Option<usize>,
}

#[derive(Args, Debug)]
struct LandscapeArgs {
    #[arg(long, default_value = "gmd")]
    problem: String,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Training-sample size per side.
    #[arg(long, default_value_t = 500)]
    nte: usize,
    #[arg(long = "J", default_value_t = 2)]
    j: usize,
    /// me or scf.
    #[arg(long, default_value = "me")]
    family: String,
    /// Location swept over the grid (default: the last one).
    #[arg(long)]
    index: Option<usize>,
    /// Grid extent `lo,hi`, used for both axes.
    #[arg(long, value_delimiter = ',', default_values_t = [-4.0, 4.0], allow_hyphen_values = true)]
    range: Vec<f64>,
    #[arg(long, default_value_t = 41)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    gamma: f64,
    /// JSON output file (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NullArgs {
    /// Largest J in the table.
    #[arg(long = "J", default_value_t = 10)]
    j: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05")]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    n_mc: usize,
    #[arg(long, default_value_t = DEFAULT_MC_SEED)]
    seed: u64,
}

fn parse_problem(name: &str) -> Result<Problem> {
    Ok(name.parse::<Problem>()?)
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn selected_tests(tests: &[TestName]) -> Vec<TestName> {
    if tests.is_empty() {
        TestName::ALL.to_vec()
    } else {
        tests.to_vec()
    }
}

fn apply_common(cfg: &mut ExperimentConfig, c: &Common) {
    cfg.seed = c.seed;
    cfg.alpha = c.alpha;
    cfg.j = c.j;
    cfg.max_iters = c.max_iters;
    cfg.n_mc = c.n_mc;
    cfg.n_perm = c.n_perm;
    cfg.gamma = c.gamma;
}

fn bench(mut args: BenchArgs) -> Result<()> {
    if let Some(path) = args.config.clone() {
        let f = FileConfig::load(&path)?;
        apply(&mut args.problem, f.problem);
        apply(&mut args.dim, f.dim);
        apply(&mut args.nte, f.nte);
        apply(&mut args.trials, f.trials);
        apply(&mut args.common.alpha, f.alpha);
        apply(&mut args.common.j, f.j);
        apply(&mut args.common.seed, f.seed);
        apply(&mut args.format, f.format);
        apply(&mut args.common.max_iters, f.max_iters);
        apply(&mut args.common.n_mc, f.n_mc);
        apply(&mut args.common.n_perm, f.n_perm);
        apply(&mut args.common.gamma, f.gamma);
        if let Some(tests) = f.tests {
            args.common.tests = tests.iter().map(|t| t.parse()).collect::<Result<_, _>>()?;
        }
        if f.output.is_some() {
            args.output = f.output;
        }
    }
    let problem = parse_problem(&args.problem)?;
    let format: OutputFormat = args.format.parse()?;
    let output = args
        .output
        .clone()
        .or_else(|| args.output_dir.as_ref().map(|d| d.join(format!("results.{}", format.extension()))));

    let mut reports = Vec::new();
    for &d in &args.dim {
        for &n_te in &args.nte {
            let spec = ProblemSpec::new(problem, d)?;
            let mut cfg = ExperimentConfig::new(DataSource::Synthetic(spec), selected_tests(&args.common.tests), n_te);
            apply_common(&mut cfg, &args.common);
            cfg.n_trials = args.trials;
            cfg.output = output.clone();
            log::info!("{problem} d={d} n_te={n_te}: {} trials", cfg.n_trials);
            let report = run_experiment(&cfg)?;
            for a in &report.aggregates {
                eprintln!(
                    "{problem} d={d} n_te={n_te} {:<13} rejection rate {:.3} ({:.1} ms/trial)",
                    a.test.as_str(),
                    a.rejection_rate,
                    a.mean_runtime_ms
                );
            }
            reports.push(report);
        }
    }
    write_results(&reports, open_output(output.as_deref())?, format)?;
    Ok(())
}

fn test(args: TestArgs) -> Result<()> {
    let x = load_csv(&args.x, None).with_context(|| format!("loading {}", args.x.display()))?;
    let y = load_csv(&args.y, Some(x.dim())).with_context(|| format!("loading {}", args.y.display()))?;
    let n_te = args.nte.unwrap_or(x.n().min(y.n()) / 2);
    let name = format!("{} vs {}", x.label(), y.label());
    let mut cfg = ExperimentConfig::new(
        DataSource::Files {
            name,
            x: Arc::new(x),
            y: Arc::new(y),
        },
        selected_tests(&args.common.tests),
        n_te,
    );
    apply_common(&mut cfg, &args.common);
    cfg.n_trials = 1;
    cfg.validate()?;
    let mut out = io::stdout().lock();
    for outcome in run_trial(&cfg, 0)? {
        serde_json::to_writer(&mut out, &outcome)?;
        writeln!(out)?;
    }
    Ok(())
}

fn landscape(args: LandscapeArgs) -> Result<()> {
    if args.range.len() != 2 || args.range[0] >= args.range[1] {
        bail!("--range takes `lo,hi` with lo < hi");
    }
    let family = match args.family.to_ascii_lowercase().as_str() {
        "me" => FeatureFamily::Me,
        "scf" => FeatureFamily::Scf,
        other => bail!("unknown family `{other}` (expected me or scf)"),
    };
    let spec = ProblemSpec::new(parse_problem(&args.problem)?, args.dim)?;
    let x = sample_problem(&spec, args.nte, Side::P, derive_seed(args.seed, &[0]))?;
    let y = sample_problem(&spec, args.nte, Side::Q, derive_seed(args.seed, &[0]))?;
    let theta = init_theta(&x, &y, args.j, family, args.seed)?;
    let index = args.index.unwrap_or(args.j - 1);
    let range = (args.range[0], args.range[1]);
    let grid = objective_landscape(
        Objective::L1Pooled,
        &theta,
        index,
        range,
        range,
        args.resolution,
        &x,
        &y,
        family,
        args.gamma,
    )?;
    if let Some((a, b, v)) = grid.argmax() {
        eprintln!("maximum {v:.4} at ({a:.3}, {b:.3})");
    }
    let mut out = open_output(args.output.as_deref())?;
    serde_json::to_writer(&mut out, &grid)?;
    writeln!(out)?;
    Ok(())
}

fn null(args: NullArgs) -> Result<()> {
    if args.j == 0 {
        bail!("--J must be at least 1");
    }
    let mut out = io::stdout().lock();
    writeln!(out, "J,alpha,l1_threshold,dkw_eps,chi2_threshold")?;
    for j in 1..=args.j {
        for &alpha in &args.alpha {
            let q = naka_sum_quantile(j, alpha, args.n_mc, args.seed)?;
            let chi2 = chi2_quantile(j, alpha)?;
            writeln!(out, "{j},{alpha},{:.6},{:.6},{chi2:.6}", q.threshold, q.dkw_eps)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench(a) => bench(a),
        Command::Test(a) => test(a),
        Command::Landscape(a) => landscape(a),
        Command::Null(a) => null(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
