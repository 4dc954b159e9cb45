//! `binreg`: fit binary regressions with honest covariances, query the
//! population oracle, run scenario simulations, and test model fit.
//!
//! Exit codes partition the failure classes so CI scripts can branch on
//! them: 2 = parse/validation error, 3 = fit failure (separation or singular
//! information), 4 = oracle divergence, 5 = replication failure budget
//! exceeded, 1 = anything else. Failures also emit a machine-readable error
//! JSON on stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use binreg::fit::{
    fit_mle, local_probability_curve, FitConfig, FitResult, Kernel, KernelSpec,
};
use binreg::model::{CovariateVector, Dataset, Link};
use binreg::nonparam::DensityRatioClassifier;
use binreg::oracle::least_false;
use binreg::sandwich::{covariance_report, misspecification_test, wald_interval, CovarianceFlavor};
use binreg::scenario::parse_scenario_path;
use binreg::sim::{evaluate_checks, run_experiment, write_replications_csv, write_summary_json};
use binreg::Error;

#[derive(Parser)]
#[command(
    name = "binreg",
    about = "Likelihood-based binary regression under possible model misspecification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a dataset and report sandwich and naive inference side by side.
    Fit(FitArgs),
    /// Run a scenario file: replicated simulation with oracle comparisons.
    Simulate(SimulateArgs),
    /// Compute the least-false parameter and population matrices of a
    /// scenario's (H, truth) pair.
    Oracle(OracleArgs),
    /// Bootstrap goodness-of-fit test based on the Ĵ-vs-K̂ distance.
    Goftest(GoftestArgs),
    /// Local-likelihood probability curve over a covariate grid.
    LocalCurve(LocalCurveArgs),
    /// Class-density plug-in probability estimate over a covariate grid.
    DensityRatio(DensityRatioArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV with header x1,…,xd,z.
    dataset: PathBuf,
    #[arg(long, default_value = "logistic")]
    link: String,
    /// Wald interval level.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario TOML file.
    scenario: PathBuf,
    /// Directory for summary JSON and per-replication CSV.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    /// Scenario TOML file (the estimator section is ignored).
    scenario: PathBuf,
    /// Population Newton tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GoftestArgs {
    dataset: PathBuf,
    #[arg(long, default_value = "logistic")]
    link: String,
    /// Parametric-bootstrap replicates (≥ 200).
    #[arg(long, default_value_t = 500)]
    replicates: usize,
    /// Seed for the bootstrap streams (the command is stochastic).
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LocalCurveArgs {
    dataset: PathBuf,
    /// Grid over x1 as lo:hi:count (d = 1 datasets).
    #[arg(long, allow_hyphen_values = true)]
    grid: String,
    #[arg(long, default_value = "gaussian")]
    kernel: String,
    /// Bandwidth per covariate, comma-separated.
    #[arg(long)]
    bandwidth: String,
    #[arg(long, default_value = "logistic")]
    link: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DensityRatioArgs {
    dataset: PathBuf,
    /// Grid over x1 as lo:hi:count (d = 1 datasets).
    #[arg(long, allow_hyphen_values = true)]
    grid: String,
    #[arg(long, default_value = "gaussian")]
    kernel: String,
    /// Optional bandwidth override per covariate, comma-separated; the
    /// normal-reference rule per class is used when absent.
    #[arg(long)]
    bandwidth: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Goftest(args) => cmd_goftest(args),
        Command::LocalCurve(args) => cmd_local_curve(args),
        Command::DensityRatio(args) => cmd_density_ratio(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let payload = json!({ "error": { "kind": kind, "message": e.to_string() } });
            println!("{}", serde_json::to_string_pretty(&payload).expect("error payload"));
            eprintln!("binreg: {e}");
            ExitCode::from(code)
        }
    }
}

fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Csv(_)
        | Error::InvalidScenario(_)
        | Error::InvalidParameter(_)
        | Error::DimensionMismatch { .. }
        | Error::EmptyDataset
        | Error::NonBinaryOutcome { .. }
        | Error::NonFiniteCovariate { .. }
        | Error::InvalidWeights(_)
        | Error::Io(_) => (2, "parse"),
        Error::FitFailed { .. }
        | Error::SingularInformation { .. }
        | Error::InsufficientLocalMass { .. }
        | Error::DegenerateImportanceWeights { .. }
        | Error::EmptyClass(_)
        | Error::SingleClassData
        | Error::BootstrapDropBudgetExceeded { .. } => (3, "fit"),
        Error::OracleDivergence(_)
        | Error::QuadratureFailure(_)
        | Error::UnsupportedDistribution(_) => (4, "oracle"),
        Error::FailureBudgetExceeded { .. } => (5, "budget"),
    }
}

fn write_output<P: AsRef<Path>>(out: Option<P>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            Ok(())
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn matrix_json(m: &binreg::nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
}

#[derive(Serialize)]
struct FitReport<'a> {
    config: serde_json::Value,
    n: usize,
    dim: usize,
    fit: &'a FitResult,
    j_hat: Vec<Vec<f64>>,
    k_hat: Vec<Vec<f64>>,
    naive_standard_errors: Vec<f64>,
    sandwich_standard_errors: Vec<f64>,
    naive_intervals: Vec<(f64, f64)>,
    sandwich_intervals: Vec<(f64, f64)>,
}

fn cmd_fit(args: FitArgs) -> Result<(), Error> {
    let link: Link = args.link.parse()?;
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Error::InvalidParameter(format!("level must be in (0,1), got {}", args.level)));
    }
    let data = Dataset::from_csv_path(&args.dataset)?;
    let config = FitConfig::default();
    let fit = fit_mle(link, &data, &config)?;
    if !fit.converged {
        return Err(Error::FitFailed { status: fit.status });
    }
    let report = covariance_report(link, &fit, &data)?;
    let p = data.dim();
    let naive_se: Vec<f64> = (0..p).map(|u| report.naive_cov[(u, u)].sqrt()).collect();
    let sandwich_se: Vec<f64> = (0..p).map(|u| report.sandwich_cov[(u, u)].sqrt()).collect();
    let mut naive_intervals = Vec::with_capacity(p);
    let mut sandwich_intervals = Vec::with_capacity(p);
    for u in 0..p {
        naive_intervals.push(wald_interval(
            &report,
            &fit.beta_hat,
            u,
            args.level,
            CovarianceFlavor::Naive,
        )?);
        sandwich_intervals.push(wald_interval(
            &report,
            &fit.beta_hat,
            u,
            args.level,
            CovarianceFlavor::Sandwich,
        )?);
    }
    let out = FitReport {
        config: json!({
            "command": "fit",
            "dataset": args.dataset,
            "link": link.to_string(),
            "level": args.level,
            "max_iterations": config.max_iterations,
            "gradient_tolerance": config.gradient_tolerance,
            "step_halving_limit": config.step_halving_limit,
        }),
        n: data.n(),
        dim: p,
        fit: &fit,
        j_hat: matrix_json(&report.j_hat),
        k_hat: matrix_json(&report.k_hat),
        naive_standard_errors: naive_se,
        sandwich_standard_errors: sandwich_se,
        naive_intervals,
        sandwich_intervals,
    };
    write_output(args.out.as_ref(), &serde_json::to_string_pretty(&out).expect("report"))
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let (scenario, checks) = parse_scenario_path(&args.scenario)?;
    let summary = run_experiment(&scenario)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let stem = args
        .scenario
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".to_string());
    let json_path = args.out_dir.join(format!("{stem}.summary.json"));
    let csv_path = args.out_dir.join(format!("{stem}.replications.csv"));
    let json_file = std::fs::File::create(&json_path)?;
    write_summary_json(&summary, std::io::BufWriter::new(json_file))?;
    let csv_file = std::fs::File::create(&csv_path)?;
    write_replications_csv(&summary, std::io::BufWriter::new(csv_file))?;
    println!("summary: {}", json_path.display());
    println!("replications: {}", csv_path.display());
    if let Some(checks) = checks {
        for verdict in evaluate_checks(&summary, &checks) {
            println!(
                "check {}: {} ({})",
                verdict.name,
                if verdict.pass { "PASS" } else { "FAIL" },
                verdict.detail
            );
        }
    }
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<(), Error> {
    let (scenario, _) = parse_scenario_path(&args.scenario)?;
    let result = least_false(scenario.link, &scenario.h, &scenario.truth, args.tolerance)?;
    let payload = json!({
        "config": {
            "command": "oracle",
            "scenario": args.scenario,
            "link": scenario.link.to_string(),
            "tolerance": args.tolerance,
        },
        "beta0": result.beta0.as_slice(),
        "delta_at_beta0": result.delta_at_beta0,
        "population_j": matrix_json(&result.population_j),
        "population_k": matrix_json(&result.population_k),
        "population_sandwich": matrix_json(&result.population_sandwich),
        "integration_error_estimate": result.integration_error_estimate,
        "score_norm_at_beta0": result.score_norm_at_beta0,
    });
    write_output(args.out.as_ref(), &serde_json::to_string_pretty(&payload).expect("report"))
}

fn cmd_goftest(args: GoftestArgs) -> Result<(), Error> {
    let link: Link = args.link.parse()?;
    let data = Dataset::from_csv_path(&args.dataset)?;
    let fit = fit_mle(link, &data, &FitConfig::default())?;
    if !fit.converged {
        return Err(Error::FitFailed { status: fit.status });
    }
    let report = misspecification_test(link, &fit, &data, args.replicates, args.seed)?;
    let payload = json!({
        "config": {
            "command": "goftest",
            "dataset": args.dataset,
            "link": link.to_string(),
            "replicates": args.replicates,
            "seed": args.seed,
        },
        "statistic": report.statistic,
        "p_value": report.p_value,
        "bootstrap_replicates": report.bootstrap_replicates,
        "dropped_replicates": report.dropped_replicates,
    });
    write_output(args.out.as_ref(), &serde_json::to_string_pretty(&payload).expect("report"))
}

fn parse_grid(spec: &str) -> Result<Vec<f64>, Error> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidParameter(format!("grid must be lo:hi:count, got '{spec}'")));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("bad grid bound '{}'", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("bad grid bound '{}'", parts[1])))?;
    let count: usize = parts[2]
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("bad grid count '{}'", parts[2])))?;
    if count == 0 || hi <= lo || hi.is_nan() || lo.is_nan() {
        return Err(Error::InvalidParameter("grid needs hi > lo and count ≥ 1".into()));
    }
    if count == 1 {
        return Ok(vec![0.5 * (lo + hi)]);
    }
    Ok((0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect())
}

fn parse_bandwidths(spec: &str) -> Result<Vec<f64>, Error> {
    spec.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidParameter(format!("bad bandwidth '{part}'")))
        })
        .collect()
}

fn cmd_local_curve(args: LocalCurveArgs) -> Result<(), Error> {
    let link: Link = args.link.parse()?;
    let kernel: Kernel = match args.kernel.to_ascii_lowercase().as_str() {
        "gaussian" => Kernel::Gaussian,
        "epanechnikov" => Kernel::Epanechnikov,
        "uniform" => Kernel::Uniform,
        other => return Err(Error::InvalidParameter(format!("unknown kernel '{other}'"))),
    };
    let data = Dataset::from_csv_path(&args.dataset)?;
    if data.dim() != 2 {
        return Err(Error::UnsupportedDistribution(
            "local-curve grids are one-dimensional; the dataset must have a single covariate"
                .into(),
        ));
    }
    let bandwidth = parse_bandwidths(&args.bandwidth)?;
    let spec = KernelSpec::new(kernel, bandwidth)?;
    let grid_values = parse_grid(&args.grid)?;
    let grid: Vec<CovariateVector> = grid_values
        .iter()
        .map(|&x| CovariateVector::from_features(&[x]))
        .collect::<Result<_, _>>()?;
    let points = local_probability_curve(link, &data, &grid, &spec, &FitConfig::default());

    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["x", "q_star", "beta_0", "beta_1", "flag"])
        .map_err(Error::from)?;
    let mut all_failed = true;
    for point in &points {
        let x = point.x0.as_slice()[1];
        match &point.result {
            Ok((fit, q_star)) => {
                all_failed = false;
                writer
                    .write_record([
                        format!("{x}"),
                        format!("{q_star}"),
                        format!("{}", fit.beta_hat.as_slice()[0]),
                        format!("{}", fit.beta_hat.as_slice()[1]),
                        String::new(),
                    ])
                    .map_err(Error::from)?;
            }
            Err(e) => {
                writer
                    .write_record([
                        format!("{x}"),
                        String::new(),
                        String::new(),
                        String::new(),
                        e.to_string(),
                    ])
                    .map_err(Error::from)?;
            }
        }
    }
    if all_failed && !points.is_empty() {
        return Err(Error::FitFailed { status: binreg::fit::FitStatus::IterationLimit });
    }
    let bytes = writer.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))?;
    write_output(args.out.as_ref(), text.trim_end())
}

fn cmd_density_ratio(args: DensityRatioArgs) -> Result<(), Error> {
    let kernel: Kernel = match args.kernel.to_ascii_lowercase().as_str() {
        "gaussian" => Kernel::Gaussian,
        "epanechnikov" => Kernel::Epanechnikov,
        other => return Err(Error::InvalidParameter(format!("unknown kernel '{other}'"))),
    };
    let data = Dataset::from_csv_path(&args.dataset)?;
    if data.dim() != 2 {
        return Err(Error::UnsupportedDistribution(
            "density-ratio grids are one-dimensional; the dataset must have a single covariate"
                .into(),
        ));
    }
    let bandwidths = match &args.bandwidth {
        Some(spec) => {
            let h = parse_bandwidths(spec)?;
            Some((h.clone(), h))
        }
        None => None,
    };
    let classifier = DensityRatioClassifier::from_dataset(&data, kernel, bandwidths)?;
    let grid = parse_grid(&args.grid)?;

    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["x", "q_hat", "prior_fallback"]).map_err(Error::from)?;
    for &x in &grid {
        let est = classifier.probability(&[x])?;
        writer
            .write_record([
                format!("{x}"),
                format!("{}", est.value),
                format!("{}", est.prior_fallback),
            ])
            .map_err(Error::from)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))?;
    write_output(args.out.as_ref(), text.trim_end())
}
