//! Replicated-experiment harness: generates data from declared scenarios,
//! runs every requested estimator on every replication, and aggregates the
//! statistics that the asymptotic claims predict — empirical covariance of
//! `√n(β̂-β⁰)` against the oracle sandwich, Wald coverage against β⁰, and
//! per-estimator means against their own projection targets.
//!
//! Replications are independent and run in parallel; each draws its data
//! from a counter-based substream of the scenario seed, so a scenario is a
//! pure function of its declaration (identical seeds give byte-identical
//! summaries).

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{
    fit_bayes_posterior_mean, fit_local, fit_mle, FitConfig, Kernel, KernelSpec, PriorSpec,
};
use crate::model::{CovariateVector, Dataset, Link, Observation, ParamVector};
use crate::nonparam::DensityRatioClassifier;
use crate::oracle::{
    least_false, least_false_weighted, CovariateDistribution, TrueModel, WeightSpec,
};
use crate::sandwich::{covariance_report, wald_interval, CovarianceFlavor};

/// Default solver tolerance for oracle projections inside experiments.
const ORACLE_TOLERANCE: f64 = 1e-10;
/// Fraction of replications allowed to fail before the experiment aborts.
const FAILURE_BUDGET: f64 = 0.05;

/// One estimator to run on every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorSpec {
    Mle,
    WeightedMle { weight: WeightSpec },
    Local { x0: Vec<f64>, kernel: Kernel, bandwidth: Vec<f64> },
    Bayes { prior_mean: f64, prior_sd: f64, draws: usize },
    /// Density-ratio plug-in; records the mean absolute deviation of q̂ from
    /// the true q over an equal-mass grid spanning the central 90% of H
    /// (d = 1 scenarios).
    DensityRatio { kernel: Kernel, bandwidth: Option<Vec<f64>> },
    GaussianGroupwise,
}

impl EstimatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorSpec::Mle => "mle",
            EstimatorSpec::WeightedMle { .. } => "weighted_mle",
            EstimatorSpec::Local { .. } => "local",
            EstimatorSpec::Bayes { .. } => "bayes",
            EstimatorSpec::DensityRatio { .. } => "density_ratio",
            EstimatorSpec::GaussianGroupwise => "gaussian_groupwise",
        }
    }
}

/// A complete simulation declaration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub h: CovariateDistribution,
    pub truth: TrueModel,
    pub link: Link,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorSpec>,
    #[serde(default = "default_coverage_levels")]
    pub coverage_levels: Vec<f64>,
}

fn default_coverage_levels() -> Vec<f64> {
    vec![0.95]
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let d = self.h.dim();
        self.truth.validate(d)?;
        if self.n < d + 2 {
            return Err(Error::InvalidScenario(format!(
                "n = {} is below d+2 = {}",
                self.n,
                d + 2
            )));
        }
        if self.replications == 0 {
            return Err(Error::InvalidScenario("replications must be ≥ 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidScenario("declare at least one estimator".into()));
        }
        for level in &self.coverage_levels {
            if *level <= 0.0 || *level >= 1.0 || level.is_nan() {
                return Err(Error::InvalidScenario(format!("coverage level {level} not in (0,1)")));
            }
        }
        for est in &self.estimators {
            match est {
                EstimatorSpec::Local { x0, bandwidth, .. } => {
                    if x0.len() != d || bandwidth.len() != d {
                        return Err(Error::InvalidScenario(
                            "local estimator x0/bandwidth must match the covariate dimension"
                                .into(),
                        ));
                    }
                }
                EstimatorSpec::Bayes { prior_sd, draws, .. } => {
                    if prior_sd.is_nan() || *prior_sd <= 0.0 || *draws == 0 {
                        return Err(Error::InvalidScenario(
                            "bayes estimator needs positive prior sd and draws".into(),
                        ));
                    }
                }
                EstimatorSpec::DensityRatio { bandwidth: Some(h), .. } if h.len() != d => {
                    return Err(Error::InvalidScenario(
                        "density-ratio bandwidth must match the covariate dimension".into(),
                    ));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Deterministic sub-generator: ChaCha keyed by the scenario seed, with the
/// stream counter selecting the replication.
pub fn replication_rng(seed: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication);
    rng
}

/// SplitMix step used to derive nested seeds (e.g. per-replication Bayes
/// draws) from the scenario seed.
fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draw the dataset for one replication: x_i i.i.d. from H, then
/// z_i | x_i ~ Bernoulli(q(x_i)). Byte-identical for identical
/// (seed, replication index).
pub fn draw_dataset(scenario: &Scenario, replication: usize) -> Result<Dataset> {
    let mut rng = replication_rng(scenario.seed, replication as u64);
    let mut observations = Vec::with_capacity(scenario.n);
    for _ in 0..scenario.n {
        let features = scenario.h.sample_features(&mut rng);
        let q = scenario.truth.q(&features);
        let z = rng.random_bool(q.clamp(0.0, 1.0));
        observations.push(Observation { x: CovariateVector::from_features(&features)?, z });
    }
    Dataset::new(observations)
}

/// One estimator's outcome on one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub estimator: String,
    pub beta: Option<Vec<f64>>,
    /// Density-ratio records report a scalar metric instead of a parameter.
    pub metric: Option<f64>,
    pub converged: bool,
    pub flags: String,
}

/// Wald coverage bookkeeping for one (level, flavor, coordinate) cell,
/// counted against the least-false β⁰ — never against a "true" β, which
/// need not exist under misspecification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageCell {
    pub level: f64,
    pub flavor: CovarianceFlavor,
    pub coordinate: usize,
    pub covered: usize,
    pub total: usize,
}

impl CoverageCell {
    pub fn rate(&self) -> f64 {
        self.covered as f64 / self.total as f64
    }
}

/// Extra aggregates recorded when the plain MLE is among the estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MleDiagnostics {
    pub avg_j: Vec<Vec<f64>>,
    pub avg_k: Vec<Vec<f64>>,
    pub avg_naive_cov: Vec<Vec<f64>>,
    pub avg_sandwich_cov: Vec<Vec<f64>>,
    /// Empirical covariance of √n(β̂-β⁰) across replications.
    pub scaled_beta_cov: Option<Vec<Vec<f64>>>,
    pub oracle_sandwich: Vec<Vec<f64>>,
    pub oracle_naive: Vec<Vec<f64>>,
    pub coverage: Vec<CoverageCell>,
}

/// Aggregates for one estimator across replications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub name: String,
    pub spec: EstimatorSpec,
    pub successes: usize,
    pub failures: usize,
    pub mean_beta: Option<Vec<f64>>,
    /// Sample covariance of β̂ across replications (None when < 2 successes:
    /// covariance undefined).
    pub beta_cov: Option<Vec<Vec<f64>>>,
    /// Monte Carlo standard error of each mean_beta coordinate.
    pub mean_se: Option<Vec<f64>>,
    /// The projection target this estimator converges to, when computable.
    pub oracle_target: Option<Vec<f64>>,
    /// Mean of the per-replication metric (density-ratio MAD).
    pub mean_metric: Option<f64>,
}

/// Everything [`run_experiment`] produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub scenario: Scenario,
    /// Least-false parameter of the unweighted projection.
    pub oracle_beta0: Vec<f64>,
    pub oracle_delta: f64,
    pub oracle_integration_error: f64,
    pub estimators: Vec<EstimatorSummary>,
    pub mle: Option<MleDiagnostics>,
    pub records: Vec<ReplicationRecord>,
    pub failed_replications: usize,
}

/// Running sums of the per-replication Ĵ, K̂, naive and sandwich matrices.
struct MatrixSums {
    j: DMatrix<f64>,
    k: DMatrix<f64>,
    naive: DMatrix<f64>,
    sandwich: DMatrix<f64>,
    count: usize,
}

/// Mean, sample covariance, and per-coordinate Monte Carlo standard errors.
type BetaSummary = (Option<Vec<f64>>, Option<Vec<Vec<f64>>>, Option<Vec<f64>>);

fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
}

struct RepOutcome {
    records: Vec<ReplicationRecord>,
    // Per-estimator betas / metrics in estimator order.
    betas: Vec<Option<Vec<f64>>>,
    metrics: Vec<Option<f64>>,
    // MLE extras.
    j: Option<DMatrix<f64>>,
    k: Option<DMatrix<f64>>,
    naive: Option<DMatrix<f64>>,
    sandwich: Option<DMatrix<f64>>,
    covered: Vec<(usize, bool)>, // (coverage cell index, covered)
    any_failure: bool,
}

/// Equal-mass grid over the central 90% of a one-dimensional H, used to
/// score density-ratio replications.
fn central_mass_grid(h: &CovariateDistribution, points: usize) -> Result<Vec<f64>> {
    (0..points)
        .map(|i| {
            let p = 0.05 + 0.9 * (i as f64 + 0.5) / points as f64;
            h.quantile_1d(p)
        })
        .collect()
}

/// Run every declared estimator on every replication and aggregate.
pub fn run_experiment(scenario: &Scenario) -> Result<ReplicationSummary> {
    scenario.validate()?;
    let d = scenario.h.dim();
    let p = d + 1;

    // Population targets, computed once.
    let oracle = least_false(scenario.link, &scenario.h, &scenario.truth, ORACLE_TOLERANCE)?;
    let oracle_beta0 = oracle.beta0.clone();
    let mut oracle_targets: Vec<Option<Vec<f64>>> = Vec::with_capacity(scenario.estimators.len());
    for est in &scenario.estimators {
        let target = match est {
            EstimatorSpec::Mle | EstimatorSpec::Bayes { .. } => {
                Some(oracle_beta0.as_slice().to_vec())
            }
            EstimatorSpec::WeightedMle { weight } => Some(
                least_false_weighted(
                    scenario.link,
                    &scenario.h,
                    &scenario.truth,
                    Some(weight),
                    ORACLE_TOLERANCE,
                )?
                .beta0
                .as_slice()
                .to_vec(),
            ),
            EstimatorSpec::Local { x0, kernel, bandwidth } => {
                let weight =
                    WeightSpec::Kernel { x0: clone_vec(x0), kernel: *kernel, bandwidth: bandwidth.clone() };
                Some(
                    least_false_weighted(
                        scenario.link,
                        &scenario.h,
                        &scenario.truth,
                        Some(&weight),
                        ORACLE_TOLERANCE,
                    )?
                    .beta0
                    .as_slice()
                    .to_vec(),
                )
            }
            EstimatorSpec::DensityRatio { .. } | EstimatorSpec::GaussianGroupwise => None,
        };
        oracle_targets.push(target);
    }

    // Coverage cells: level × flavor × coordinate, in a fixed order.
    let mut coverage_cells: Vec<CoverageCell> = Vec::new();
    let track_mle = scenario.estimators.iter().any(|e| matches!(e, EstimatorSpec::Mle));
    if track_mle {
        for &level in &scenario.coverage_levels {
            for flavor in [CovarianceFlavor::Naive, CovarianceFlavor::Sandwich] {
                for coordinate in 0..p {
                    coverage_cells.push(CoverageCell {
                        level,
                        flavor,
                        coordinate,
                        covered: 0,
                        total: 0,
                    });
                }
            }
        }
    }
    let density_grid: Option<Vec<f64>> = if scenario
        .estimators
        .iter()
        .any(|e| matches!(e, EstimatorSpec::DensityRatio { .. }))
    {
        if d != 1 {
            return Err(Error::InvalidScenario(
                "density-ratio scoring needs a one-dimensional scenario".into(),
            ));
        }
        Some(central_mass_grid(&scenario.h, 101)?)
    } else {
        None
    };

    let config = FitConfig::default();
    let outcomes: Vec<Result<RepOutcome>> = (0..scenario.replications)
        .into_par_iter()
        .map(|rep| {
            run_replication(
                scenario,
                rep,
                &config,
                &coverage_cells,
                density_grid.as_deref(),
                &oracle_beta0,
            )
        })
        .collect();

    // Aggregate in replication order.
    let mut records = Vec::with_capacity(scenario.replications * scenario.estimators.len());
    let mut per_est_betas: Vec<Vec<Vec<f64>>> = vec![Vec::new(); scenario.estimators.len()];
    let mut per_est_metrics: Vec<Vec<f64>> = vec![Vec::new(); scenario.estimators.len()];
    let mut failed_replications = 0usize;
    let mut mle_mats: Option<MatrixSums> = None;
    let mut mle_betas: Vec<DVector<f64>> = Vec::new();
    for outcome in outcomes {
        let outcome = outcome?;
        if outcome.any_failure {
            failed_replications += 1;
        }
        for (idx, beta) in outcome.betas.iter().enumerate() {
            if let Some(b) = beta {
                per_est_betas[idx].push(b.clone());
            }
        }
        for (idx, metric) in outcome.metrics.iter().enumerate() {
            if let Some(m) = metric {
                per_est_metrics[idx].push(*m);
            }
        }
        if let (Some(j), Some(k), Some(nv), Some(sw)) =
            (&outcome.j, &outcome.k, &outcome.naive, &outcome.sandwich)
        {
            match &mut mle_mats {
                None => {
                    mle_mats = Some(MatrixSums {
                        j: j.clone(),
                        k: k.clone(),
                        naive: nv.clone(),
                        sandwich: sw.clone(),
                        count: 1,
                    })
                }
                Some(sums) => {
                    sums.j += j;
                    sums.k += k;
                    sums.naive += nv;
                    sums.sandwich += sw;
                    sums.count += 1;
                }
            }
            if let Some(mle_idx) =
                scenario.estimators.iter().position(|e| matches!(e, EstimatorSpec::Mle))
            {
                if let Some(b) = &outcome.betas[mle_idx] {
                    mle_betas.push(DVector::from_column_slice(b));
                }
            }
        }
        for (cell_idx, covered) in &outcome.covered {
            let cell = &mut coverage_cells[*cell_idx];
            cell.total += 1;
            if *covered {
                cell.covered += 1;
            }
        }
        records.extend(outcome.records);
    }

    if failed_replications as f64 > FAILURE_BUDGET * scenario.replications as f64 {
        return Err(Error::FailureBudgetExceeded {
            failed: failed_replications,
            total: scenario.replications,
        });
    }

    // Per-estimator summaries.
    let mut estimators = Vec::with_capacity(scenario.estimators.len());
    for (idx, spec) in scenario.estimators.iter().enumerate() {
        let betas = &per_est_betas[idx];
        let successes = betas.len().max(per_est_metrics[idx].len());
        let failures = scenario.replications - successes;
        let (mean_beta, beta_cov, mean_se) = summarize_betas(betas, p);
        let mean_metric = if per_est_metrics[idx].is_empty() {
            None
        } else {
            Some(per_est_metrics[idx].iter().sum::<f64>() / per_est_metrics[idx].len() as f64)
        };
        estimators.push(EstimatorSummary {
            name: spec.name().to_string(),
            spec: spec.clone(),
            successes,
            failures,
            mean_beta,
            beta_cov,
            mean_se,
            oracle_target: oracle_targets[idx].clone(),
            mean_metric,
        });
    }

    // MLE diagnostics.
    let mle = mle_mats.map(|sums| {
        let cf = sums.count as f64;
        let scaled_beta_cov = scaled_covariance(&mle_betas, &oracle_beta0, scenario.n);
        let j_inv_oracle = nalgebra::Cholesky::new(oracle.population_j.clone())
            .map(|c| c.inverse())
            .unwrap_or_else(|| DMatrix::zeros(p, p));
        MleDiagnostics {
            avg_j: mat_rows(&(sums.j / cf)),
            avg_k: mat_rows(&(sums.k / cf)),
            avg_naive_cov: mat_rows(&(sums.naive / cf)),
            avg_sandwich_cov: mat_rows(&(sums.sandwich / cf)),
            scaled_beta_cov,
            oracle_sandwich: mat_rows(&oracle.population_sandwich),
            oracle_naive: mat_rows(&j_inv_oracle),
            coverage: coverage_cells,
        }
    });

    Ok(ReplicationSummary {
        scenario: scenario.clone(),
        oracle_beta0: oracle_beta0.as_slice().to_vec(),
        oracle_delta: oracle.delta_at_beta0,
        oracle_integration_error: oracle.integration_error_estimate,
        estimators,
        mle,
        records,
        failed_replications,
    })
}

fn clone_vec(v: &[f64]) -> Vec<f64> {
    v.to_vec()
}

fn summarize_betas(betas: &[Vec<f64>], p: usize) -> BetaSummary {
    if betas.is_empty() {
        return (None, None, None);
    }
    let r = betas.len() as f64;
    let mut mean = vec![0.0; p];
    for b in betas {
        for (m, v) in mean.iter_mut().zip(b) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= r;
    }
    if betas.len() < 2 {
        return (Some(mean), None, None);
    }
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for b in betas {
        for i in 0..p {
            for j in 0..p {
                cov[(i, j)] += (b[i] - mean[i]) * (b[j] - mean[j]);
            }
        }
    }
    cov /= r - 1.0;
    let se: Vec<f64> = (0..p).map(|i| (cov[(i, i)] / r).sqrt()).collect();
    (Some(mean), Some(mat_rows(&cov)), Some(se))
}

fn scaled_covariance(
    betas: &[DVector<f64>],
    beta0: &ParamVector,
    n: usize,
) -> Option<Vec<Vec<f64>>> {
    if betas.len() < 2 {
        return None;
    }
    let p = beta0.len();
    let b0 = beta0.to_vector();
    let sqrt_n = (n as f64).sqrt();
    let scaled: Vec<DVector<f64>> = betas.iter().map(|b| (b - &b0) * sqrt_n).collect();
    let r = scaled.len() as f64;
    let mean = scaled.iter().fold(DVector::zeros(p), |acc, v| acc + v) / r;
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for v in &scaled {
        let c = v - &mean;
        cov += &c * c.transpose();
    }
    cov /= r - 1.0;
    Some(mat_rows(&cov))
}

fn run_replication(
    scenario: &Scenario,
    rep: usize,
    config: &FitConfig,
    coverage_cells: &[CoverageCell],
    density_grid: Option<&[f64]>,
    oracle_beta0: &ParamVector,
) -> Result<RepOutcome> {
    let data = draw_dataset(scenario, rep)?;
    let mut outcome = RepOutcome {
        records: Vec::with_capacity(scenario.estimators.len()),
        betas: vec![None; scenario.estimators.len()],
        metrics: vec![None; scenario.estimators.len()],
        j: None,
        k: None,
        naive: None,
        sandwich: None,
        covered: Vec::new(),
        any_failure: false,
    };

    for (idx, est) in scenario.estimators.iter().enumerate() {
        let mut record = ReplicationRecord {
            replication: rep,
            estimator: est.name().to_string(),
            beta: None,
            metric: None,
            converged: false,
            flags: String::new(),
        };
        match est {
            EstimatorSpec::Mle => match fit_mle(scenario.link, &data, config) {
                Ok(fit) if fit.converged => {
                    record.beta = Some(fit.beta_hat.as_slice().to_vec());
                    record.converged = true;
                    match covariance_report(scenario.link, &fit, &data) {
                        Ok(report) => {
                            for (cell_idx, cell) in coverage_cells.iter().enumerate() {
                                let (lo, hi) = wald_interval(
                                    &report,
                                    &fit.beta_hat,
                                    cell.coordinate,
                                    cell.level,
                                    cell.flavor,
                                )?;
                                let target = oracle_beta0.as_slice()[cell.coordinate];
                                outcome.covered.push((cell_idx, lo <= target && target <= hi));
                            }
                            outcome.j = Some(report.j_hat);
                            outcome.k = Some(report.k_hat);
                            outcome.naive = Some(report.naive_cov);
                            outcome.sandwich = Some(report.sandwich_cov);
                        }
                        Err(e) => record.flags = format!("covariance: {e}"),
                    }
                }
                Ok(fit) => record.flags = fit.status.to_string(),
                Err(e) => record.flags = e.to_string(),
            },
            EstimatorSpec::WeightedMle { weight } => {
                let weights = weight.dataset_weights(&data);
                match data.clone().with_weights(weights).and_then(|weighted| {
                    fit_mle(scenario.link, &weighted, config)
                }) {
                    Ok(fit) if fit.converged => {
                        record.beta = Some(fit.beta_hat.as_slice().to_vec());
                        record.converged = true;
                    }
                    Ok(fit) => record.flags = fit.status.to_string(),
                    Err(e) => record.flags = e.to_string(),
                }
            }
            EstimatorSpec::Local { x0, kernel, bandwidth } => {
                let spec = KernelSpec { kernel: *kernel, bandwidth: bandwidth.clone() };
                match CovariateVector::from_features(x0)
                    .and_then(|x0v| fit_local(scenario.link, &data, &x0v, &spec, config))
                {
                    Ok(fit) if fit.converged => {
                        record.beta = Some(fit.beta_hat.as_slice().to_vec());
                        record.converged = true;
                    }
                    Ok(fit) => record.flags = fit.status.to_string(),
                    Err(e) => record.flags = e.to_string(),
                }
            }
            EstimatorSpec::Bayes { prior_mean, prior_sd, draws } => {
                let p = scenario.h.dim() + 1;
                let prior = PriorSpec::new(vec![*prior_mean; p], vec![*prior_sd; p])?;
                let seed = mix_seed(scenario.seed, 0xbabe_0000 ^ rep as u64);
                match fit_bayes_posterior_mean(scenario.link, &data, &prior, *draws, seed) {
                    Ok(beta) => {
                        record.beta = Some(beta.as_slice().to_vec());
                        record.converged = true;
                    }
                    Err(e) => record.flags = e.to_string(),
                }
            }
            EstimatorSpec::DensityRatio { kernel, bandwidth } => {
                let bw = bandwidth.as_ref().map(|h| (h.clone(), h.clone()));
                match DensityRatioClassifier::from_dataset(&data, *kernel, bw) {
                    Ok(clf) => {
                        let grid = density_grid.expect("grid prepared for density-ratio runs");
                        let mut total = 0.0;
                        let mut flagged = 0usize;
                        let mut failed = false;
                        for &x in grid {
                            match clf.probability(&[x]) {
                                Ok(est) => {
                                    total += (est.value - scenario.truth.q(&[x])).abs();
                                    if est.prior_fallback {
                                        flagged += 1;
                                    }
                                }
                                Err(e) => {
                                    record.flags = e.to_string();
                                    failed = true;
                                    break;
                                }
                            }
                        }
                        if !failed {
                            record.metric = Some(total / grid.len() as f64);
                            record.converged = true;
                            if flagged > 0 {
                                record.flags = format!("prior_fallback={flagged}");
                            }
                        }
                    }
                    Err(e) => record.flags = e.to_string(),
                }
            }
            EstimatorSpec::GaussianGroupwise => {
                match crate::oracle::fit_gaussian_groupwise(&data) {
                    Ok(beta) => {
                        record.beta = Some(beta.as_slice().to_vec());
                        record.converged = true;
                    }
                    Err(e) => record.flags = e.to_string(),
                }
            }
        }
        if record.converged {
            outcome.betas[idx] = record.beta.clone();
            outcome.metrics[idx] = record.metric;
        } else {
            outcome.any_failure = true;
        }
        outcome.records.push(record);
    }
    Ok(outcome)
}

/// One row of [`convergence_curve`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub n: usize,
    /// Mean over replications of ‖β̂-β⁰‖∞.
    pub mean_abs_deviation: f64,
    /// Relative Frobenius error of Cov(√n(β̂-β⁰)) against the oracle
    /// sandwich.
    pub scaled_cov_error: f64,
}

/// Re-run the scenario at each sample size; consistency shows up as a
/// decreasing deviation column and a stabilizing scaled-covariance column.
pub fn convergence_curve(
    template: &Scenario,
    n_values: &[usize],
    replications_per_n: usize,
) -> Result<Vec<ConvergencePoint>> {
    if !template.estimators.iter().any(|e| matches!(e, EstimatorSpec::Mle)) {
        return Err(Error::InvalidScenario("convergence curve needs the MLE estimator".into()));
    }
    let mut out = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let scenario = Scenario { n, replications: replications_per_n, ..template.clone() };
        let summary = run_experiment(&scenario)?;
        let beta0 = &summary.oracle_beta0;
        let mle_summary = summary
            .estimators
            .iter()
            .find(|e| e.name == "mle")
            .expect("mle estimator present");
        let mut dev_sum = 0.0;
        let mut dev_count = 0usize;
        for record in summary.records.iter().filter(|r| r.estimator == "mle" && r.converged) {
            if let Some(beta) = &record.beta {
                let dev = beta
                    .iter()
                    .zip(beta0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                dev_sum += dev;
                dev_count += 1;
            }
        }
        let _ = mle_summary;
        let diag = summary.mle.as_ref().expect("mle diagnostics present");
        let scaled_cov_error = match &diag.scaled_beta_cov {
            Some(cov) => {
                let mut num = 0.0;
                let mut den = 0.0;
                for (row_c, row_o) in cov.iter().zip(&diag.oracle_sandwich) {
                    for (c, o) in row_c.iter().zip(row_o) {
                        num += (c - o) * (c - o);
                        den += o * o;
                    }
                }
                (num / den).sqrt()
            }
            None => f64::NAN,
        };
        out.push(ConvergencePoint {
            n,
            mean_abs_deviation: dev_sum / dev_count.max(1) as f64,
            scaled_cov_error,
        });
    }
    Ok(out)
}

/// Write the summary as pretty JSON.
pub fn write_summary_json<W: Write>(summary: &ReplicationSummary, writer: W) -> Result<()> {
    serde_json::to_writer_pretty(writer, summary)
        .map_err(|e| Error::InvalidScenario(format!("serialization failed: {e}")))?;
    Ok(())
}

/// Write per-replication estimates as CSV: columns
/// `replication, estimator, beta_0…beta_d, converged, flags`.
pub fn write_replications_csv<W: Write>(summary: &ReplicationSummary, writer: W) -> Result<()> {
    let p = summary.scenario.h.dim() + 1;
    let mut csv_writer = csv::Writer::from_writer(writer);
    let mut header = vec!["replication".to_string(), "estimator".to_string()];
    for u in 0..p {
        header.push(format!("beta_{u}"));
    }
    header.push("converged".to_string());
    header.push("flags".to_string());
    csv_writer.write_record(&header)?;
    for record in &summary.records {
        let mut row = vec![record.replication.to_string(), record.estimator.clone()];
        match &record.beta {
            Some(beta) => row.extend(beta.iter().map(|b| format!("{b:.17e}"))),
            None => row.extend(std::iter::repeat_n(String::new(), p)),
        }
        row.push(record.converged.to_string());
        let mut flags = record.flags.clone();
        if let Some(metric) = record.metric {
            if !flags.is_empty() {
                flags.push(';');
            }
            flags.push_str(&format!("mad={metric:.6}"));
        }
        row.push(flags);
        csv_writer.write_record(&row)?;
    }
    csv_writer.flush()?;
    Ok(())
}

/// Acceptance checks a scenario file can embed; [`evaluate_checks`] turns
/// them into one verdict line each.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Checks {
    /// Mean of β̂ within this many Monte Carlo standard errors of the
    /// estimator's oracle target, per coordinate.
    pub mean_within_se: Option<f64>,
    /// Relative tolerance for Cov(√n(β̂-β⁰)) against the oracle sandwich,
    /// per entry with |oracle entry| above `cov_entry_floor`.
    pub cov_rel_tol: Option<f64>,
    #[serde(default = "default_cov_entry_floor")]
    pub cov_entry_floor: f64,
    /// Sandwich Wald coverage must lie inside this band at every declared
    /// level and coordinate; the naive side is reported alongside.
    pub coverage_band: Option<(f64, f64)>,
}

fn default_cov_entry_floor() -> f64 {
    0.01
}

/// One verdict line of [`evaluate_checks`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckVerdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Evaluate embedded acceptance checks against a finished summary.
pub fn evaluate_checks(summary: &ReplicationSummary, checks: &Checks) -> Vec<CheckVerdict> {
    let mut out = Vec::new();
    if let Some(k) = checks.mean_within_se {
        for est in &summary.estimators {
            let (Some(mean), Some(se), Some(target)) =
                (&est.mean_beta, &est.mean_se, &est.oracle_target)
            else {
                continue;
            };
            let worst = mean
                .iter()
                .zip(se)
                .zip(target)
                .map(|((m, s), t)| (m - t).abs() / s.max(1e-300))
                .fold(0.0f64, f64::max);
            out.push(CheckVerdict {
                name: format!("mean_within_{k}se[{}]", est.name),
                pass: worst <= k,
                detail: format!("max |mean-target|/se = {worst:.3}"),
            });
        }
    }
    if let Some(tol) = checks.cov_rel_tol {
        if let Some(diag) = &summary.mle {
            if let Some(cov) = &diag.scaled_beta_cov {
                let mut worst = 0.0f64;
                for (row_c, row_o) in cov.iter().zip(&diag.oracle_sandwich) {
                    for (c, o) in row_c.iter().zip(row_o) {
                        if o.abs() > checks.cov_entry_floor {
                            worst = worst.max((c - o).abs() / o.abs());
                        }
                    }
                }
                out.push(CheckVerdict {
                    name: format!("scaled_cov_within_{tol}"),
                    pass: worst <= tol,
                    detail: format!("max relative entry error = {worst:.4}"),
                });
            }
        }
    }
    if let Some((lo, hi)) = checks.coverage_band {
        if let Some(diag) = &summary.mle {
            let mut sandwich_ok = true;
            let mut naive_outside = Vec::new();
            let mut detail = String::new();
            for cell in &diag.coverage {
                let rate = cell.rate();
                detail.push_str(&format!(
                    "{:?}/level {} /coord {}: {:.4}; ",
                    cell.flavor, cell.level, cell.coordinate, rate
                ));
                match cell.flavor {
                    CovarianceFlavor::Sandwich => {
                        if !(lo <= rate && rate <= hi) {
                            sandwich_ok = false;
                        }
                    }
                    CovarianceFlavor::Naive => {
                        if !(lo <= rate && rate <= hi) {
                            naive_outside.push(cell.coordinate);
                        }
                    }
                }
            }
            out.push(CheckVerdict {
                name: format!("sandwich_coverage_in_[{lo},{hi}]"),
                pass: sandwich_ok,
                detail: detail.clone(),
            });
            out.push(CheckVerdict {
                name: "naive_coverage_outside_band_somewhere".to_string(),
                pass: !naive_outside.is_empty(),
                detail: format!("naive outside band at coordinates {naive_outside:?}"),
            });
        }
    }
    out
}
