//! Maximization of plain, weighted, and kernel-local likelihoods by Newton's
//! method, plus the importance-sampled Bayes posterior-mean estimator.
//!
//! The log-likelihood is concave for both links (the information matrix is
//! everywhere positive semidefinite), so Newton with step-halving finds the
//! unique maximizer whenever one exists. When it does not — separated data —
//! the iterates drift to infinity and the fitter reports
//! [`FitStatus::SeparationSuspected`] instead of looping.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{evaluate, log_likelihood};
use crate::model::{linear_predictor, CovariateVector, Dataset, Link, ParamVector};
use crate::numerics::SQRT_2PI;

/// Condition-number ceiling beyond which an information matrix is treated as
/// numerically singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Norm threshold at which an unconverged iterate is declared separated.
const SEPARATION_NORM: f64 = 1e3;

/// Residual threshold for the perfect-classification diagnostic: if every
/// positive-weight case has |z - q̂| below this, the likelihood supremum is
/// not attained and the "optimum" is an artifact of the flat tail.
const QUASI_SEPARATION_RESIDUAL: f64 = 1e-6;

/// How a fit ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitStatus {
    Converged,
    SeparationSuspected,
    SingularInformation,
    IterationLimit,
}

impl fmt::Display for FitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FitStatus::Converged => "Converged",
            FitStatus::SeparationSuspected => "SeparationSuspected",
            FitStatus::SingularInformation => "SingularInformation",
            FitStatus::IterationLimit => "IterationLimit",
        };
        write!(f, "{s}")
    }
}

/// Newton iteration controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Max-norm of the score below which the fit is declared converged.
    pub gradient_tolerance: f64,
    pub step_halving_limit: usize,
    /// Starting point; all zeros when absent (every fitted probability 1/2).
    pub initial_beta: Option<ParamVector>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-9,
            step_halving_limit: 30,
            initial_beta: None,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.step_halving_limit == 0 {
            return Err(Error::InvalidParameter("iteration bounds must be positive".into()));
        }
        if self.gradient_tolerance.is_nan() || self.gradient_tolerance <= 0.0 {
            return Err(Error::InvalidParameter("gradient tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of a maximum-likelihood (or weighted / local) fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub beta_hat: ParamVector,
    pub converged: bool,
    pub iterations: usize,
    pub final_score_norm: f64,
    pub log_likelihood_at_optimum: f64,
    pub status: FitStatus,
    /// Objective value after the start and each accepted step; non-decreasing
    /// up to floating-point rounding of the objective.
    pub ll_trace: Vec<f64>,
}

/// Objective value, gradient, and negative Hessian at one parameter point.
pub(crate) type Evaluation = (f64, DVector<f64>, DMatrix<f64>);

/// Generic outcome of the Newton maximizer shared by sample fits and the
/// population projection.
#[derive(Debug, Clone)]
pub(crate) struct NewtonOutcome {
    pub beta: DVector<f64>,
    pub status: FitStatus,
    pub iterations: usize,
    pub final_score_norm: f64,
    pub value: f64,
    pub trace: Vec<f64>,
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = m.symmetric_eigenvalues();
    let max = eig.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Maximize a smooth concave objective by damped Newton.
///
/// `eval_full` returns (value, gradient, negative Hessian); `eval_value` is a
/// cheap value-only evaluation used during step-halving. After the gradient
/// tolerance is met, up to two polishing steps push the score norm toward
/// machine precision, which downstream order-of-magnitude checks rely on.
pub(crate) fn newton_maximize(
    eval_full: &dyn Fn(&DVector<f64>) -> Result<Evaluation>,
    eval_value: &dyn Fn(&DVector<f64>) -> Result<f64>,
    start: DVector<f64>,
    config: &FitConfig,
) -> Result<NewtonOutcome> {
    config.validate()?;
    let mut beta = start;
    let (mut value, mut grad, mut neg_hess) = eval_full(&beta)?;
    let mut trace = vec![value];

    // Full-column-rank check at the starting point.
    if condition_number(&neg_hess) > MAX_CONDITION {
        return Ok(NewtonOutcome {
            final_score_norm: max_abs(&grad),
            beta,
            status: FitStatus::SingularInformation,
            iterations: 0,
            value,
            trace,
        });
    }

    let mut iterations = 0;
    let mut status = FitStatus::IterationLimit;
    let mut polish_left = 2usize;

    while iterations < config.max_iterations {
        let score_norm = max_abs(&grad);
        if score_norm <= config.gradient_tolerance {
            status = FitStatus::Converged;
            if polish_left == 0 {
                break;
            }
            polish_left -= 1;
        } else if max_abs(&beta) > SEPARATION_NORM {
            status = FitStatus::SeparationSuspected;
            break;
        }

        if condition_number(&neg_hess) > MAX_CONDITION {
            status = FitStatus::SingularInformation;
            break;
        }
        let chol = match Cholesky::new(neg_hess.clone()) {
            Some(c) => c,
            None => {
                status = FitStatus::SingularInformation;
                break;
            }
        };
        let direction = chol.solve(&grad);

        // Step-halving: accept the first step that does not decrease the
        // objective. The slack admits steps whose true (positive) ascent is
        // below f64 rounding of the objective, where the strict comparison
        // would otherwise stall one ulp away from the optimum.
        let slack = 1e-14 * (1.0 + value.abs());
        let mut step = 1.0f64;
        let mut accepted = None;
        for _ in 0..=config.step_halving_limit {
            let candidate = &beta + step * &direction;
            let cand_value = eval_value(&candidate)?;
            if cand_value.is_finite() && cand_value >= value - slack {
                accepted = Some((candidate, cand_value));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((candidate, cand_value)) => {
                beta = candidate;
                trace.push(cand_value);
                let (v, g, h) = eval_full(&beta)?;
                value = v;
                grad = g;
                neg_hess = h;
                if status == FitStatus::Converged && max_abs(&grad) > config.gradient_tolerance {
                    // Polishing overshot (should not happen on a concave
                    // objective); fall back to normal iteration.
                    status = FitStatus::IterationLimit;
                }
            }
            None => {
                // No acceptable step: we are at the numerical optimum.
                if max_abs(&grad) <= config.gradient_tolerance {
                    status = FitStatus::Converged;
                }
                break;
            }
        }
        if status == FitStatus::Converged && polish_left == 0 {
            break;
        }
    }

    let final_score_norm = max_abs(&grad);
    if final_score_norm <= config.gradient_tolerance && status != FitStatus::SingularInformation {
        status = FitStatus::Converged;
    }
    Ok(NewtonOutcome { beta, status, iterations, final_score_norm, value, trace })
}

/// Every positive-weight case fitted to within [`QUASI_SEPARATION_RESIDUAL`]
/// of its outcome means the data are perfectly classified and the likelihood
/// supremum is not attained.
fn perfectly_classified(link: Link, beta: &DVector<f64>, data: &Dataset) -> bool {
    data.observations().iter().enumerate().all(|(i, obs)| {
        if data.weight(i) == 0.0 {
            return true;
        }
        let t: f64 = beta.iter().zip(obs.x.as_slice()).map(|(b, x)| b * x).sum();
        (obs.z_f64() - link.mean(t)).abs() < QUASI_SEPARATION_RESIDUAL
    })
}

/// Maximum-likelihood fit; respects dataset weights, so the same call
/// implements the maximum weighted likelihood estimator.
pub fn fit_mle(link: Link, data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    let p = data.dim();
    let start = match &config.initial_beta {
        Some(b) => {
            if b.len() != p {
                return Err(Error::DimensionMismatch { expected: p, got: b.len() });
            }
            b.to_vector()
        }
        None => DVector::zeros(p),
    };

    let eval_full = |beta: &DVector<f64>| -> Result<Evaluation> {
        let pv = ParamVector::from_vector(beta)?;
        let e = evaluate(link, &pv, data)?;
        Ok((e.value, e.score, e.neg_hessian))
    };
    let eval_value = |beta: &DVector<f64>| -> Result<f64> {
        let pv = ParamVector::from_vector(beta)?;
        log_likelihood(link, &pv, data)
    };

    let mut outcome = newton_maximize(&eval_full, &eval_value, start, config)?;

    // Reclassify apparent convergence in the flat tail of a separated
    // likelihood: the score vanishes there even though no maximizer exists.
    if matches!(outcome.status, FitStatus::Converged | FitStatus::IterationLimit)
        && perfectly_classified(link, &outcome.beta, data)
    {
        outcome.status = FitStatus::SeparationSuspected;
    }

    Ok(FitResult {
        beta_hat: ParamVector::from_vector(&outcome.beta)?,
        converged: outcome.status == FitStatus::Converged,
        iterations: outcome.iterations,
        final_score_norm: outcome.final_score_norm,
        log_likelihood_at_optimum: outcome.value,
        status: outcome.status,
        ll_trace: outcome.trace,
    })
}

/// Kernel weight functions, scaled so K(0) = 1; with the uniform kernel the
/// local mass Σᵢ K((x0-xᵢ)/h) literally counts in-window points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Gaussian,
    Epanechnikov,
    Uniform,
}

impl Kernel {
    #[inline]
    pub fn value(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u * u).exp(),
            Kernel::Epanechnikov => (1.0 - u * u).max(0.0),
            Kernel::Uniform => {
                if u.abs() <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Density-normalized form (integrates to 1), used by kernel density
    /// estimation.
    #[inline]
    pub fn density(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u * u).exp() / SQRT_2PI,
            Kernel::Epanechnikov => 0.75 * (1.0 - u * u).max(0.0),
            Kernel::Uniform => {
                if u.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
        }
    }
}

/// Kernel and per-covariate bandwidths (intercept excluded) for local fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kernel: Kernel,
    pub bandwidth: Vec<f64>,
}

impl KernelSpec {
    pub fn new(kernel: Kernel, bandwidth: Vec<f64>) -> Result<Self> {
        if bandwidth.is_empty() || bandwidth.iter().any(|h| !h.is_finite() || *h <= 0.0) {
            return Err(Error::InvalidParameter("bandwidths must be positive and finite".into()));
        }
        Ok(Self { kernel, bandwidth })
    }

    /// Product kernel weight `∏_k K((x0_k - x_k)/h_k)` over the feature part.
    pub fn weight(&self, x0: &CovariateVector, x: &CovariateVector) -> f64 {
        x0.features()
            .iter()
            .zip(x.features())
            .zip(&self.bandwidth)
            .map(|((a, b), h)| self.kernel.value((a - b) / h))
            .product()
    }
}

/// Local likelihood fit at `x0`: kernel weights around the query point are
/// installed as case weights and the weighted MLE machinery does the rest.
pub fn fit_local(
    link: Link,
    data: &Dataset,
    x0: &CovariateVector,
    spec: &KernelSpec,
    config: &FitConfig,
) -> Result<FitResult> {
    if x0.len() != data.dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), got: x0.len() });
    }
    if spec.bandwidth.len() != data.dim() - 1 {
        return Err(Error::DimensionMismatch {
            expected: data.dim() - 1,
            got: spec.bandwidth.len(),
        });
    }
    let weights: Vec<f64> = data
        .observations()
        .iter()
        .enumerate()
        .map(|(i, obs)| data.weight(i) * spec.weight(x0, &obs.x))
        .collect();
    let ess: f64 = weights.iter().sum();
    let required = (data.dim() + 1) as f64;
    if ess.is_nan() || ess < required {
        return Err(Error::InsufficientLocalMass { ess, required });
    }
    let local = data.clone().with_weights(weights)?;
    fit_mle(link, &local, config)
}

/// One grid entry of [`local_probability_curve`].
#[derive(Debug)]
pub struct LocalCurvePoint {
    pub x0: CovariateVector,
    /// Local fit and the mean response `q*(x0)` evaluated at the grid point
    /// itself, or the per-point failure.
    pub result: Result<(FitResult, f64)>,
}

/// Fit `β̂(x)` locally at every grid point and evaluate `q*(x) = q_{β̂(x)}(x)`
/// there. Failed points are reported in place; the rest of the grid is still
/// computed. Grid points are independent and evaluated in parallel.
pub fn local_probability_curve(
    link: Link,
    data: &Dataset,
    grid: &[CovariateVector],
    spec: &KernelSpec,
    config: &FitConfig,
) -> Vec<LocalCurvePoint> {
    grid.par_iter()
        .map(|x0| {
            let result = fit_local(link, data, x0, spec, config).and_then(|fit| {
                if fit.converged {
                    let q = link.mean(linear_predictor(&fit.beta_hat, x0)?);
                    Ok((fit, q))
                } else {
                    Err(Error::FitFailed { status: fit.status })
                }
            });
            LocalCurvePoint { x0: x0.clone(), result }
        })
        .collect()
}

/// Independent product-Gaussian prior over β.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl PriorSpec {
    pub fn new(mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        if mean.len() != sd.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), got: sd.len() });
        }
        if sd.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidParameter(
                "prior standard deviations must be positive".into(),
            ));
        }
        Ok(Self { mean, sd })
    }

    fn log_density(&self, beta: &DVector<f64>) -> f64 {
        beta.iter()
            .zip(&self.mean)
            .zip(&self.sd)
            .map(|((b, m), s)| {
                let z = (b - m) / s;
                -0.5 * z * z - (s * SQRT_2PI).ln()
            })
            .sum()
    }
}

/// Minimum effective sample size of the importance weights.
const MIN_IMPORTANCE_ESS: f64 = 50.0;

/// Posterior mean `β* = ∫β L(β)p(β)dβ / ∫L(β)p(β)dβ` by self-normalized
/// importance sampling.
///
/// The proposal is Gaussian at β̂ with covariance `2·(1/n)Ĵ⁻¹`; asymptotic
/// normality of the posterior makes this a near-optimal envelope, and the
/// inflation factor keeps the weights bounded in the tails. Deterministic
/// given the seed; draws are evaluated in parallel on per-draw substreams.
pub fn fit_bayes_posterior_mean(
    link: Link,
    data: &Dataset,
    prior: &PriorSpec,
    draws: usize,
    seed: u64,
) -> Result<ParamVector> {
    let p = data.dim();
    if p > 6 {
        return Err(Error::InvalidParameter(format!(
            "posterior-mean estimator supports d+1 ≤ 6, got {p}"
        )));
    }
    if prior.mean.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: prior.mean.len() });
    }
    if draws < MIN_IMPORTANCE_ESS as usize {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_IMPORTANCE_ESS} draws, got {draws}"
        )));
    }

    let fit = fit_mle(link, data, &FitConfig::default())?;
    if !fit.converged {
        return Err(Error::FitFailed { status: fit.status });
    }
    let beta_hat = fit.beta_hat.to_vector();
    let info = crate::likelihood::information_matrix(link, &fit.beta_hat, data)?;
    let n = data.n() as f64;
    // Proposal covariance 2·(1/n)·Ĵ⁻¹, factored for sampling.
    let info_chol =
        Cholesky::new(info).ok_or(Error::SingularInformation { max_condition: MAX_CONDITION })?;
    let cov_prop = info_chol.inverse() * (2.0 / n);
    let prop_chol = Cholesky::new(cov_prop)
        .ok_or(Error::SingularInformation { max_condition: MAX_CONDITION })?;
    let l = prop_chol.l();
    let log_det_prop: f64 = (0..p).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;

    // Per-draw: sample β from the proposal, record log weight and the draw.
    let samples: Vec<(f64, DVector<f64>)> = (0..draws as u64)
        .into_par_iter()
        .map(|draw| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(draw);
            let eps =
                DVector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(&mut rng)));
            let beta = &beta_hat + &l * &eps;
            let pv = ParamVector::from_vector(&beta).expect("proposal draw is finite");
            let loglik = n * log_likelihood(link, &pv, data).expect("dimensions checked");
            let log_prop = -0.5 * eps.norm_squared()
                - 0.5 * (p as f64) * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * log_det_prop;
            (loglik + prior.log_density(&beta) - log_prop, beta)
        })
        .collect();

    let max_log_w = samples.iter().map(|(lw, _)| *lw).fold(f64::NEG_INFINITY, f64::max);
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    let mut weighted = DVector::<f64>::zeros(p);
    for (lw, beta) in &samples {
        let w = (lw - max_log_w).exp();
        sum_w += w;
        sum_w2 += w * w;
        weighted += w * beta;
    }
    let ess = sum_w * sum_w / sum_w2;
    if ess < MIN_IMPORTANCE_ESS {
        return Err(Error::DegenerateImportanceWeights { ess, required: MIN_IMPORTANCE_ESS });
    }
    ParamVector::from_vector(&(weighted / sum_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    /// Samples a logistic-truth dataset with x ~ Uniform(lo, hi).
    fn logistic_data(rng: &mut StdRng, n: usize, beta: &[f64], lo: f64, hi: f64) -> Dataset {
        let rows: Vec<(Vec<f64>, u8)> = (0..n)
            .map(|_| {
                let x = rng.random_range(lo..hi);
                let t = beta[0] + beta[1] * x;
                let q = crate::numerics::logistic(t);
                (vec![x], u8::from(rng.random_bool(q)))
            })
            .collect();
        Dataset::from_rows(&rows).unwrap()
    }

    #[test]
    fn intercept_only_closed_form() {
        // 30 ones out of 100: β̂0 = logit(0.3).
        let mut rows: Vec<(Vec<f64>, u8)> = Vec::new();
        for i in 0..100 {
            rows.push((vec![], u8::from(i < 30)));
        }
        let data = Dataset::from_rows(&rows).unwrap();
        let fit = fit_mle(Link::Logistic, &data, &FitConfig::default()).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.beta_hat.as_slice()[0], logit(0.3), epsilon = 1e-9);
    }

    #[test]
    fn separated_data_is_flagged() {
        let data = Dataset::from_rows(&[(vec![-1.0], 0u8), (vec![1.0], 1u8)]).unwrap();
        let fit = fit_mle(Link::Logistic, &data, &FitConfig::default()).unwrap();
        assert_eq!(fit.status, FitStatus::SeparationSuspected);
        assert!(!fit.converged);
    }

    #[test]
    fn singular_design_is_flagged() {
        // Duplicate column: x2 = x1 exactly.
        let rows: Vec<(Vec<f64>, u8)> =
            (0..20).map(|i| (vec![i as f64, i as f64], u8::from(i % 2 == 0))).collect();
        let data = Dataset::from_rows(&rows).unwrap();
        let fit = fit_mle(Link::Logistic, &data, &FitConfig::default()).unwrap();
        assert_eq!(fit.status, FitStatus::SingularInformation);
    }

    #[test]
    fn well_specified_consistency() {
        let mut rng = StdRng::seed_from_u64(42);
        let data = logistic_data(&mut rng, 100_000, &[0.5, -1.0], -2.0, 2.0);
        let fit = fit_mle(Link::Logistic, &data, &FitConfig::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.beta_hat.as_slice()[0] - 0.5).abs() <= 0.05);
        assert!((fit.beta_hat.as_slice()[1] + 1.0).abs() <= 0.05);
    }

    #[test]
    fn converged_fit_meets_first_order_condition_and_ascends() {
        let mut rng = StdRng::seed_from_u64(7);
        let data = logistic_data(&mut rng, 500, &[0.3, 0.8], -2.0, 2.0);
        for link in [Link::Logistic, Link::Probit] {
            let config = FitConfig::default();
            let fit = fit_mle(link, &data, &config).unwrap();
            assert!(fit.converged);
            assert!(fit.final_score_norm <= config.gradient_tolerance);
            for w in fit.ll_trace.windows(2) {
                let slack = 1e-12 * (1.0 + w[0].abs());
                assert!(w[1] >= w[0] - slack, "log-likelihood decreased: {:?}", w);
            }
        }
    }

    #[test]
    fn all_starting_points_reach_the_same_optimum() {
        let mut rng = StdRng::seed_from_u64(11);
        let data = logistic_data(&mut rng, 2000, &[0.2, -0.6], -2.0, 2.0);
        let reference = fit_mle(Link::Logistic, &data, &FitConfig::default()).unwrap();
        for _ in 0..20 {
            let start = ParamVector::new(vec![
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ])
            .unwrap();
            let config = FitConfig { initial_beta: Some(start), ..FitConfig::default() };
            let fit = fit_mle(Link::Logistic, &data, &config).unwrap();
            assert!(fit.converged);
            assert!(fit.beta_hat.max_abs_diff(&reference.beta_hat) <= 1e-6);
        }
    }

    #[test]
    fn weight_scaling_leaves_the_maximizer_unchanged() {
        let mut rng = StdRng::seed_from_u64(13);
        let data = logistic_data(&mut rng, 1000, &[0.1, 0.9], -2.0, 2.0);
        let weights: Vec<f64> = (0..data.n()).map(|_| rng.random_range(0.1..2.0)).collect();
        let scaled: Vec<f64> = weights.iter().map(|w| 17.5 * w).collect();
        let a = fit_mle(
            Link::Logistic,
            &data.clone().with_weights(weights).unwrap(),
            &FitConfig::default(),
        )
        .unwrap();
        let b = fit_mle(
            Link::Logistic,
            &data.clone().with_weights(scaled).unwrap(),
            &FitConfig::default(),
        )
        .unwrap();
        assert!(a.beta_hat.max_abs_diff(&b.beta_hat) <= 1e-9);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = StdRng::seed_from_u64(17);
        let data = logistic_data(&mut rng, 3000, &[-0.4, 1.2], -2.0, 2.0);
        let mut shuffled: Vec<_> = data.observations().to_vec();
        // Deterministic shuffle.
        for i in (1..shuffled.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        let permuted = Dataset::new(shuffled).unwrap();
        let a = fit_mle(Link::Logistic, &data, &FitConfig::default()).unwrap();
        let b = fit_mle(Link::Logistic, &permuted, &FitConfig::default()).unwrap();
        assert!(a.beta_hat.max_abs_diff(&b.beta_hat) <= 1e-9);
    }

    #[test]
    fn local_fit_with_huge_bandwidth_recovers_global_fit() {
        let mut rng = StdRng::seed_from_u64(19);
        let data = logistic_data(&mut rng, 5000, &[0.5, -1.0], -2.0, 2.0);
        let global = fit_mle(Link::Logistic, &data, &FitConfig::default()).unwrap();
        let spec = KernelSpec::new(Kernel::Gaussian, vec![1e6]).unwrap();
        let x0 = CovariateVector::from_features(&[0.5]).unwrap();
        let local = fit_local(Link::Logistic, &data, &x0, &spec, &FitConfig::default()).unwrap();
        assert!(local.converged);
        assert!(local.beta_hat.max_abs_diff(&global.beta_hat) <= 1e-6);
    }

    #[test]
    fn local_fit_rejects_empty_neighborhood() {
        let data = Dataset::from_rows(&[
            (vec![-1.0], 0u8),
            (vec![-0.8], 1u8),
            (vec![0.9], 1u8),
            (vec![1.0], 0u8),
        ])
        .unwrap();
        let spec = KernelSpec::new(Kernel::Uniform, vec![0.05]).unwrap();
        let x0 = CovariateVector::from_features(&[0.0]).unwrap();
        let err = fit_local(Link::Logistic, &data, &x0, &spec, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientLocalMass { .. }));
    }

    #[test]
    fn piecewise_logistic_local_slopes() {
        // Truth: slope 1 below zero, slope 3 above; both branches give q(0)=1/2.
        let mut rng = StdRng::seed_from_u64(23);
        let rows: Vec<(Vec<f64>, u8)> = (0..100_000)
            .map(|_| {
                let x = rng.random_range(-2.0..2.0);
                let t = if x < 0.0 { x } else { 3.0 * x };
                (vec![x], u8::from(rng.random_bool(crate::numerics::logistic(t))))
            })
            .collect();
        let data = Dataset::from_rows(&rows).unwrap();
        let spec = KernelSpec::new(Kernel::Gaussian, vec![0.3]).unwrap();
        let left = fit_local(
            Link::Logistic,
            &data,
            &CovariateVector::from_features(&[-1.0]).unwrap(),
            &spec,
            &FitConfig::default(),
        )
        .unwrap();
        let right = fit_local(
            Link::Logistic,
            &data,
            &CovariateVector::from_features(&[1.0]).unwrap(),
            &spec,
            &FitConfig::default(),
        )
        .unwrap();
        assert!(left.converged && right.converged);
        assert!((left.beta_hat.as_slice()[1] - 1.0).abs() <= 0.3);
        assert!((right.beta_hat.as_slice()[1] - 3.0).abs() <= 0.3);
    }

    #[test]
    fn curve_on_empty_grid_is_empty() {
        let data = Dataset::from_rows(&[(vec![0.0], 0u8), (vec![1.0], 1u8)]).unwrap();
        let spec = KernelSpec::new(Kernel::Gaussian, vec![1.0]).unwrap();
        let out =
            local_probability_curve(Link::Logistic, &data, &[], &spec, &FitConfig::default());
        assert!(out.is_empty());
    }

    #[test]
    fn curve_tracks_a_global_logistic_truth() {
        let mut rng = StdRng::seed_from_u64(29);
        let data = logistic_data(&mut rng, 100_000, &[0.5, -1.0], -2.0, 2.0);
        let spec = KernelSpec::new(Kernel::Gaussian, vec![0.5]).unwrap();
        // Central 90% of the x-range.
        let grid: Vec<CovariateVector> = (0..21)
            .map(|i| {
                let x = -1.8 + 3.6 * i as f64 / 20.0;
                CovariateVector::from_features(&[x]).unwrap()
            })
            .collect();
        let out =
            local_probability_curve(Link::Logistic, &data, &grid, &spec, &FitConfig::default());
        for point in &out {
            let (_, q_star) = point.result.as_ref().unwrap();
            let x = point.x0.as_slice()[1];
            let q_true = crate::numerics::logistic(0.5 - x);
            assert!(
                (q_star - q_true).abs() <= 0.05,
                "x = {x}: q* = {q_star}, truth = {q_true}"
            );
        }
    }

    #[test]
    fn curve_under_constant_truth_stays_near_half() {
        let mut rng = StdRng::seed_from_u64(31);
        let rows: Vec<(Vec<f64>, u8)> = (0..10_000)
            .map(|_| (vec![rng.random_range(-2.0..2.0)], u8::from(rng.random_bool(0.5))))
            .collect();
        let data = Dataset::from_rows(&rows).unwrap();
        let spec = KernelSpec::new(Kernel::Gaussian, vec![0.5]).unwrap();
        let grid: Vec<CovariateVector> = (0..21)
            .map(|i| CovariateVector::from_features(&[-1.8 + 3.6 * i as f64 / 20.0]).unwrap())
            .collect();
        let out =
            local_probability_curve(Link::Logistic, &data, &grid, &spec, &FitConfig::default());
        for point in &out {
            let (_, q_star) = point.result.as_ref().unwrap();
            assert!((0.45..=0.55).contains(q_star), "q* = {q_star}");
        }
    }

    #[test]
    fn bayes_posterior_mean_tracks_the_mle() {
        let mut rng = StdRng::seed_from_u64(37);
        let data = logistic_data(&mut rng, 10_000, &[0.5, -1.0], -2.0, 2.0);
        let mle = fit_mle(Link::Logistic, &data, &FitConfig::default()).unwrap();
        let wide = PriorSpec::new(vec![0.0, 0.0], vec![10.0, 10.0]).unwrap();
        let wider = PriorSpec::new(vec![0.0, 0.0], vec![50.0, 50.0]).unwrap();
        let b1 = fit_bayes_posterior_mean(Link::Logistic, &data, &wide, 4000, 99).unwrap();
        let b2 = fit_bayes_posterior_mean(Link::Logistic, &data, &wider, 4000, 99).unwrap();
        assert!(b1.max_abs_diff(&mle.beta_hat) <= 0.02);
        assert!(b1.max_abs_diff(&b2) <= 0.02);
        // Determinism: same seed, same answer.
        let b1_again = fit_bayes_posterior_mean(Link::Logistic, &data, &wide, 4000, 99).unwrap();
        assert_eq!(b1.as_slice(), b1_again.as_slice());
    }

    #[test]
    fn bayes_posterior_mean_under_misspecification() {
        // Step-function truth; the posterior mean still tracks the MLE.
        let mut rng = StdRng::seed_from_u64(41);
        let rows: Vec<(Vec<f64>, u8)> = (0..10_000)
            .map(|_| {
                let x: f64 = rng.random_range(-1.5..1.5);
                let q = if x < 0.0 { 0.2 } else { 0.9 };
                (vec![x], u8::from(rng.random_bool(q)))
            })
            .collect();
        let data = Dataset::from_rows(&rows).unwrap();
        let mle = fit_mle(Link::Logistic, &data, &FitConfig::default()).unwrap();
        let prior = PriorSpec::new(vec![0.0, 0.0], vec![10.0, 10.0]).unwrap();
        let b = fit_bayes_posterior_mean(Link::Logistic, &data, &prior, 4000, 123).unwrap();
        assert!(b.max_abs_diff(&mle.beta_hat) <= 0.05);
    }
}
