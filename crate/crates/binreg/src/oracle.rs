//! Population-level quantities for declared true models: the least-false
//! parameter β⁰, the Kullback–Leibler distance Δ (plain and weighted), and
//! the population matrices J(β), K(β).
//!
//! Everything here is an expectation against a covariate distribution H. The
//! sample fitter maximizes `(1/n)Σ[z_iβᵗx_i - log(1+exp(βᵗx_i))]`; its
//! population limit replaces the average by
//! `∫[q(x)βᵗx - log(1+exp(βᵗx))]H(dx)`, and the maximizer of that limit —
//! equivalently the minimizer of `Δ(q, q_β) = ∫D(q(x), q_β(x))H(dx)` — is
//! what the MLE is actually estimating. The same Newton machinery as the
//! sample problem runs here, with quadrature replacing summation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Distribution as RandDistribution;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;
use statrs::function::beta::{beta_reg, ln_beta};

use crate::error::{Error, Result};
use crate::fit::{newton_maximize, FitConfig, FitStatus, Kernel, KernelSpec};
use crate::model::{Dataset, Link, ParamVector};
use crate::numerics::{gauss_legendre, halton_points, normal_cdf, normal_pdf, normal_quantile};

/// Nodes per dimension of the fine tensor Gauss–Legendre grid.
const GL_NODES: usize = 64;
/// Nodes per dimension of the coarse grid used for the error estimate.
const GL_NODES_COARSE: usize = 32;
/// Quasi-Monte Carlo sample size for d > 3.
const QMC_POINTS: usize = 1 << 16;
/// Half-width, in standard deviations, of the truncated Gaussian domain.
const GAUSSIAN_TAIL_SD: f64 = 8.5;
/// Dimension bound above which tensor grids give way to quasi-Monte Carlo.
const MAX_TENSOR_DIM: usize = 3;

/// One coordinate's marginal in a product density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Marginal {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, sd: f64 },
    Beta { alpha: f64, beta: f64 },
}

impl Marginal {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Marginal::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            Marginal::Gaussian { mean, sd } => mean.is_finite() && *sd > 0.0 && sd.is_finite(),
            Marginal::Beta { alpha, beta } => {
                *alpha > 0.0 && *beta > 0.0 && alpha.is_finite() && beta.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid marginal {self:?}")))
        }
    }

    fn density(&self, x: f64) -> f64 {
        match self {
            Marginal::Uniform { lo, hi } => {
                if x >= *lo && x <= *hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            Marginal::Gaussian { mean, sd } => normal_pdf((x - mean) / sd) / sd,
            Marginal::Beta { alpha, beta } => {
                if x <= 0.0 || x >= 1.0 {
                    0.0
                } else {
                    ((alpha - 1.0) * x.ln() + (beta - 1.0) * (1.0 - x).ln() - ln_beta(*alpha, *beta))
                        .exp()
                }
            }
        }
    }

    fn cdf(&self, x: f64) -> f64 {
        match self {
            Marginal::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            Marginal::Gaussian { mean, sd } => normal_cdf((x - mean) / sd),
            Marginal::Beta { alpha, beta } => {
                if x <= 0.0 {
                    0.0
                } else if x >= 1.0 {
                    1.0
                } else {
                    beta_reg(*alpha, *beta, x)
                }
            }
        }
    }

    fn quantile(&self, p: f64) -> f64 {
        match self {
            Marginal::Uniform { lo, hi } => lo + (hi - lo) * p,
            Marginal::Gaussian { mean, sd } => mean + sd * normal_quantile(p),
            Marginal::Beta { alpha, beta } => statrs::distribution::Beta::new(*alpha, *beta)
                .expect("validated shapes")
                .inverse_cdf(p),
        }
    }

    /// Integration interval covering (essentially) all mass.
    fn support(&self) -> (f64, f64) {
        match self {
            Marginal::Uniform { lo, hi } => (*lo, *hi),
            Marginal::Gaussian { mean, sd } => {
                (mean - GAUSSIAN_TAIL_SD * sd, mean + GAUSSIAN_TAIL_SD * sd)
            }
            Marginal::Beta { .. } => (0.0, 1.0),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Marginal::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            Marginal::Gaussian { mean, sd } => {
                rand_distr::Normal::new(*mean, *sd).expect("validated").sample(rng)
            }
            Marginal::Beta { alpha, beta } => {
                rand_distr::Beta::new(*alpha, *beta).expect("validated").sample(rng)
            }
        }
    }
}

/// Product density over the feature coordinates, used both as a covariate
/// distribution and as a class density in two-class mixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductDensity {
    pub marginals: Vec<Marginal>,
}

impl ProductDensity {
    pub fn new(marginals: Vec<Marginal>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::InvalidParameter("product density needs ≥ 1 coordinate".into()));
        }
        for m in &marginals {
            m.validate()?;
        }
        Ok(Self { marginals })
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn density(&self, features: &[f64]) -> f64 {
        self.marginals.iter().zip(features).map(|(m, &x)| m.density(x)).product()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.marginals.iter().map(|m| m.sample(rng)).collect()
    }
}

/// Two class densities and their prior probabilities; the marginal
/// `h(x) = π₀f₀(x) + π₁f₁(x)` is the covariate distribution of a randomly
/// sampled case, and the induced conditional `q(x) = π₁f₁(x)/h(x)` is the
/// exact true model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoClassMixture {
    pub pi0: f64,
    pub f0: ProductDensity,
    pub pi1: f64,
    pub f1: ProductDensity,
}

impl TwoClassMixture {
    pub fn new(pi0: f64, f0: ProductDensity, pi1: f64, f1: ProductDensity) -> Result<Self> {
        if pi0 <= 0.0 || pi1 <= 0.0 || (pi0 + pi1 - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "class priors must be positive and sum to 1, got ({pi0}, {pi1})"
            )));
        }
        if f0.dim() != f1.dim() {
            return Err(Error::DimensionMismatch { expected: f0.dim(), got: f1.dim() });
        }
        // Renormalize exactly.
        let total = pi0 + pi1;
        Ok(Self { pi0: pi0 / total, f0, pi1: pi1 / total, f1 })
    }

    pub fn dim(&self) -> usize {
        self.f0.dim()
    }

    /// Marginal density `h(x)`.
    pub fn marginal_density(&self, features: &[f64]) -> f64 {
        self.pi0 * self.f0.density(features) + self.pi1 * self.f1.density(features)
    }

    /// Conditional probability `q(x) = π₁f₁(x)/h(x)`; where both class
    /// densities vanish the prior π₁ is returned.
    pub fn conditional(&self, features: &[f64]) -> f64 {
        let a0 = self.pi0 * self.f0.density(features);
        let a1 = self.pi1 * self.f1.density(features);
        if a0 + a1 == 0.0 {
            self.pi1
        } else {
            a1 / (a0 + a1)
        }
    }
}

/// Covariate distribution H(dx) over the feature coordinates (the intercept
/// is handled internally).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateDistribution {
    FiniteSupport { points: Vec<Vec<f64>>, probabilities: Vec<f64> },
    ProductUniform { bounds: Vec<(f64, f64)> },
    ProductGaussian { mean: Vec<f64>, sd: Vec<f64> },
    ProductBeta { shapes: Vec<(f64, f64)> },
    TwoClassMixture(TwoClassMixture),
}

impl CovariateDistribution {
    pub fn finite_support(points: Vec<Vec<f64>>, probabilities: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != probabilities.len() {
            return Err(Error::InvalidParameter(
                "finite support needs matching non-empty points and probabilities".into(),
            ));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: 0 });
        }
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidParameter("probabilities must be non-negative".into()));
        }
        let total: f64 = probabilities.iter().sum();
        if total <= 0.0 || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "probabilities must sum to 1, got {total}"
            )));
        }
        let probabilities = probabilities.iter().map(|p| p / total).collect();
        Ok(Self::FiniteSupport { points, probabilities })
    }

    /// Number of feature coordinates d.
    pub fn dim(&self) -> usize {
        match self {
            Self::FiniteSupport { points, .. } => points[0].len(),
            Self::ProductUniform { bounds } => bounds.len(),
            Self::ProductGaussian { mean, .. } => mean.len(),
            Self::ProductBeta { shapes } => shapes.len(),
            Self::TwoClassMixture(mix) => mix.dim(),
        }
    }

    fn marginals(&self) -> Result<Vec<Marginal>> {
        let out: Vec<Marginal> = match self {
            Self::ProductUniform { bounds } => {
                bounds.iter().map(|&(lo, hi)| Marginal::Uniform { lo, hi }).collect()
            }
            Self::ProductGaussian { mean, sd } => {
                if mean.len() != sd.len() {
                    return Err(Error::DimensionMismatch { expected: mean.len(), got: sd.len() });
                }
                mean.iter()
                    .zip(sd)
                    .map(|(&m, &s)| Marginal::Gaussian { mean: m, sd: s })
                    .collect()
            }
            Self::ProductBeta { shapes } => shapes
                .iter()
                .map(|&(alpha, beta)| Marginal::Beta { alpha, beta })
                .collect(),
            _ => {
                return Err(Error::UnsupportedDistribution(
                    "not a plain product family".into(),
                ))
            }
        };
        for m in &out {
            m.validate()?;
        }
        Ok(out)
    }

    /// Draw one feature vector.
    pub fn sample_features<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Self::FiniteSupport { points, probabilities } => {
                let u: f64 = rng.random_range(0.0..1.0);
                let mut acc = 0.0;
                for (point, p) in points.iter().zip(probabilities) {
                    acc += p;
                    if u < acc {
                        return point.clone();
                    }
                }
                points.last().expect("non-empty support").clone()
            }
            Self::TwoClassMixture(mix) => {
                if rng.random_bool(mix.pi1) {
                    mix.f1.sample(rng)
                } else {
                    mix.f0.sample(rng)
                }
            }
            _ => {
                let marginals = self.marginals().expect("validated product family");
                marginals.iter().map(|m| m.sample(rng)).collect()
            }
        }
    }

    /// CDF of the single feature coordinate; d = 1 only.
    pub fn cdf_1d(&self, x: f64) -> Result<f64> {
        if self.dim() != 1 {
            return Err(Error::UnsupportedDistribution("cdf_1d needs d = 1".into()));
        }
        Ok(match self {
            Self::FiniteSupport { points, probabilities } => points
                .iter()
                .zip(probabilities)
                .filter(|(p, _)| p[0] <= x)
                .map(|(_, w)| w)
                .sum(),
            Self::TwoClassMixture(mix) => {
                let f0 = marginal_from_product(&mix.f0);
                let f1 = marginal_from_product(&mix.f1);
                mix.pi0 * f0.cdf(x) + mix.pi1 * f1.cdf(x)
            }
            _ => self.marginals()?[0].cdf(x),
        })
    }

    /// Quantile of the single feature coordinate by bisection on the CDF.
    pub fn quantile_1d(&self, p: f64) -> Result<f64> {
        if p <= 0.0 || p >= 1.0 || p.is_nan() {
            return Err(Error::InvalidParameter(format!("quantile needs p in (0,1), got {p}")));
        }
        if self.dim() != 1 {
            return Err(Error::UnsupportedDistribution("quantile_1d needs d = 1".into()));
        }
        let (mut lo, mut hi) = match self {
            Self::FiniteSupport { points, .. } => {
                let xs: Vec<f64> = points.iter().map(|pt| pt[0]).collect();
                let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo - 1.0, hi + 1.0)
            }
            Self::TwoClassMixture(mix) => {
                let s0 = marginal_from_product(&mix.f0).support();
                let s1 = marginal_from_product(&mix.f1).support();
                (s0.0.min(s1.0) - 1.0, s0.1.max(s1.1) + 1.0)
            }
            _ => {
                let s = self.marginals()?[0].support();
                (s.0 - 1.0, s.1 + 1.0)
            }
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf_1d(mid)? < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

fn marginal_from_product(f: &ProductDensity) -> &Marginal {
    &f.marginals[0]
}

/// Feature transformation applied before the linear predictor of a
/// logistic-in-features true model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// φ(x) = x.
    Identity,
    /// φ(x) = (log x₁, log(1-x₁), …, log x_d, log(1-x_d)); the map in which
    /// Beta class densities induce an exactly linear logit.
    LogPairs,
}

impl FeatureMap {
    /// Parameter length d+1-style requirement for feature dimension d.
    pub fn param_len(self, d: usize) -> usize {
        match self {
            FeatureMap::Identity => d + 1,
            FeatureMap::LogPairs => 2 * d + 1,
        }
    }

    pub fn apply(self, features: &[f64]) -> Vec<f64> {
        match self {
            FeatureMap::Identity => features.to_vec(),
            FeatureMap::LogPairs => features
                .iter()
                .flat_map(|&x| [x.ln(), (1.0 - x).ln()])
                .collect(),
        }
    }
}

/// Declared true conditional probability q(x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrueModel {
    /// Exactly logistic in (possibly transformed) features.
    LogisticInFeatures { beta: ParamVector, map: FeatureMap },
    /// Piecewise-constant in one coordinate: `values[j]` on the j-th
    /// interval, moving up at each threshold (x ≥ t takes the next piece).
    StepFunction { coordinate: usize, thresholds: Vec<f64>, values: Vec<f64> },
    /// Logistic with different parameters on the two sides of a threshold.
    PiecewiseLogistic { coordinate: usize, threshold: f64, left: ParamVector, right: ParamVector },
    /// The exact conditional probability induced by a two-class mixture.
    MixtureRatio(TwoClassMixture),
    /// One-dimensional tabulated curve, linearly interpolated and clamped.
    Tabulated { xs: Vec<f64>, qs: Vec<f64> },
}

impl TrueModel {
    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            TrueModel::LogisticInFeatures { beta, map } => {
                if beta.len() != map.param_len(d) {
                    return Err(Error::DimensionMismatch {
                        expected: map.param_len(d),
                        got: beta.len(),
                    });
                }
            }
            TrueModel::StepFunction { coordinate, thresholds, values } => {
                if *coordinate >= d {
                    return Err(Error::InvalidParameter(format!(
                        "step coordinate {coordinate} out of range for d = {d}"
                    )));
                }
                if values.len() != thresholds.len() + 1 {
                    return Err(Error::InvalidParameter(
                        "step function needs one more value than thresholds".into(),
                    ));
                }
                if thresholds.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidParameter(
                        "step thresholds must be strictly increasing".into(),
                    ));
                }
                if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidParameter("step values must lie in [0,1]".into()));
                }
            }
            TrueModel::PiecewiseLogistic { coordinate, left, right, .. } => {
                if *coordinate >= d {
                    return Err(Error::InvalidParameter(format!(
                        "piecewise coordinate {coordinate} out of range for d = {d}"
                    )));
                }
                if left.len() != d + 1 || right.len() != d + 1 {
                    return Err(Error::DimensionMismatch { expected: d + 1, got: left.len() });
                }
            }
            TrueModel::MixtureRatio(mix) => {
                if mix.dim() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: mix.dim() });
                }
            }
            TrueModel::Tabulated { xs, qs } => {
                if d != 1 {
                    return Err(Error::UnsupportedDistribution(
                        "tabulated truth supports d = 1 only".into(),
                    ));
                }
                if xs.len() < 2 || xs.len() != qs.len() {
                    return Err(Error::InvalidParameter(
                        "tabulated truth needs matching xs/qs with ≥ 2 entries".into(),
                    ));
                }
                if xs.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidParameter(
                        "tabulated grid must be strictly increasing".into(),
                    ));
                }
                if qs.iter().any(|q| !(0.0..=1.0).contains(q)) {
                    return Err(Error::InvalidParameter("tabulated q must lie in [0,1]".into()));
                }
            }
        }
        Ok(())
    }

    /// The true probability q(x) at a feature vector.
    pub fn q(&self, features: &[f64]) -> f64 {
        match self {
            TrueModel::LogisticInFeatures { beta, map } => {
                let phi = map.apply(features);
                let b = beta.as_slice();
                let t = b[0] + b[1..].iter().zip(&phi).map(|(bj, xj)| bj * xj).sum::<f64>();
                crate::numerics::logistic(t)
            }
            TrueModel::StepFunction { coordinate, thresholds, values } => {
                let x = features[*coordinate];
                let idx = thresholds.iter().filter(|t| x >= **t).count();
                values[idx]
            }
            TrueModel::PiecewiseLogistic { coordinate, threshold, left, right } => {
                let branch = if features[*coordinate] < *threshold { left } else { right };
                let b = branch.as_slice();
                let t = b[0] + b[1..].iter().zip(features).map(|(bj, xj)| bj * xj).sum::<f64>();
                crate::numerics::logistic(t)
            }
            TrueModel::MixtureRatio(mix) => mix.conditional(features),
            TrueModel::Tabulated { xs, qs } => {
                let x = features[0];
                if x <= xs[0] {
                    return qs[0];
                }
                if x >= *xs.last().expect("non-empty") {
                    return *qs.last().expect("non-empty");
                }
                let idx = xs.partition_point(|&v| v <= x) - 1;
                let frac = (x - xs[idx]) / (xs[idx + 1] - xs[idx]);
                qs[idx] + frac * (qs[idx + 1] - qs[idx])
            }
        }
    }
}

/// Build the exact conditional probability of a two-class mixture; the
/// mixture's marginal h(x) is the matching covariate distribution via
/// `CovariateDistribution::TwoClassMixture`.
pub fn mixture_truth(mix: &TwoClassMixture) -> TrueModel {
    TrueModel::MixtureRatio(mix.clone())
}

/// Closed-form logit of a two-class mixture when one exists: equal-sd
/// product Gaussians give a logit linear in x with slope `(μ₁-μ₀)/σ²` per
/// coordinate; product Betas give a logit linear in `(log x, log(1-x))` with
/// coefficients `a₁-a₀` and `b₁-b₀`.
pub fn mixture_closed_form(mix: &TwoClassMixture) -> Option<(FeatureMap, ParamVector)> {
    let prior_term = (mix.pi1 / mix.pi0).ln();
    let pairs: Vec<(&Marginal, &Marginal)> =
        mix.f0.marginals.iter().zip(&mix.f1.marginals).collect();
    if pairs.iter().all(|(m0, m1)| {
        matches!((m0, m1), (Marginal::Gaussian { sd: s0, .. }, Marginal::Gaussian { sd: s1, .. }) if s0 == s1)
    }) {
        let mut beta = vec![prior_term];
        for (m0, m1) in &pairs {
            let (Marginal::Gaussian { mean: mu0, sd }, Marginal::Gaussian { mean: mu1, .. }) =
                (m0, m1)
            else {
                unreachable!()
            };
            let var = sd * sd;
            beta[0] += (mu0 * mu0 - mu1 * mu1) / (2.0 * var);
            beta.push((mu1 - mu0) / var);
        }
        return Some((FeatureMap::Identity, ParamVector::new(beta).ok()?));
    }
    if pairs
        .iter()
        .all(|(m0, m1)| matches!((m0, m1), (Marginal::Beta { .. }, Marginal::Beta { .. })))
    {
        let mut beta = vec![prior_term];
        for (m0, m1) in &pairs {
            let (
                Marginal::Beta { alpha: a0, beta: b0 },
                Marginal::Beta { alpha: a1, beta: b1 },
            ) = (m0, m1)
            else {
                unreachable!()
            };
            beta[0] += ln_beta(*a0, *b0) - ln_beta(*a1, *b1);
            beta.push(a1 - a0);
            beta.push(b1 - b0);
        }
        return Some((FeatureMap::LogPairs, ParamVector::new(beta).ok()?));
    }
    None
}

/// Weight function w(x) for weighted likelihoods and distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSpec {
    /// 1 on the half-space `x_coordinate ≥ threshold` (or ≤ when `above` is
    /// false), 0 elsewhere.
    Indicator { coordinate: usize, threshold: f64, above: bool },
    /// Product kernel centered at a query point.
    Kernel { x0: Vec<f64>, kernel: Kernel, bandwidth: Vec<f64> },
}

impl WeightSpec {
    pub fn evaluate(&self, features: &[f64]) -> f64 {
        match self {
            WeightSpec::Indicator { coordinate, threshold, above } => {
                let hit = if *above {
                    features[*coordinate] >= *threshold
                } else {
                    features[*coordinate] <= *threshold
                };
                if hit {
                    1.0
                } else {
                    0.0
                }
            }
            WeightSpec::Kernel { x0, kernel, bandwidth } => x0
                .iter()
                .zip(features)
                .zip(bandwidth)
                .map(|((a, b), h)| kernel.value((a - b) / h))
                .product(),
        }
    }

    /// Per-case weights for a dataset (sample-side counterpart of Δ_w).
    pub fn dataset_weights(&self, data: &Dataset) -> Vec<f64> {
        data.observations().iter().map(|obs| self.evaluate(obs.x.features())).collect()
    }

    /// A kernel weight identical to the one [`crate::fit::fit_local`]
    /// installs at `x0`.
    pub fn from_kernel(x0: Vec<f64>, spec: &KernelSpec) -> Self {
        WeightSpec::Kernel { x0, kernel: spec.kernel, bandwidth: spec.bandwidth.clone() }
    }
}

/// A value together with its quadrature error estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Integrated {
    pub value: f64,
    pub error_estimate: f64,
}

/// Least-false parameter and the population quantities evaluated there.
#[derive(Debug, Clone)]
pub struct LeastFalseResult {
    pub beta0: ParamVector,
    /// Δ(q, q_{β⁰}) ≥ 0, zero only when the model is correct on supp(H).
    pub delta_at_beta0: f64,
    pub population_j: DMatrix<f64>,
    pub population_k: DMatrix<f64>,
    /// J(β⁰)⁻¹ K(β⁰) J(β⁰)⁻¹.
    pub population_sandwich: DMatrix<f64>,
    pub integration_error_estimate: f64,
    /// Max-norm of the population score at β⁰ on the integration grid.
    pub score_norm_at_beta0: f64,
}

/// Integration grid node: intercept-augmented point, H-weight, true q, and
/// the optional weight-function value.
struct Node {
    x: DVector<f64>,
    w: f64,
    q: f64,
    wfun: f64,
}

struct Grid {
    nodes: Vec<Node>,
    /// |1 - Σw|, folded into error estimates (nonzero for truncated or
    /// singular densities).
    mass_defect: f64,
}

/// Coordinates at which the integrand is non-smooth: thresholds of step and
/// piecewise truths, indicator edges, and compact-kernel boundaries. Tensor
/// grids split at these points so Gauss–Legendre sees only smooth panels.
fn breakpoints_for(truth: &TrueModel, weight: Option<&WeightSpec>, d: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); d];
    match truth {
        TrueModel::StepFunction { coordinate, thresholds, .. } => {
            out[*coordinate].extend(thresholds)
        }
        TrueModel::PiecewiseLogistic { coordinate, threshold, .. } => {
            out[*coordinate].push(*threshold)
        }
        TrueModel::Tabulated { xs, .. } => out[0].extend(&xs[1..xs.len() - 1]),
        _ => {}
    }
    if let Some(w) = weight {
        match w {
            WeightSpec::Indicator { coordinate, threshold, .. } => {
                out[*coordinate].push(*threshold)
            }
            WeightSpec::Kernel { x0, kernel, bandwidth } if *kernel != Kernel::Gaussian => {
                for (c, (x, h)) in x0.iter().zip(bandwidth).enumerate() {
                    out[c].push(x - h);
                    out[c].push(x + h);
                }
            }
            _ => {}
        }
    }
    for v in &mut out {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    out
}

fn tensor_grid(
    marginals: &[Marginal],
    breaks: &[Vec<f64>],
    nodes_per_dim: usize,
    scale: f64,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let (xi, wi) = gauss_legendre(nodes_per_dim);
    let mut per_dim: Vec<Vec<(f64, f64)>> = Vec::with_capacity(marginals.len());
    for (dim, m) in marginals.iter().enumerate() {
        let (lo, hi) = m.support();
        // Panel edges: support ends plus any interior breakpoints.
        let mut edges = vec![lo];
        edges.extend(breaks[dim].iter().copied().filter(|b| *b > lo && *b < hi));
        edges.push(hi);
        let mut dim_nodes = Vec::with_capacity(nodes_per_dim * (edges.len() - 1));
        for panel in edges.windows(2) {
            let half = 0.5 * (panel[1] - panel[0]);
            let mid = 0.5 * (panel[1] + panel[0]);
            dim_nodes.extend(xi.iter().zip(&wi).map(|(&x, &w)| {
                let point = mid + half * x;
                (point, w * half * m.density(point))
            }));
        }
        per_dim.push(dim_nodes);
    }
    // Cartesian product.
    let mut out: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), scale)];
    for dim_nodes in &per_dim {
        let mut next = Vec::with_capacity(out.len() * dim_nodes.len());
        for (prefix, w) in &out {
            for (x, wx) in dim_nodes {
                let mut p = prefix.clone();
                p.push(*x);
                next.push((p, w * wx));
            }
        }
        out = next;
    }
    Ok(out)
}

fn feature_grid(
    h: &CovariateDistribution,
    breaks: &[Vec<f64>],
    nodes_per_dim: usize,
    qmc_points: usize,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let d = h.dim();
    match h {
        CovariateDistribution::FiniteSupport { points, probabilities } => {
            Ok(points.iter().cloned().zip(probabilities.iter().cloned()).collect())
        }
        CovariateDistribution::TwoClassMixture(mix) => {
            let mut out = component_grid(&mix.f0, mix.pi0, breaks, nodes_per_dim, qmc_points)?;
            out.extend(component_grid(&mix.f1, mix.pi1, breaks, nodes_per_dim, qmc_points)?);
            Ok(out)
        }
        _ => {
            let marginals = h.marginals()?;
            if d <= MAX_TENSOR_DIM {
                tensor_grid(&marginals, breaks, nodes_per_dim, 1.0)
            } else {
                qmc_grid(&marginals, 1.0, qmc_points)
            }
        }
    }
}

fn component_grid(
    f: &ProductDensity,
    scale: f64,
    breaks: &[Vec<f64>],
    nodes_per_dim: usize,
    qmc_points: usize,
) -> Result<Vec<(Vec<f64>, f64)>> {
    if f.dim() <= MAX_TENSOR_DIM {
        tensor_grid(&f.marginals, breaks, nodes_per_dim, scale)
    } else {
        qmc_grid(&f.marginals, scale, qmc_points)
    }
}

fn qmc_grid(
    marginals: &[Marginal],
    scale: f64,
    count: usize,
) -> Result<Vec<(Vec<f64>, f64)>> {
    let d = marginals.len();
    if d > 8 {
        return Err(Error::UnsupportedDistribution(format!(
            "quasi-Monte Carlo backend supports d ≤ 8, got {d}"
        )));
    }
    let w = scale / count as f64;
    Ok(halton_points(d, count)
        .into_iter()
        .map(|u| {
            let point: Vec<f64> =
                marginals.iter().zip(&u).map(|(m, &ui)| m.quantile(ui)).collect();
            (point, w)
        })
        .collect())
}

fn build_grid(
    h: &CovariateDistribution,
    truth: &TrueModel,
    weight: Option<&WeightSpec>,
    nodes_per_dim: usize,
    qmc_points: usize,
) -> Result<Grid> {
    truth.validate(h.dim())?;
    let breaks = breakpoints_for(truth, weight, h.dim());
    let raw = feature_grid(h, &breaks, nodes_per_dim, qmc_points)?;
    let mass: f64 = raw.iter().map(|(_, w)| w).sum();
    let nodes = raw
        .into_iter()
        .map(|(features, w)| {
            let q = truth.q(&features);
            let wfun = weight.map_or(1.0, |ws| ws.evaluate(&features));
            let mut x = Vec::with_capacity(features.len() + 1);
            x.push(1.0);
            x.extend_from_slice(&features);
            Node { x: DVector::from_vec(x), w, q, wfun }
        })
        .collect();
    Ok(Grid { nodes, mass_defect: (1.0 - mass).abs() })
}

impl Grid {
    /// Expected normalized log-likelihood at β: the population objective.
    fn objective(&self, link: Link, beta: &DVector<f64>) -> f64 {
        let mut acc = crate::numerics::KahanSum::new();
        for node in &self.nodes {
            let wv = node.w * node.wfun;
            if wv == 0.0 {
                continue;
            }
            let t = beta.dot(&node.x);
            let term = node.q * link.loglik_term(t, true)
                + (1.0 - node.q) * link.loglik_term(t, false);
            acc.add(wv * term);
        }
        acc.value()
    }

    /// Population score: gradient of the objective in β; for the logistic
    /// link this is `∫x(q(x) - q_β(x))w(x)H(dx)`.
    fn score(&self, link: Link, beta: &DVector<f64>) -> DVector<f64> {
        let p = beta.len();
        let mut acc = vec![crate::numerics::KahanSum::new(); p];
        for node in &self.nodes {
            let wv = node.w * node.wfun;
            if wv == 0.0 {
                continue;
            }
            let t = beta.dot(&node.x);
            let u = node.q * link.score_residual(t, true)
                + (1.0 - node.q) * link.score_residual(t, false);
            let s = wv * u;
            for (a, xj) in acc.iter_mut().zip(node.x.iter()) {
                a.add(s * xj);
            }
        }
        DVector::from_iterator(p, acc.iter().map(|a| a.value()))
    }

    /// Population negative Hessian of the objective; for the logistic link
    /// this is exactly J(β) = ∫xxᵗq_β(1-q_β)dH (with the weight folded in).
    fn neg_hessian(&self, link: Link, beta: &DVector<f64>) -> DMatrix<f64> {
        let p = beta.len();
        let mut acc = vec![crate::numerics::KahanSum::new(); p * p];
        for node in &self.nodes {
            let wv = node.w * node.wfun;
            if wv == 0.0 {
                continue;
            }
            let t = beta.dot(&node.x);
            let wt = node.q * link.neghess_weight(t, true)
                + (1.0 - node.q) * link.neghess_weight(t, false);
            let s = wv * wt;
            for r in 0..p {
                let xr = s * node.x[r];
                for c in r..p {
                    acc[r * p + c].add(xr * node.x[c]);
                }
            }
        }
        symmetric_from_upper(p, &acc)
    }

    /// Population K(β): expected outer product of the per-case score. Weight
    /// functions enter squared, matching the sample estimator.
    fn k_matrix(&self, link: Link, beta: &DVector<f64>) -> DMatrix<f64> {
        let p = beta.len();
        let mut acc = vec![crate::numerics::KahanSum::new(); p * p];
        for node in &self.nodes {
            if node.w == 0.0 {
                continue;
            }
            let t = beta.dot(&node.x);
            let u1 = node.wfun * link.score_residual(t, true);
            let u0 = node.wfun * link.score_residual(t, false);
            let s = node.w * (node.q * u1 * u1 + (1.0 - node.q) * u0 * u0);
            if s == 0.0 {
                continue;
            }
            for r in 0..p {
                let xr = s * node.x[r];
                for c in r..p {
                    acc[r * p + c].add(xr * node.x[c]);
                }
            }
        }
        symmetric_from_upper(p, &acc)
    }

    /// Weighted KL distance Δ_w(q, q_β); +∞ when the model puts probability
    /// 0 or 1 where the truth disagrees.
    fn delta(&self, link: Link, beta: &DVector<f64>) -> f64 {
        let mut acc = crate::numerics::KahanSum::new();
        for node in &self.nodes {
            let wv = node.w * node.wfun;
            if wv == 0.0 {
                continue;
            }
            let t = beta.dot(&node.x);
            let q = node.q;
            // Model probability saturated at 0 or 1 where the truth
            // disagrees: the KL distance to a degenerate Bernoulli diverges.
            let q_model = link.mean(t);
            if (q_model == 0.0 && q > 0.0) || (q_model == 1.0 && q < 1.0) {
                return f64::INFINITY;
            }
            // D = q·(ln q - ln q_β) + (1-q)·(ln(1-q) - ln(1-q_β)), with
            // 0·log(0/a) = 0 at the boundary.
            let mut d = 0.0;
            if q > 0.0 {
                d += q * (q.ln() - link.loglik_term(t, true));
            }
            if q < 1.0 {
                d += (1.0 - q) * ((1.0 - q).ln() - link.loglik_term(t, false));
            }
            // Pointwise D ≥ 0; clip the rounding dust.
            acc.add(wv * d.max(0.0));
        }
        acc.value()
    }
}

fn symmetric_from_upper(p: usize, acc: &[crate::numerics::KahanSum]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(p, p);
    for r in 0..p {
        for c in r..p {
            let v = acc[r * p + c].value();
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
    m
}

fn error_floor(value: f64) -> f64 {
    1e-13 * (1.0 + value.abs())
}

fn grids(
    h: &CovariateDistribution,
    truth: &TrueModel,
    weight: Option<&WeightSpec>,
) -> Result<(Grid, Grid)> {
    let fine = build_grid(h, truth, weight, GL_NODES, QMC_POINTS)?;
    let coarse = build_grid(h, truth, weight, GL_NODES_COARSE, QMC_POINTS / 2)?;
    Ok((fine, coarse))
}

/// The population limit of the normalized log-likelihood,
/// `∫[q(x)βᵗx - log(1+exp(βᵗx))]H(dx)` for the logistic link, with a
/// fine-versus-coarse quadrature error estimate. Exact summation on finite
/// support; tensor Gauss–Legendre (64 nodes per dimension) for continuous
/// families up to d = 3; Halton quasi-Monte Carlo with 2¹⁶ points beyond.
pub fn population_objective(
    link: Link,
    beta: &ParamVector,
    h: &CovariateDistribution,
    truth: &TrueModel,
) -> Result<Integrated> {
    population_objective_weighted(link, beta, h, truth, None)
}

/// Weighted variant of [`population_objective`] (Δ_w's dual).
pub fn population_objective_weighted(
    link: Link,
    beta: &ParamVector,
    h: &CovariateDistribution,
    truth: &TrueModel,
    weight: Option<&WeightSpec>,
) -> Result<Integrated> {
    check_beta_dim(beta, h)?;
    let (fine, coarse) = grids(h, truth, weight)?;
    let bv = beta.to_vector();
    let value = fine.objective(link, &bv);
    let error_estimate = (value - coarse.objective(link, &bv)).abs()
        + fine.mass_defect * value.abs()
        + error_floor(value);
    Ok(Integrated { value, error_estimate })
}

fn check_beta_dim(beta: &ParamVector, h: &CovariateDistribution) -> Result<()> {
    if beta.len() != h.dim() + 1 {
        return Err(Error::DimensionMismatch { expected: h.dim() + 1, got: beta.len() });
    }
    Ok(())
}

/// Weighted KL distance `Δ_w(q, q_β) = ∫D(q(x), q_β(x))w(x)H(dx)`; with no
/// weight this is the plain Δ of the projection.
pub fn delta_distance(
    link: Link,
    beta: &ParamVector,
    h: &CovariateDistribution,
    truth: &TrueModel,
    weight: Option<&WeightSpec>,
) -> Result<Integrated> {
    check_beta_dim(beta, h)?;
    let (fine, coarse) = grids(h, truth, weight)?;
    let bv = beta.to_vector();
    let value = fine.delta(link, &bv);
    if value.is_infinite() {
        return Ok(Integrated { value: f64::INFINITY, error_estimate: f64::INFINITY });
    }
    let error_estimate = (value - coarse.delta(link, &bv)).abs()
        + fine.mass_defect * value.abs()
        + error_floor(value);
    Ok(Integrated { value, error_estimate })
}

/// Population matrices `J(β) = ∫xxᵗ q_β(1-q_β) dH` and
/// `K(β) = ∫xxᵗ[(1-q_β)²q + q_β²(1-q)] dH` (logistic forms shown; the probit
/// analogues use the exact per-case Hessian and score weights).
pub fn population_j_k(
    link: Link,
    beta: &ParamVector,
    h: &CovariateDistribution,
    truth: &TrueModel,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    population_j_k_weighted(link, beta, h, truth, None)
}

/// Weighted variant of [`population_j_k`].
pub fn population_j_k_weighted(
    link: Link,
    beta: &ParamVector,
    h: &CovariateDistribution,
    truth: &TrueModel,
    weight: Option<&WeightSpec>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_beta_dim(beta, h)?;
    let fine = build_grid(h, truth, weight, GL_NODES, QMC_POINTS)?;
    let bv = beta.to_vector();
    Ok((fine.neg_hessian(link, &bv), fine.k_matrix(link, &bv)))
}

/// The least-false parameter: maximizes the population objective (equality:
/// minimizes Δ) by the same concave-Newton machinery as the sample fit, then
/// reports Δ, J, K, and the sandwich at the solution.
pub fn least_false(
    link: Link,
    h: &CovariateDistribution,
    truth: &TrueModel,
    tolerance: f64,
) -> Result<LeastFalseResult> {
    least_false_weighted(link, h, truth, None, tolerance)
}

/// Weighted least-false parameter: the minimizer of Δ_w, which the maximum
/// weighted likelihood estimator converges to.
pub fn least_false_weighted(
    link: Link,
    h: &CovariateDistribution,
    truth: &TrueModel,
    weight: Option<&WeightSpec>,
    tolerance: f64,
) -> Result<LeastFalseResult> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    let (fine, coarse) = grids(h, truth, weight)?;
    let p = h.dim() + 1;

    let eval_full = |beta: &DVector<f64>| -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        Ok((fine.objective(link, beta), fine.score(link, beta), fine.neg_hessian(link, beta)))
    };
    let eval_value = |beta: &DVector<f64>| -> Result<f64> { Ok(fine.objective(link, beta)) };
    let config = FitConfig {
        max_iterations: 200,
        gradient_tolerance: tolerance,
        step_halving_limit: 40,
        initial_beta: None,
    };
    let outcome = newton_maximize(&eval_full, &eval_value, DVector::zeros(p), &config)?;
    // Flat-tail guard: if the model probability is within 1e-6 of 0 or 1 at
    // every positive-weight node, the population score vanished only because
    // the maximizer is escaping to infinity (truth essentially degenerate on
    // the weighted support). Report divergence rather than a fake optimum.
    let saturated = fine.nodes.iter().filter(|n| n.w * n.wfun > 0.0).all(|n| {
        let q_model = link.mean(outcome.beta.dot(&n.x));
        q_model.min(1.0 - q_model) < 1e-6
    });
    if saturated {
        return Err(Error::OracleDivergence(
            "model probabilities saturate at 0/1 on the weighted support".into(),
        ));
    }
    match outcome.status {
        FitStatus::Converged => {}
        FitStatus::SeparationSuspected => {
            return Err(Error::OracleDivergence(format!(
                "population maximizer exceeded norm bound at ‖β‖∞ = {:.3e}",
                outcome.beta.iter().fold(0.0f64, |m, x| m.max(x.abs()))
            )));
        }
        FitStatus::SingularInformation => {
            return Err(Error::SingularInformation { max_condition: crate::fit::MAX_CONDITION });
        }
        FitStatus::IterationLimit => {
            return Err(Error::OracleDivergence(format!(
                "population Newton did not reach tolerance {tolerance:.1e} in {} iterations",
                outcome.iterations
            )));
        }
    }

    let beta0_vec = outcome.beta;
    let delta = fine.delta(link, &beta0_vec);
    let population_j = fine.neg_hessian(link, &beta0_vec);
    let population_k = fine.k_matrix(link, &beta0_vec);
    let j_inv = nalgebra::Cholesky::new(population_j.clone())
        .ok_or(Error::SingularInformation { max_condition: crate::fit::MAX_CONDITION })?
        .inverse();
    let mut population_sandwich = &j_inv * &population_k * &j_inv;
    for r in 0..p {
        for c in (r + 1)..p {
            let s = 0.5 * (population_sandwich[(r, c)] + population_sandwich[(c, r)]);
            population_sandwich[(r, c)] = s;
            population_sandwich[(c, r)] = s;
        }
    }

    // Error estimate: fine-vs-coarse disagreement of the objective and the
    // score at the solution, plus any quadrature mass defect.
    let obj_fine = fine.objective(link, &beta0_vec);
    let obj_coarse = coarse.objective(link, &beta0_vec);
    let score_coarse = coarse.score(link, &beta0_vec);
    let score_fine = fine.score(link, &beta0_vec);
    let score_gap =
        (&score_fine - &score_coarse).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let integration_error_estimate = (obj_fine - obj_coarse).abs().max(score_gap)
        + fine.mass_defect * (1.0 + obj_fine.abs())
        + error_floor(obj_fine);

    Ok(LeastFalseResult {
        beta0: ParamVector::from_vector(&beta0_vec)?,
        delta_at_beta0: delta,
        population_j,
        population_k,
        population_sandwich,
        integration_error_estimate,
        score_norm_at_beta0: outcome.final_score_norm,
    })
}

/// Group-wise estimator for the equal-covariance Gaussian class model:
/// plugging class moments into the exact log-ratio gives slope
/// `Σ̂⁻¹(μ̂₁-μ̂₀)` and intercept
/// `log(π₁/π₀) - (μ̂₁ᵗΣ̂⁻¹μ̂₁ - μ̂₀ᵗΣ̂⁻¹μ̂₀)/2`.
pub fn gaussian_groupwise_beta(
    mean0: &[f64],
    mean1: &[f64],
    pooled_cov: &DMatrix<f64>,
    pi0: f64,
    pi1: f64,
) -> Result<ParamVector> {
    let d = mean0.len();
    if d == 0 {
        return Err(Error::InvalidParameter("group-wise estimation needs d ≥ 1".into()));
    }
    if mean1.len() != d || pooled_cov.nrows() != d || pooled_cov.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: mean1.len() });
    }
    if pi0 <= 0.0 || pi1 <= 0.0 {
        return Err(Error::InvalidParameter("class priors must be positive".into()));
    }
    let chol = nalgebra::Cholesky::new(pooled_cov.clone())
        .ok_or(Error::SingularInformation { max_condition: crate::fit::MAX_CONDITION })?;
    let mu0 = DVector::from_column_slice(mean0);
    let mu1 = DVector::from_column_slice(mean1);
    let slope = chol.solve(&(&mu1 - &mu0));
    let quad1 = mu1.dot(&chol.solve(&mu1));
    let quad0 = mu0.dot(&chol.solve(&mu0));
    let intercept = (pi1 / pi0).ln() - 0.5 * (quad1 - quad0);
    let mut beta = Vec::with_capacity(d + 1);
    beta.push(intercept);
    beta.extend(slope.iter());
    ParamVector::new(beta)
}

/// Compute class moments from a labeled dataset and apply
/// [`gaussian_groupwise_beta`]; class priors are the sample proportions.
pub fn fit_gaussian_groupwise(data: &Dataset) -> Result<ParamVector> {
    let d = data.dim() - 1;
    if d == 0 {
        return Err(Error::InvalidParameter("group-wise estimation needs d ≥ 1".into()));
    }
    let mut class_rows: [Vec<&[f64]>; 2] = [Vec::new(), Vec::new()];
    for obs in data.observations() {
        class_rows[usize::from(obs.z)].push(obs.x.features());
    }
    for (label, rows) in class_rows.iter().enumerate() {
        if rows.len() < 2 {
            return Err(Error::EmptyClass(format!(
                "class {label} has {} observations; need ≥ 2",
                rows.len()
            )));
        }
    }
    let mut means = [DVector::<f64>::zeros(d), DVector::<f64>::zeros(d)];
    for (label, rows) in class_rows.iter().enumerate() {
        for row in rows {
            for j in 0..d {
                means[label][j] += row[j];
            }
        }
        means[label] /= rows.len() as f64;
    }
    let n_total = data.n();
    let mut pooled = DMatrix::<f64>::zeros(d, d);
    for (label, rows) in class_rows.iter().enumerate() {
        for row in rows {
            for r in 0..d {
                let dr = row[r] - means[label][r];
                for c in 0..d {
                    pooled[(r, c)] += dr * (row[c] - means[label][c]);
                }
            }
        }
    }
    pooled /= (n_total - 2) as f64;
    let pi1 = class_rows[1].len() as f64 / n_total as f64;
    gaussian_groupwise_beta(
        means[0].as_slice(),
        means[1].as_slice(),
        &pooled,
        1.0 - pi1,
        pi1,
    )
}
