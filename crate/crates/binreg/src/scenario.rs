//! Scenario files: a flat, human-writable TOML schema that declares the
//! covariate distribution, the true model, the estimators to run, and any
//! embedded acceptance checks.
//!
//! The file schema is deliberately friendlier than the core types: finite
//! supports take unnormalized `weights`, covariates are referred to by their
//! CSV column number (`x1` is `coordinate = 1`), and scalar priors broadcast
//! over coordinates. Parsing converts and validates into [`Scenario`].
//!
//! ```toml
//! link = "logistic"
//! n = 4000
//! replications = 1000
//! seed = 7
//!
//! [h]
//! kind = "finite_support"
//! points = [[-1.0], [0.0], [1.0]]
//! weights = [1, 1, 1]
//!
//! [truth]
//! kind = "step_function"
//! coordinate = 1
//! thresholds = [0.0]
//! values = [0.2, 0.9]
//!
//! [[estimators]]
//! kind = "mle"
//!
//! [checks]
//! mean_within_se = 3.0
//! cov_rel_tol = 0.15
//! coverage_band = [0.93, 0.97]
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::fit::Kernel;
use crate::model::{Link, ParamVector};
use crate::oracle::{
    CovariateDistribution, FeatureMap, Marginal, ProductDensity, TrueModel, TwoClassMixture,
    WeightSpec,
};
use crate::sim::{Checks, EstimatorSpec, Scenario};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    link: String,
    n: usize,
    replications: usize,
    seed: u64,
    #[serde(default)]
    coverage_levels: Option<Vec<f64>>,
    h: HSpec,
    truth: TruthSpec,
    #[serde(default)]
    estimators: Vec<EstimatorFileSpec>,
    #[serde(default)]
    checks: Option<Checks>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum HSpec {
    FiniteSupport {
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
    ProductUniform {
        bounds: Vec<(f64, f64)>,
    },
    ProductGaussian {
        mean: Vec<f64>,
        sd: Vec<f64>,
    },
    ProductBeta {
        shapes: Vec<(f64, f64)>,
    },
    TwoClassMixture {
        pi0: f64,
        pi1: f64,
        f0: DensityFileSpec,
        f1: DensityFileSpec,
    },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
enum DensityFileSpec {
    Uniform { bounds: Vec<(f64, f64)> },
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
    Beta { shapes: Vec<(f64, f64)> },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum TruthSpec {
    Logistic {
        beta: Vec<f64>,
        #[serde(default)]
        features: Option<String>,
    },
    StepFunction {
        coordinate: usize,
        thresholds: Vec<f64>,
        values: Vec<f64>,
    },
    PiecewiseLogistic {
        coordinate: usize,
        threshold: f64,
        left: Vec<f64>,
        right: Vec<f64>,
    },
    /// The conditional probability induced by the mixture H itself; requires
    /// `h.kind = "two_class_mixture"`.
    MixtureRatio {},
    Tabulated {
        xs: Vec<f64>,
        qs: Vec<f64>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum EstimatorFileSpec {
    Mle {},
    Weighted {
        weight: WeightFileSpec,
    },
    Local {
        x0: Vec<f64>,
        kernel: Kernel,
        bandwidth: Vec<f64>,
    },
    Bayes {
        #[serde(default)]
        prior_mean: f64,
        prior_sd: f64,
        draws: usize,
    },
    DensityRatio {
        kernel: Kernel,
        #[serde(default)]
        bandwidth: Option<Vec<f64>>,
    },
    Groupwise {},
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum WeightFileSpec {
    Indicator {
        coordinate: usize,
        threshold: f64,
        #[serde(default = "default_true")]
        above: bool,
    },
    Kernel {
        x0: Vec<f64>,
        kernel: Kernel,
        bandwidth: Vec<f64>,
    },
}

fn default_true() -> bool {
    true
}

/// Convert a 1-based CSV column number (`x1` = 1) into a feature index.
fn coordinate_index(coordinate: usize, d: usize) -> Result<usize> {
    if coordinate == 0 || coordinate > d {
        return Err(Error::InvalidScenario(format!(
            "coordinate {coordinate} out of range; columns are x1..x{d}"
        )));
    }
    Ok(coordinate - 1)
}

fn density_from_file(spec: DensityFileSpec) -> Result<ProductDensity> {
    let marginals = match spec {
        DensityFileSpec::Uniform { bounds } => {
            bounds.into_iter().map(|(lo, hi)| Marginal::Uniform { lo, hi }).collect()
        }
        DensityFileSpec::Gaussian { mean, sd } => {
            if mean.len() != sd.len() {
                return Err(Error::InvalidScenario("gaussian mean/sd length mismatch".into()));
            }
            mean.into_iter().zip(sd).map(|(m, s)| Marginal::Gaussian { mean: m, sd: s }).collect()
        }
        DensityFileSpec::Beta { shapes } => shapes
            .into_iter()
            .map(|(alpha, beta)| Marginal::Beta { alpha, beta })
            .collect(),
    };
    ProductDensity::new(marginals)
}

fn h_from_file(spec: HSpec) -> Result<CovariateDistribution> {
    Ok(match spec {
        HSpec::FiniteSupport { points, weights } => {
            let total: f64 = weights.iter().sum();
            if total <= 0.0 || total.is_nan() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::InvalidScenario(
                    "finite-support weights must be non-negative with positive sum".into(),
                ));
            }
            let probabilities = weights.iter().map(|w| w / total).collect();
            CovariateDistribution::finite_support(points, probabilities)?
        }
        HSpec::ProductUniform { bounds } => CovariateDistribution::ProductUniform { bounds },
        HSpec::ProductGaussian { mean, sd } => CovariateDistribution::ProductGaussian { mean, sd },
        HSpec::ProductBeta { shapes } => CovariateDistribution::ProductBeta { shapes },
        HSpec::TwoClassMixture { pi0, pi1, f0, f1 } => CovariateDistribution::TwoClassMixture(
            TwoClassMixture::new(pi0, density_from_file(f0)?, pi1, density_from_file(f1)?)?,
        ),
    })
}

fn truth_from_file(spec: TruthSpec, h: &CovariateDistribution) -> Result<TrueModel> {
    let d = h.dim();
    Ok(match spec {
        TruthSpec::Logistic { beta, features } => {
            let map = match features.as_deref() {
                None | Some("identity") => FeatureMap::Identity,
                Some("log_pairs") => FeatureMap::LogPairs,
                Some(other) => {
                    return Err(Error::InvalidScenario(format!("unknown feature map '{other}'")))
                }
            };
            TrueModel::LogisticInFeatures { beta: ParamVector::new(beta)?, map }
        }
        TruthSpec::StepFunction { coordinate, thresholds, values } => TrueModel::StepFunction {
            coordinate: coordinate_index(coordinate, d)?,
            thresholds,
            values,
        },
        TruthSpec::PiecewiseLogistic { coordinate, threshold, left, right } => {
            TrueModel::PiecewiseLogistic {
                coordinate: coordinate_index(coordinate, d)?,
                threshold,
                left: ParamVector::new(left)?,
                right: ParamVector::new(right)?,
            }
        }
        TruthSpec::MixtureRatio {} => match h {
            CovariateDistribution::TwoClassMixture(mix) => {
                crate::oracle::mixture_truth(mix)
            }
            _ => {
                return Err(Error::InvalidScenario(
                    "mixture_ratio truth requires h.kind = \"two_class_mixture\"".into(),
                ))
            }
        },
        TruthSpec::Tabulated { xs, qs } => TrueModel::Tabulated { xs, qs },
    })
}

fn weight_from_file(spec: WeightFileSpec, d: usize) -> Result<WeightSpec> {
    Ok(match spec {
        WeightFileSpec::Indicator { coordinate, threshold, above } => WeightSpec::Indicator {
            coordinate: coordinate_index(coordinate, d)?,
            threshold,
            above,
        },
        WeightFileSpec::Kernel { x0, kernel, bandwidth } => {
            WeightSpec::Kernel { x0, kernel, bandwidth }
        }
    })
}

fn estimator_from_file(spec: EstimatorFileSpec, d: usize) -> Result<EstimatorSpec> {
    Ok(match spec {
        EstimatorFileSpec::Mle {} => EstimatorSpec::Mle,
        EstimatorFileSpec::Weighted { weight } => {
            EstimatorSpec::WeightedMle { weight: weight_from_file(weight, d)? }
        }
        EstimatorFileSpec::Local { x0, kernel, bandwidth } => {
            EstimatorSpec::Local { x0, kernel, bandwidth }
        }
        EstimatorFileSpec::Bayes { prior_mean, prior_sd, draws } => {
            EstimatorSpec::Bayes { prior_mean, prior_sd, draws }
        }
        EstimatorFileSpec::DensityRatio { kernel, bandwidth } => {
            EstimatorSpec::DensityRatio { kernel, bandwidth }
        }
        EstimatorFileSpec::Groupwise {} => EstimatorSpec::GaussianGroupwise,
    })
}

/// Parse a scenario file; returns the scenario plus any embedded checks.
pub fn parse_scenario_str(text: &str) -> Result<(Scenario, Option<Checks>)> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| Error::InvalidScenario(e.to_string()))?;
    let link: Link = file.link.parse()?;
    let h = h_from_file(file.h)?;
    let d = h.dim();
    let truth = truth_from_file(file.truth, &h)?;
    let mut estimators = Vec::with_capacity(file.estimators.len().max(1));
    for est in file.estimators {
        estimators.push(estimator_from_file(est, d)?);
    }
    if estimators.is_empty() {
        estimators.push(EstimatorSpec::Mle);
    }
    let scenario = Scenario {
        h,
        truth,
        link,
        n: file.n,
        replications: file.replications,
        seed: file.seed,
        estimators,
        coverage_levels: file.coverage_levels.unwrap_or_else(|| vec![0.95]),
    };
    scenario.validate()?;
    Ok((scenario, file.checks))
}

/// Parse a scenario file from disk.
pub fn parse_scenario_path<P: AsRef<Path>>(path: P) -> Result<(Scenario, Option<Checks>)> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const S1_FILE: &str = r#"
link = "logistic"
n = 4000
replications = 100
seed = 7

[h]
kind = "finite_support"
points = [[-1.0], [0.0], [1.0]]
weights = [1, 1, 1]

[truth]
kind = "step_function"
coordinate = 1
thresholds = [0.0]
values = [0.2, 0.9]

[[estimators]]
kind = "mle"

[[estimators]]
kind = "weighted"
[estimators.weight]
kind = "indicator"
coordinate = 1
threshold = 0.0

[checks]
mean_within_se = 3.0
cov_rel_tol = 0.15
coverage_band = [0.93, 0.97]
"#;

    #[test]
    fn parses_the_s1_scenario() {
        let (scenario, checks) = parse_scenario_str(S1_FILE).unwrap();
        assert_eq!(scenario.n, 4000);
        assert_eq!(scenario.estimators.len(), 2);
        assert_eq!(scenario.h.dim(), 1);
        match &scenario.h {
            CovariateDistribution::FiniteSupport { probabilities, .. } => {
                assert!((probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                assert!((probabilities[0] - 1.0 / 3.0).abs() < 1e-15);
            }
            other => panic!("wrong H: {other:?}"),
        }
        match &scenario.truth {
            TrueModel::StepFunction { coordinate, .. } => assert_eq!(*coordinate, 0),
            other => panic!("wrong truth: {other:?}"),
        }
        let checks = checks.unwrap();
        assert_eq!(checks.mean_within_se, Some(3.0));
        assert_eq!(checks.coverage_band, Some((0.93, 0.97)));
    }

    #[test]
    fn mixture_scenario_round_trips() {
        let text = r#"
link = "logistic"
n = 1000
replications = 5
seed = 11

[h]
kind = "two_class_mixture"
pi0 = 0.5
pi1 = 0.5
[h.f0]
family = "gaussian"
mean = [-1.0]
sd = [1.0]
[h.f1]
family = "gaussian"
mean = [1.0]
sd = [1.0]

[truth]
kind = "mixture_ratio"

[[estimators]]
kind = "mle"

[[estimators]]
kind = "groupwise"

[[estimators]]
kind = "density_ratio"
kernel = "gaussian"
"#;
        let (scenario, checks) = parse_scenario_str(text).unwrap();
        assert!(checks.is_none());
        assert_eq!(scenario.estimators.len(), 3);
        assert!(matches!(scenario.truth, TrueModel::MixtureRatio(_)));
    }

    #[test]
    fn rejects_bad_coordinates_and_unknown_fields() {
        let bad_coord = S1_FILE.replace("coordinate = 1", "coordinate = 2");
        assert!(parse_scenario_str(&bad_coord).is_err());
        let unknown = S1_FILE.replace("seed = 7", "seed = 7\nbogus = 1");
        assert!(parse_scenario_str(&unknown).is_err());
        let bad_link = S1_FILE.replace("\"logistic\"", "\"cauchit\"");
        assert!(parse_scenario_str(&bad_link).is_err());
    }

    #[test]
    fn missing_estimators_default_to_mle() {
        let text = r#"
link = "probit"
n = 100
replications = 2
seed = 5

[h]
kind = "product_uniform"
bounds = [[-2.0, 2.0]]

[truth]
kind = "logistic"
beta = [0.5, -1.0]
"#;
        let (scenario, _) = parse_scenario_str(text).unwrap();
        assert_eq!(scenario.estimators, vec![EstimatorSpec::Mle]);
        assert_eq!(scenario.link, Link::Probit);
    }
}
