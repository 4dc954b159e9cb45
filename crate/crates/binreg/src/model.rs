//! Data model shared by every other module: intercept-augmented covariate
//! vectors, binary observations, optionally weighted datasets, and the two
//! mean-function links.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log1p_exp, log_normal_cdf, logistic, normal_cdf, normal_hazard};

/// Covariate vector `x = (1, x_1, …, x_d)`; the leading 1 is the intercept
/// slot and is stored explicitly so every formula is a plain inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateVector {
    values: DVector<f64>,
}

impl CovariateVector {
    /// Build from the feature part `(x_1, …, x_d)`; the intercept 1 is
    /// prepended here.
    pub fn from_features(features: &[f64]) -> Result<Self> {
        let mut values = Vec::with_capacity(features.len() + 1);
        values.push(1.0);
        values.extend_from_slice(features);
        Self::new(DVector::from_vec(values))
    }

    /// Build from a full vector whose first entry must already be 1.
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("covariate vector must be non-empty".into()));
        }
        if values[0] != 1.0 {
            return Err(Error::InvalidParameter(format!(
                "covariate vector must start with the intercept 1, got {}",
                values[0]
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCovariate { row: 0 });
        }
        Ok(Self { values })
    }

    /// Full length d+1, intercept included.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of genuine covariates d.
    pub fn num_features(&self) -> usize {
        self.values.len() - 1
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    /// The feature part, intercept excluded.
    pub fn features(&self) -> &[f64] {
        &self.values.as_slice()[1..]
    }
}

/// One case: covariates plus the binary outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub x: CovariateVector,
    pub z: bool,
}

impl Observation {
    #[inline]
    pub fn z_f64(&self) -> f64 {
        if self.z {
            1.0
        } else {
            0.0
        }
    }
}

/// Parameter vector `β = (β_0, …, β_d)` with `β_0` the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    beta: Vec<f64>,
}

impl ParamVector {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidParameter("parameter vector must be non-empty".into()));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("parameter vector must be finite".into()));
        }
        Ok(Self { beta })
    }

    pub fn zeros(len: usize) -> Self {
        Self { beta: vec![0.0; len] }
    }

    pub fn from_vector(v: &DVector<f64>) -> Result<Self> {
        Self::new(v.iter().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.beta
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    /// Max-norm distance to another parameter vector.
    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.beta
            .iter()
            .zip(&other.beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, b) in self.beta.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{b:.6}")?;
        }
        write!(f, ")")
    }
}

/// Mean-function link: logistic `q_β(x) = exp(βᵗx)/(1+exp(βᵗx))` or probit
/// `q_β(x) = Φ(βᵗx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logistic,
    Probit,
}

impl Link {
    /// Mean response at linear predictor `t`.
    ///
    /// Logistic uses the split form (t ≥ 0 via `1/(1+e^{-t})`, t < 0 via
    /// `e^t/(1+e^t)`) so no large positive argument is ever exponentiated.
    #[inline]
    pub fn mean(self, t: f64) -> f64 {
        match self {
            Link::Logistic => logistic(t),
            Link::Probit => normal_cdf(t),
        }
    }

    /// Per-case log-likelihood term `z log q + (1-z) log(1-q)` at linear
    /// predictor `t`, in the algebraically equivalent stable form.
    #[inline]
    pub fn loglik_term(self, t: f64, z: bool) -> f64 {
        match self {
            Link::Logistic => {
                let zt = if z { t } else { 0.0 };
                zt - log1p_exp(t)
            }
            Link::Probit => {
                if z {
                    log_normal_cdf(t)
                } else {
                    log_normal_cdf(-t)
                }
            }
        }
    }

    /// The factor `u(t, z)` so the per-case score is `x·u`: for the logistic
    /// link `u = z - q`; for probit the chain rule through `Φ` gives the
    /// Mills-ratio form `u = φ/Φ` (z=1) or `-φ/(1-Φ)` (z=0).
    #[inline]
    pub fn score_residual(self, t: f64, z: bool) -> f64 {
        match self {
            Link::Logistic => {
                let q = logistic(t);
                if z {
                    1.0 - q
                } else {
                    -q
                }
            }
            Link::Probit => {
                if z {
                    normal_hazard(-t)
                } else {
                    -normal_hazard(t)
                }
            }
        }
    }

    /// The factor `w(t, z) ≥ 0` so the per-case negative Hessian is `xxᵗ·w`.
    ///
    /// Logistic: `q(1-q)` (exact equals expected). Probit: the exact
    /// z-dependent expression `u(u+t)`, positive for every t, which keeps the
    /// probit log-likelihood concave as well.
    #[inline]
    pub fn neghess_weight(self, t: f64, z: bool) -> f64 {
        match self {
            Link::Logistic => {
                let q = logistic(t);
                q * (1.0 - q)
            }
            Link::Probit => {
                let u = self.score_residual(t, z);
                u * (u + t)
            }
        }
    }
}

impl FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" | "logit" => Ok(Link::Logistic),
            "probit" => Ok(Link::Probit),
            other => Err(Error::InvalidParameter(format!("unknown link '{other}'"))),
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Link::Logistic => write!(f, "logistic"),
            Link::Probit => write!(f, "probit"),
        }
    }
}

/// Ordered collection of observations with optional per-case weights
/// `w(x_i)`; weights turn every likelihood quantity into its weighted
/// counterpart with no separate code path.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    observations: Vec<Observation>,
    weights: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = observations[0].x.len();
        for (row, obs) in observations.iter().enumerate() {
            if obs.x.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: obs.x.len() });
            }
            if obs.x.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCovariate { row });
            }
        }
        Ok(Self { observations, weights: None })
    }

    /// Validate raw rows of `(x_1…x_d, z)`, prepending the intercept.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[(R, u8)]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = rows[0].0.as_ref().len();
        let mut observations = Vec::with_capacity(rows.len());
        for (row, (features, z)) in rows.iter().enumerate() {
            let features = features.as_ref();
            if features.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: features.len() });
            }
            if features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCovariate { row });
            }
            let z = match z {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::NonBinaryOutcome { row, value: *other as f64 });
                }
            };
            observations.push(Observation { x: CovariateVector::from_features(features)?, z });
        }
        Self::new(observations)
    }

    /// Attach per-case weights; all must be finite and ≥ 0 with at least one
    /// strictly positive.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.observations.len() {
            return Err(Error::InvalidWeights(format!(
                "{} weights for {} observations",
                weights.len(),
                self.observations.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights("weights must be finite and non-negative".into()));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::InvalidWeights("at least one weight must be positive".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    /// Drop any weights, returning to the plain likelihood.
    pub fn without_weights(mut self) -> Self {
        self.weights = None;
        self
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    /// Dimension d+1 of the covariate vectors (intercept included).
    pub fn dim(&self) -> usize {
        self.observations[0].x.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// Read the external CSV format: header `x1,…,xd,z`, one observation per
    /// line, `z ∈ {0,1}`, no intercept column (it is added here).
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = csv_reader.headers()?.clone();
        if headers.is_empty() {
            return Err(Error::Csv("missing header row".into()));
        }
        let d = headers.len() - 1;
        if headers.iter().next_back() != Some("z") {
            return Err(Error::Csv("last column must be named 'z'".into()));
        }
        let mut rows: Vec<(Vec<f64>, u8)> = Vec::new();
        for (row, record) in csv_reader.records().enumerate() {
            let record = record?;
            if record.len() != d + 1 {
                return Err(Error::DimensionMismatch { expected: d + 1, got: record.len() });
            }
            let mut features = Vec::with_capacity(d);
            for field in record.iter().take(d) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Csv(format!("row {}: bad covariate '{field}'", row + 1)))?;
                features.push(v);
            }
            let z_raw: f64 = record[d]
                .trim()
                .parse()
                .map_err(|_| Error::Csv(format!("row {}: bad outcome '{}'", row + 1, &record[d])))?;
            let z = if z_raw == 0.0 {
                0
            } else if z_raw == 1.0 {
                1
            } else {
                return Err(Error::NonBinaryOutcome { row, value: z_raw });
            };
            rows.push((features, z));
        }
        Self::from_rows(&rows)
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }
}

/// `βᵗx` as a plain inner product.
pub fn linear_predictor(beta: &ParamVector, x: &CovariateVector) -> Result<f64> {
    if beta.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: beta.len(), got: x.len() });
    }
    Ok(beta.as_slice().iter().zip(x.as_slice()).map(|(b, v)| b * v).sum())
}

/// `q_β(x)` under the given link; strictly inside (0,1) for all inputs with a
/// moderate linear predictor, degrading only to the nearest representable
/// value in the extreme tails.
pub fn mean_response(link: Link, beta: &ParamVector, x: &CovariateVector) -> Result<f64> {
    Ok(link.mean(linear_predictor(beta, x)?))
}
