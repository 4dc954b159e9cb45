//! Nonparametric probability estimation by class-wise kernel density
//! estimates: `q̂(x) = π̂₁f̂₁(x) / (π̂₀f̂₀(x) + π̂₁f̂₁(x))`.
//!
//! The plug-in uses a product kernel per class with per-coordinate
//! bandwidths. Smoothing-parameter choice is an open problem (two classes
//! may well want two different bandwidths); the default here is the
//! normal-reference rule `h_k = 1.06·σ̂_k·m^{-1/5}` applied independently to
//! each class, with explicit override.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::Kernel;
use crate::model::Dataset;

/// Product-kernel density estimate for one class.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    points: Vec<Vec<f64>>,
    kernel: Kernel,
    bandwidth: Vec<f64>,
}

impl DensityEstimate {
    pub fn new(points: Vec<Vec<f64>>, kernel: Kernel, bandwidth: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyClass("no points for density estimate".into()));
        }
        let d = points[0].len();
        if d == 0 {
            return Err(Error::InvalidParameter("density estimate needs d ≥ 1".into()));
        }
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: 0 });
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteCovariate { row: 0 });
        }
        if bandwidth.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: bandwidth.len() });
        }
        if bandwidth.iter().any(|h| !h.is_finite() || *h <= 0.0) {
            return Err(Error::InvalidParameter("bandwidths must be positive and finite".into()));
        }
        Ok(Self { points, kernel, bandwidth })
    }

    pub fn dim(&self) -> usize {
        self.bandwidth.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }
}

/// Product-kernel density value
/// `(1/m)·Σ_j ∏_k (1/h_k)·K((x_k - X_jk)/h_k)`.
pub fn kde_evaluate(est: &DensityEstimate, x: &[f64]) -> Result<f64> {
    if x.len() != est.dim() {
        return Err(Error::DimensionMismatch { expected: est.dim(), got: x.len() });
    }
    let inv_h: f64 = est.bandwidth.iter().map(|h| 1.0 / h).product();
    let sum: f64 = est
        .points
        .iter()
        .map(|p| {
            p.iter()
                .zip(x)
                .zip(&est.bandwidth)
                .map(|((xj, xi), h)| est.kernel.density((xi - xj) / h))
                .product::<f64>()
        })
        .sum();
    Ok(inv_h * sum / est.points.len() as f64)
}

/// A plug-in probability together with the fallback flag: when both class
/// densities evaluate to zero at the query point (compact kernels far from
/// any data), the class prior π₁ is returned instead of 0/0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DensityRatioEstimate {
    pub value: f64,
    pub prior_fallback: bool,
}

/// `q̂(x) = π₁f̂₁(x) / (π₀f̂₀(x) + π₁f̂₁(x))`.
pub fn density_ratio_probability(
    class0: &DensityEstimate,
    class1: &DensityEstimate,
    priors: (f64, f64),
    x: &[f64],
) -> Result<DensityRatioEstimate> {
    let (pi0, pi1) = priors;
    if pi0 <= 0.0 || pi1 <= 0.0 || (pi0 + pi1 - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "class priors must be positive and sum to 1, got ({pi0}, {pi1})"
        )));
    }
    if class0.dim() != class1.dim() {
        return Err(Error::DimensionMismatch { expected: class0.dim(), got: class1.dim() });
    }
    let a0 = pi0 * kde_evaluate(class0, x)?;
    let a1 = pi1 * kde_evaluate(class1, x)?;
    if a0 + a1 == 0.0 {
        return Ok(DensityRatioEstimate { value: pi1, prior_fallback: true });
    }
    Ok(DensityRatioEstimate { value: a1 / (a0 + a1), prior_fallback: false })
}

/// Class proportions `π̂₁ = #{z=1}/n`; both outcomes must be present.
pub fn estimate_priors(data: &Dataset) -> Result<(f64, f64)> {
    let ones = data.observations().iter().filter(|o| o.z).count();
    if ones == 0 || ones == data.n() {
        return Err(Error::SingleClassData);
    }
    let pi1 = ones as f64 / data.n() as f64;
    Ok((1.0 - pi1, pi1))
}

/// Normal-reference bandwidths `h_k = 1.06·σ̂_k·m^{-1/5}` per coordinate.
pub fn normal_reference_bandwidths(points: &[Vec<f64>]) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::EmptyClass(format!(
            "need ≥ 2 points for the bandwidth rule, got {}",
            points.len()
        )));
    }
    let m = points.len() as f64;
    let d = points[0].len();
    let mut out = Vec::with_capacity(d);
    for k in 0..d {
        let mean: f64 = points.iter().map(|p| p[k]).sum::<f64>() / m;
        let var: f64 = points.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let sd = var.sqrt();
        if sd <= 0.0 || sd.is_nan() {
            return Err(Error::InvalidParameter(format!(
                "coordinate {k} is degenerate; cannot form a bandwidth"
            )));
        }
        out.push(1.06 * sd * m.powf(-0.2));
    }
    Ok(out)
}

/// The full plug-in classifier: class-wise KDEs with their priors.
#[derive(Debug, Clone)]
pub struct DensityRatioClassifier {
    pub class0: DensityEstimate,
    pub class1: DensityEstimate,
    pub pi0: f64,
    pub pi1: f64,
}

impl DensityRatioClassifier {
    /// Split a labeled dataset into classes, estimate priors as proportions,
    /// and build the two density estimates. Bandwidths default to the
    /// normal-reference rule per class; pass `Some((h0, h1))` to override.
    pub fn from_dataset(
        data: &Dataset,
        kernel: Kernel,
        bandwidths: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let (pi0, pi1) = estimate_priors(data)?;
        let mut class_points: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        for obs in data.observations() {
            class_points[usize::from(obs.z)].push(obs.x.features().to_vec());
        }
        for (label, pts) in class_points.iter().enumerate() {
            if pts.len() < 2 {
                return Err(Error::EmptyClass(format!(
                    "class {label} has {} observations; need ≥ 2",
                    pts.len()
                )));
            }
        }
        let [points0, points1] = class_points;
        let (h0, h1) = match bandwidths {
            Some(pair) => pair,
            None => (
                normal_reference_bandwidths(&points0)?,
                normal_reference_bandwidths(&points1)?,
            ),
        };
        Ok(Self {
            class0: DensityEstimate::new(points0, kernel, h0)?,
            class1: DensityEstimate::new(points1, kernel, h1)?,
            pi0,
            pi1,
        })
    }

    pub fn probability(&self, x: &[f64]) -> Result<DensityRatioEstimate> {
        density_ratio_probability(&self.class0, &self.class1, (self.pi0, self.pi1), x)
    }
}
