//! Likelihood-based binary regression that does not assume the model is true.
//!
//! The classical logistic (or probit) analysis reports `β̂` together with the
//! inverse-information covariance `(1/n)Ĵ⁻¹`. Both pieces are justified only
//! when the parametric mean function is exactly right. This crate implements
//! the agnostic alternative:
//!
//! * the maximum-likelihood estimator still converges, but to the *least
//!   false* parameter `β⁰` — the Kullback–Leibler projection of the true
//!   response probability onto the model, weighted by the covariate
//!   distribution;
//! * its asymptotic covariance is the sandwich `(1/n)Ĵ⁻¹K̂Ĵ⁻¹`, which the
//!   [`sandwich`] module estimates alongside the naive version;
//! * the gap between `Ĵ` and `K̂` is itself a goodness-of-fit signal, turned
//!   into a bootstrap-calibrated test.
//!
//! The [`oracle`] module computes the population-level quantities (`β⁰`,
//! KL distance, `J`, `K`) for declared true models by numerical projection,
//! and the [`sim`] module runs replicated experiments that check the sample
//! estimators against those population targets.
//!
//! Weighted likelihoods, kernel-local fits, a Bayes posterior-mean estimator,
//! and a class-density plug-in probability estimator round out the toolbox.
//!
//! ```
//! use binreg::model::{Dataset, Link};
//! use binreg::fit::{fit_mle, FitConfig};
//!
//! // z = 1 was observed for the two largest covariate values.
//! let rows = vec![
//!     (vec![-1.2], 0), (vec![-0.4], 0), (vec![0.1], 1),
//!     (vec![0.7], 0), (vec![1.3], 1), (vec![2.0], 1),
//! ];
//! let data = Dataset::from_rows(&rows)?;
//! let fit = fit_mle(Link::Logistic, &data, &FitConfig::default())?;
//! assert!(fit.converged);
//! assert!(fit.beta_hat.as_slice()[1] > 0.0);
//! # Ok::<(), binreg::Error>(())
//! ```

pub mod error;
pub mod fit;
pub mod likelihood;
pub mod model;
pub mod nonparam;
pub mod numerics;
pub mod oracle;
pub mod sandwich;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};

// Matrix types appear in public signatures; re-export the crate so
// downstream code can name them without a separate dependency.
pub use nalgebra;
