//! Normalized log-likelihood, score, and information matrix for plain and
//! weighted likelihoods under both links.
//!
//! All quantities are per-observation averages: the value is
//! `(1/n)·Σ_i w_i·[z_i log q_i + (1-z_i) log(1-q_i)]`, the score its gradient
//! in β, and the information matrix the exact negative Hessian. With unit
//! weights and the logistic link the information matrix is
//! `J_n(β) = (1/n)·Σ_i x_i x_iᵗ q_i(1-q_i)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Dataset, Link, ParamVector};
use crate::numerics::KahanSum;

/// Value, gradient, and negative Hessian of the normalized log-likelihood at
/// one parameter point.
#[derive(Debug, Clone)]
pub struct LikelihoodEvaluation {
    /// `(1/n)·log L` (or `(1/n)·log WL` when the dataset carries weights).
    pub value: f64,
    /// Gradient of `value` in β.
    pub score: DVector<f64>,
    /// Negative Hessian of `value`; symmetric positive semidefinite for both
    /// links at any β.
    pub neg_hessian: DMatrix<f64>,
}

fn check_dims(beta: &ParamVector, data: &Dataset) -> Result<()> {
    if beta.len() != data.dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), got: beta.len() });
    }
    Ok(())
}

/// Normalized (optionally weighted) log-likelihood `(1/n)·Σ w_i·term_i`.
///
/// Sums are compensated so simulations with n up to 10⁶ keep full precision.
pub fn log_likelihood(link: Link, beta: &ParamVector, data: &Dataset) -> Result<f64> {
    check_dims(beta, data)?;
    let b = beta.as_slice();
    let mut acc = KahanSum::new();
    for (i, obs) in data.observations().iter().enumerate() {
        let w = data.weight(i);
        if w == 0.0 {
            continue;
        }
        let t: f64 = b.iter().zip(obs.x.as_slice()).map(|(bj, xj)| bj * xj).sum();
        acc.add(w * link.loglik_term(t, obs.z));
    }
    Ok(acc.value() / data.n() as f64)
}

/// Gradient of [`log_likelihood`] in β: `(1/n)·Σ w_i·x_i·u(t_i, z_i)`.
pub fn score(link: Link, beta: &ParamVector, data: &Dataset) -> Result<DVector<f64>> {
    check_dims(beta, data)?;
    let b = beta.as_slice();
    let p = b.len();
    let mut acc = vec![KahanSum::new(); p];
    for (i, obs) in data.observations().iter().enumerate() {
        let w = data.weight(i);
        if w == 0.0 {
            continue;
        }
        let xs = obs.x.as_slice();
        let t: f64 = b.iter().zip(xs).map(|(bj, xj)| bj * xj).sum();
        let u = w * link.score_residual(t, obs.z);
        for (a, xj) in acc.iter_mut().zip(xs) {
            a.add(u * xj);
        }
    }
    let n = data.n() as f64;
    Ok(DVector::from_iterator(p, acc.iter().map(|a| a.value() / n)))
}

/// Negative Hessian of [`log_likelihood`]: `(1/n)·Σ w_i·x_i x_iᵗ·w(t_i, z_i)`.
///
/// For the logistic link the weight `q(1-q)` is z-free, so the exact Hessian
/// coincides with the expected information; the probit weight keeps the exact
/// z-dependent expression.
pub fn information_matrix(link: Link, beta: &ParamVector, data: &Dataset) -> Result<DMatrix<f64>> {
    check_dims(beta, data)?;
    let b = beta.as_slice();
    let p = b.len();
    let mut acc = vec![KahanSum::new(); p * p];
    for (i, obs) in data.observations().iter().enumerate() {
        let w = data.weight(i);
        if w == 0.0 {
            continue;
        }
        let xs = obs.x.as_slice();
        let t: f64 = b.iter().zip(xs).map(|(bj, xj)| bj * xj).sum();
        let wt = w * link.neghess_weight(t, obs.z);
        for r in 0..p {
            let xr_w = wt * xs[r];
            for c in r..p {
                acc[r * p + c].add(xr_w * xs[c]);
            }
        }
    }
    let n = data.n() as f64;
    let mut m = DMatrix::zeros(p, p);
    for r in 0..p {
        for c in r..p {
            let v = acc[r * p + c].value() / n;
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
    Ok(m)
}

/// Value, score, and negative Hessian in one pass over the data; what the
/// Newton fitter consumes.
pub fn evaluate(link: Link, beta: &ParamVector, data: &Dataset) -> Result<LikelihoodEvaluation> {
    check_dims(beta, data)?;
    let b = beta.as_slice();
    let p = b.len();
    let mut value = KahanSum::new();
    let mut grad = vec![KahanSum::new(); p];
    let mut hess = vec![KahanSum::new(); p * p];
    for (i, obs) in data.observations().iter().enumerate() {
        let w = data.weight(i);
        if w == 0.0 {
            continue;
        }
        let xs = obs.x.as_slice();
        let t: f64 = b.iter().zip(xs).map(|(bj, xj)| bj * xj).sum();
        value.add(w * link.loglik_term(t, obs.z));
        let u = w * link.score_residual(t, obs.z);
        let wt = w * link.neghess_weight(t, obs.z);
        for r in 0..p {
            grad[r].add(u * xs[r]);
            let xr_w = wt * xs[r];
            for c in r..p {
                hess[r * p + c].add(xr_w * xs[c]);
            }
        }
    }
    let n = data.n() as f64;
    let score = DVector::from_iterator(p, grad.iter().map(|a| a.value() / n));
    let mut neg_hessian = DMatrix::zeros(p, p);
    for r in 0..p {
        for c in r..p {
            let v = hess[r * p + c].value() / n;
            neg_hessian[(r, c)] = v;
            neg_hessian[(c, r)] = v;
        }
    }
    Ok(LikelihoodEvaluation { value: value.value() / n, score, neg_hessian })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn toy_data() -> Dataset {
        Dataset::from_rows(&[
            (vec![0.5, -1.0], 1u8),
            (vec![-0.25, 2.0], 0u8),
            (vec![1.5, 0.3], 1u8),
            (vec![0.0, -0.7], 0u8),
            (vec![-1.2, 1.1], 1u8),
        ])
        .unwrap()
    }

    fn random_dataset(rng: &mut StdRng, n: usize, d: usize) -> Dataset {
        let rows: Vec<(Vec<f64>, u8)> = (0..n)
            .map(|_| {
                let features: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let z = u8::from(rng.random_bool(0.5));
                (features, z)
            })
            .collect();
        Dataset::from_rows(&rows).unwrap()
    }

    #[test]
    fn loglik_at_zero_is_log_half() {
        let data = toy_data();
        let beta = ParamVector::zeros(data.dim());
        let ll = log_likelihood(Link::Logistic, &beta, &data).unwrap();
        assert_relative_eq!(ll, -(2.0f64.ln()), max_relative = 1e-14);
    }

    #[test]
    fn loglik_single_case_with_known_probability() {
        let data = Dataset::from_rows(&[(vec![0.0], 1u8)]).unwrap();
        let beta = ParamVector::new(vec![3.0f64.ln(), 0.0]).unwrap();
        let ll = log_likelihood(Link::Logistic, &beta, &data).unwrap();
        assert_relative_eq!(ll, 0.75f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn indicator_weights_keep_only_one_term() {
        let data = toy_data();
        let n = data.n();
        let beta = ParamVector::new(vec![0.3, -0.5, 0.8]).unwrap();
        let mut weights = vec![0.0; n];
        weights[2] = 1.0;
        let weighted = data.clone().with_weights(weights).unwrap();
        let ll = log_likelihood(Link::Logistic, &beta, &weighted).unwrap();

        let obs = &data.observations()[2];
        let t: f64 = beta
            .as_slice()
            .iter()
            .zip(obs.x.as_slice())
            .map(|(b, x)| b * x)
            .sum();
        let expected = Link::Logistic.loglik_term(t, obs.z) / n as f64;
        assert_relative_eq!(ll, expected, max_relative = 1e-14);
    }

    #[test]
    fn unit_weights_match_unweighted_exactly() {
        let data = toy_data();
        let weighted = data.clone().with_weights(vec![1.0; data.n()]).unwrap();
        for link in [Link::Logistic, Link::Probit] {
            let beta = ParamVector::new(vec![0.2, -0.4, 0.9]).unwrap();
            assert_eq!(
                log_likelihood(link, &beta, &data).unwrap(),
                log_likelihood(link, &beta, &weighted).unwrap()
            );
            assert_eq!(score(link, &beta, &data).unwrap(), score(link, &beta, &weighted).unwrap());
            assert_eq!(
                information_matrix(link, &beta, &data).unwrap(),
                information_matrix(link, &beta, &weighted).unwrap()
            );
        }
    }

    #[test]
    fn score_at_zero_has_closed_form() {
        let data = toy_data();
        let beta = ParamVector::zeros(data.dim());
        let s = score(Link::Logistic, &beta, &data).unwrap();
        let n = data.n() as f64;
        for j in 0..data.dim() {
            let expected: f64 = data
                .observations()
                .iter()
                .map(|o| o.x.as_slice()[j] * (o.z_f64() - 0.5))
                .sum::<f64>()
                / n;
            assert_abs_diff_eq!(s[j], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn information_at_zero_is_quarter_gram() {
        let data = toy_data();
        let beta = ParamVector::zeros(data.dim());
        let j = information_matrix(Link::Logistic, &beta, &data).unwrap();
        let n = data.n() as f64;
        for r in 0..data.dim() {
            for c in 0..data.dim() {
                let expected: f64 = data
                    .observations()
                    .iter()
                    .map(|o| o.x.as_slice()[r] * o.x.as_slice()[c])
                    .sum::<f64>()
                    / (4.0 * n);
                assert_abs_diff_eq!(j[(r, c)], expected, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn single_observation_information_bounded_by_quarter() {
        let data = Dataset::from_rows(&[(Vec::<f64>::new(), 1u8)]).unwrap();
        for b in [-3.0, -0.5, 0.0, 1.0, 4.0] {
            let beta = ParamVector::new(vec![b]).unwrap();
            let j = information_matrix(Link::Logistic, &beta, &data).unwrap();
            assert!(j[(0, 0)] <= 0.25 + 1e-15);
            assert!(j[(0, 0)] > 0.0);
        }
    }

    /// Finite-difference oracle: the score must match central differences of
    /// the log-likelihood, and the information matrix central differences of
    /// the score, for random parameters and data under both links.
    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(20240811);
        for link in [Link::Logistic, Link::Probit] {
            for _ in 0..10 {
                let d = rng.random_range(1..=3);
                let data = random_dataset(&mut rng, 80, d);
                let beta = ParamVector::new(
                    (0..=d).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<_>>(),
                )
                .unwrap();
                let s = score(link, &beta, &data).unwrap();
                for u in 0..=d {
                    let h = 1e-6 * beta.as_slice()[u].abs().max(1.0);
                    let mut up = beta.as_slice().to_vec();
                    let mut dn = up.clone();
                    up[u] += h;
                    dn[u] -= h;
                    let fd = (log_likelihood(link, &ParamVector::new(up).unwrap(), &data).unwrap()
                        - log_likelihood(link, &ParamVector::new(dn).unwrap(), &data).unwrap())
                        / (2.0 * h);
                    assert_abs_diff_eq!(s[u], fd, epsilon = 1e-6);
                }
                let info = information_matrix(link, &beta, &data).unwrap();
                for u in 0..=d {
                    let h = 1e-5 * beta.as_slice()[u].abs().max(1.0);
                    let mut up = beta.as_slice().to_vec();
                    let mut dn = up.clone();
                    up[u] += h;
                    dn[u] -= h;
                    let s_up = score(link, &ParamVector::new(up).unwrap(), &data).unwrap();
                    let s_dn = score(link, &ParamVector::new(dn).unwrap(), &data).unwrap();
                    for v in 0..=d {
                        let fd = -(s_up[v] - s_dn[v]) / (2.0 * h);
                        assert_abs_diff_eq!(info[(u, v)], fd, epsilon = 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn evaluate_agrees_with_individual_functions() {
        let data = toy_data();
        for link in [Link::Logistic, Link::Probit] {
            let beta = ParamVector::new(vec![0.7, -0.2, 0.1]).unwrap();
            let eval = evaluate(link, &beta, &data).unwrap();
            assert_eq!(eval.value, log_likelihood(link, &beta, &data).unwrap());
            assert_eq!(eval.score, score(link, &beta, &data).unwrap());
            assert_eq!(eval.neg_hessian, information_matrix(link, &beta, &data).unwrap());
        }
    }

    #[test]
    fn neg_hessian_is_positive_definite_on_full_rank_design() {
        let mut rng = StdRng::seed_from_u64(7);
        let data = random_dataset(&mut rng, 60, 2);
        for link in [Link::Logistic, Link::Probit] {
            for _ in 0..5 {
                let beta = ParamVector::new(
                    (0..3).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>(),
                )
                .unwrap();
                let info = information_matrix(link, &beta, &data).unwrap();
                let eig = info.symmetric_eigenvalues();
                assert!(eig.iter().all(|&e| e > 0.0), "smallest eigenvalue {:?}", eig);
            }
        }
    }

    #[test]
    fn affine_reparametrization_invariance() {
        let data = toy_data();
        let c = 3.7;
        let scaled_rows: Vec<(Vec<f64>, u8)> = data
            .observations()
            .iter()
            .map(|o| {
                (
                    o.x.features().iter().map(|v| c * v).collect::<Vec<_>>(),
                    u8::from(o.z),
                )
            })
            .collect();
        let scaled = Dataset::from_rows(&scaled_rows).unwrap();
        let beta = ParamVector::new(vec![0.4, -0.8, 1.3]).unwrap();
        let beta_scaled =
            ParamVector::new(vec![0.4, -0.8 / c, 1.3 / c]).unwrap();
        let a = log_likelihood(Link::Logistic, &beta, &data).unwrap();
        let b = log_likelihood(Link::Logistic, &beta_scaled, &scaled).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}
