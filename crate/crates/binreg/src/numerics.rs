//! Low-level numerical kernels shared across the crate: stable logistic and
//! Gaussian evaluations, compensated summation, Gauss–Legendre nodes, and a
//! Halton sequence for high-dimensional expectations.

use libm::erfc;
use statrs::function::erf::erf_inv;

pub const SQRT_2PI: f64 = 2.5066282746310002;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// `1/(1+exp(-t))` without ever exponentiating a large positive argument.
#[inline]
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))`, the softplus, in its overflow-free split form.
#[inline]
pub fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / SQRT_2PI
}

/// Standard normal distribution function via the complementary error
/// function, `Φ(t) = erfc(-t/√2)/2`.
#[inline]
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t * FRAC_1_SQRT_2)
}

/// Scaled complementary error function `exp(x²)·erfc(x)`, finite for all
/// `x ≥ 0` where the plain product would overflow/underflow.
fn erfcx(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < 6.0 {
        (x * x).exp() * erfc(x)
    } else {
        // Asymptotic series 1/(x√π) · Σ (-1)^k (2k-1)!!/(2x²)^k; at x ≥ 6 the
        // truncation after eight terms is below 1e-15 relative.
        let r = 0.5 / (x * x);
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..=8u32 {
            term *= -((2 * k - 1) as f64) * r;
            sum += term;
        }
        sum / (x * std::f64::consts::PI.sqrt())
    }
}

/// Hazard rate of the standard normal, `φ(s)/(1-Φ(s))`.
///
/// Stable for arbitrarily large `s`, where numerator and denominator both
/// underflow but the ratio grows like `s`.
pub fn normal_hazard(s: f64) -> f64 {
    if s < 0.0 {
        // Lower tail: 1-Φ(s) ≥ 1/2, no cancellation.
        normal_pdf(s) / (1.0 - normal_cdf(s))
    } else {
        (2.0 / std::f64::consts::PI).sqrt() / erfcx(s * FRAC_1_SQRT_2)
    }
}

/// `log Φ(t)`, accurate into the far lower tail where `Φ` underflows.
pub fn log_normal_cdf(t: f64) -> f64 {
    if t > -8.0 {
        normal_cdf(t).ln()
    } else {
        // Φ(t) = φ(t)/hazard(-t), exactly.
        -0.5 * t * t - SQRT_2PI.ln() - normal_hazard(-t).ln()
    }
}

/// Standard normal quantile, `Φ⁻¹(p)`; one Newton polish on top of the
/// inverse error function keeps it at full double precision.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1), got {p}");
    let z = std::f64::consts::SQRT_2 * erf_inv(2.0 * p - 1.0);
    let pdf = normal_pdf(z);
    if pdf > 0.0 {
        z - (normal_cdf(z) - p) / pdf
    } else {
        z
    }
}

/// Neumaier-compensated accumulator; the running error term recovers the
/// digits plain `+=` loses on long sums.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Compensated sum of an iterator of terms.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on (-1, 1).
///
/// Newton iteration on the Legendre recurrence; nodes converge to machine
/// precision in a handful of steps.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for k in 0..m {
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by upward recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[k] = -x;
        nodes[n - 1 - k] = x;
        weights[k] = w;
        weights[n - 1 - k] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

const HALTON_PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Radical-inverse (van der Corput) value of `index` in the given base.
fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let mut result = 0.0;
    let mut fraction = 1.0 / base as f64;
    while index > 0 {
        result += (index % base) as f64 * fraction;
        index /= base;
        fraction /= base as f64;
    }
    result
}

/// `count` points of the `dim`-dimensional Halton sequence in (0,1)^dim,
/// skipping index 0 so no coordinate is ever exactly zero.
pub fn halton_points(dim: usize, count: usize) -> Vec<Vec<f64>> {
    assert!(
        dim <= HALTON_PRIMES.len(),
        "Halton backend supports up to {} dimensions",
        HALTON_PRIMES.len()
    );
    (1..=count as u64)
        .map(|i| {
            (0..dim)
                .map(|d| radical_inverse(i, HALTON_PRIMES[d]))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn logistic_matches_naive_in_safe_range() {
        for i in -300..=300 {
            let t = i as f64 / 10.0;
            let naive = 1.0 / (1.0 + (-t).exp());
            assert_relative_eq!(logistic(t), naive, max_relative = 1e-14);
        }
    }

    #[test]
    fn logistic_extreme_arguments_are_finite() {
        assert!(logistic(1000.0).is_finite());
        assert!(logistic(-1000.0).is_finite());
        // Correctly rounded limits: the true values are within 1e-300 of 1 and 0.
        assert_eq!(logistic(1000.0), 1.0);
        assert_eq!(logistic(-1000.0), 0.0);
        assert!(logistic(500.0) > 0.0 || logistic(500.0) == 1.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert_relative_eq!(log1p_exp(0.0), std::f64::consts::LN_2, max_relative = 1e-15);
        assert_relative_eq!(log1p_exp(800.0), 800.0, max_relative = 1e-15);
        assert_relative_eq!(log1p_exp(-40.0), (-40.0f64).exp(), max_relative = 1e-12);
    }

    // Reference values from a 40-digit evaluation of Φ.
    #[test]
    fn normal_cdf_reference_values() {
        let cases = [
            (0.0, 0.5),
            (0.5, 0.6914624612740131),
            (1.0, 0.8413447460685429),
            (2.0, 0.9772498680518208),
            (-3.0, 0.0013498980316300946),
            (-5.0, 2.866515718791939e-07),
            (-8.0, 6.220960574271785e-16),
        ];
        for (t, expected) in cases {
            assert_relative_eq!(normal_cdf(t), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn normal_hazard_matches_ratio_and_tail() {
        for s in [-3.0, -1.0, 0.0, 1.0, 3.0, 5.0] {
            // 1-Φ(s) written directly as erfc(s/√2)/2 so the reference itself
            // does not cancel in the upper tail.
            let direct = normal_pdf(s) / (0.5 * libm::erfc(s * std::f64::consts::FRAC_1_SQRT_2));
            assert_relative_eq!(normal_hazard(s), direct, max_relative = 1e-11);
        }
        // Far tail: hazard(s) ≈ s + 1/s.
        let s = 60.0;
        assert_relative_eq!(normal_hazard(s), s + 1.0 / s, max_relative = 1e-3);
        assert!(normal_hazard(1e4).is_finite());
    }

    #[test]
    fn log_normal_cdf_deep_tail() {
        assert_relative_eq!(log_normal_cdf(-1.0), normal_cdf(-1.0).ln(), max_relative = 1e-13);
        // ln Φ(-40) = -804.6084420142829... (40-digit evaluation)
        assert_relative_eq!(log_normal_cdf(-40.0), -804.6084420142829, max_relative = 1e-12);
        assert!(log_normal_cdf(-300.0).is_finite());
    }

    #[test]
    fn normal_quantile_reference_values() {
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959963984540054, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_quantile(0.5), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(normal_quantile(0.995), 2.575829303548901, epsilon = 1e-11);
        for p in [0.01, 0.2, 0.6, 0.9, 0.9999] {
            assert_abs_diff_eq!(normal_cdf(normal_quantile(p)), p, epsilon = 1e-13);
        }
    }

    #[test]
    fn compensated_sum_recovers_lost_digits() {
        // 1 + 1e-16 added 10^7 times loses the tail with naive summation.
        let mut naive = 1.0f64;
        let mut acc = KahanSum::new();
        acc.add(1.0);
        for _ in 0..10_000_000 {
            naive += 1e-16;
            acc.add(1e-16);
        }
        let exact = 1.0 + 1e-16 * 1e7;
        assert!((naive - exact).abs() > (acc.value() - exact).abs());
        assert_relative_eq!(acc.value(), exact, max_relative = 1e-15);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (nodes, weights) = gauss_legendre(8);
        assert_eq!(nodes.len(), 8);
        // Degree up to 2n-1 = 15 exact: ∫_{-1}^{1} x^k dx.
        for k in 0..=15u32 {
            let int: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(x, w)| w * x.powi(k as i32))
                .sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert_abs_diff_eq!(int, exact, epsilon = 1e-13);
        }
        let total: f64 = weights.iter().sum();
        assert_relative_eq!(total, 2.0, max_relative = 1e-14);
    }

    #[test]
    fn gauss_legendre_64_against_smooth_integral() {
        let (nodes, weights) = gauss_legendre(64);
        // ∫_{-1}^{1} exp(x) dx = e - 1/e
        let int: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x.exp()).sum();
        assert_relative_eq!(int, std::f64::consts::E - (-1.0f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn halton_points_equidistribute() {
        let pts = halton_points(2, 4096);
        let mean0: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / 4096.0;
        let mean1: f64 = pts.iter().map(|p| p[1]).sum::<f64>() / 4096.0;
        assert_abs_diff_eq!(mean0, 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(mean1, 0.5, epsilon = 1e-3);
        assert!(pts.iter().all(|p| p.iter().all(|&c| c > 0.0 && c < 1.0)));
    }
}
