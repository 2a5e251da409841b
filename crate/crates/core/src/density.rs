//! Gaussian and Poisson log-density kernels, generic over [`Real`] so they
//! can be evaluated directly or recorded on a tape.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::tape::Real;

/// ½·ln(2π)
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Rates at or above this are treated as divergence rather than data.
pub const MAX_RATE: f64 = 1e300;

pub fn gaussian_logpdf<R: Real>(x: R, mean: R, sd: R) -> Result<R> {
    if !(sd.value() > 0.0) {
        return Err(Error::Domain(format!("gaussian sd must be positive, got {}", sd.value())));
    }
    let z = (x - mean) / sd;
    Ok(-(sd.ln()) - z.square() * 0.5 - HALF_LN_2PI)
}

/// `ln k!` for a non-negative integer count stored as `f64`.
pub fn ln_factorial(k: f64) -> f64 {
    ln_gamma(k + 1.0)
}

fn check_count(k: f64) -> Result<()> {
    if k < 0.0 || k.fract() != 0.0 || !k.is_finite() {
        return Err(Error::Domain(format!("count must be a non-negative integer, got {k}")));
    }
    Ok(())
}

pub fn poisson_logpmf<R: Real>(k: f64, rate: R) -> Result<R> {
    check_count(k)?;
    if !(rate.value() > 0.0) {
        return Err(Error::Domain(format!("poisson rate must be positive, got {}", rate.value())));
    }
    Ok(rate.ln() * k - rate - ln_factorial(k))
}

/// Poisson log-pmf parameterised by `ln(rate)`; errors when the rate overflows.
pub fn poisson_logpmf_log_rate<R: Real>(k: f64, log_rate: R) -> Result<R> {
    check_count(k)?;
    let rate = log_rate.exp();
    if !(rate.value() < MAX_RATE) {
        return Err(Error::Evaluation(format!(
            "poisson rate exp({}) overflows",
            log_rate.value()
        )));
    }
    Ok(log_rate * k - rate - ln_factorial(k))
}

/// Poisson log-pmf that also accepts the degenerate `rate = 0` (point mass at 0).
pub fn poisson_logpmf_or_point_mass(k: f64, rate: f64) -> f64 {
    if rate == 0.0 {
        if k == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        k * rate.ln() - rate - ln_factorial(k)
    }
}

/// `ln Σ exp(x_i)`; `-∞` for an empty slice or all `-∞` inputs.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::gradient;
    use mortvi_oracles::quadrature::trapezoid;

    #[test]
    fn standard_normal_at_mean() {
        let v = gaussian_logpdf(0.0, 0.0, 1.0).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn one_sd_offset_is_minus_half() {
        for &(mu, sd) in &[(0.0, 1.0), (-3.2, 0.4), (17.0, 12.5)] {
            let at_mean = gaussian_logpdf(mu, mu, sd).unwrap();
            let off = gaussian_logpdf(mu + sd, mu, sd).unwrap();
            assert!((off - (at_mean - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        let (mean, sd) = (0.2, 2.0);
        let total = trapezoid(|x| gaussian_logpdf(x, mean, sd).unwrap().exp(), -40.0, 40.0, 200_001);
        assert!((total - 1.0).abs() < 1e-6);
        let v = gaussian_logpdf(1.3, 0.2, 2.0).unwrap();
        let direct = -HALF_LN_2PI - 2.0f64.ln() - (1.1f64 / 2.0).powi(2) / 2.0;
        assert!((v - direct).abs() < 1e-14);
    }

    #[test]
    fn gaussian_rejects_nonpositive_sd() {
        assert!(matches!(gaussian_logpdf(0.0, 0.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(gaussian_logpdf(0.0, 0.0, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn gaussian_gradient_in_all_arguments() {
        let (x, m, s) = (1.3, 0.2, 2.0);
        let (_, g) = gradient(&[x, m, s], |v| gaussian_logpdf(v[0], v[1], v[2])).unwrap();
        let z = (x - m) / s;
        assert!((g[0] + z / s).abs() < 1e-14);
        assert!((g[1] - z / s).abs() < 1e-14);
        assert!((g[2] - (-1.0 / s + z * z / s)).abs() < 1e-14);
    }

    #[test]
    fn poisson_small_values() {
        assert!((poisson_logpmf(0.0, 1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!((poisson_logpmf(1.0, 1.0).unwrap() + 1.0).abs() < 1e-15);
        // ln(5^5 e^-5 / 120)
        let direct = (3125.0f64 / 120.0).ln() - 5.0;
        let v = poisson_logpmf(5.0, 5.0).unwrap();
        assert!((v - direct).abs() < 1e-12);
        assert!((v + 1.740_30).abs() < 1e-5);
    }

    #[test]
    fn poisson_domain_errors() {
        assert!(poisson_logpmf(1.0, 0.0).is_err());
        assert!(poisson_logpmf(-1.0, 2.0).is_err());
        assert!(poisson_logpmf(1.5, 2.0).is_err());
        assert!(poisson_logpmf_log_rate(1.0, 700.0).is_err());
    }

    #[test]
    fn poisson_normalises() {
        for &rate in &[0.01, 0.7, 3.0, 12.5, 20.0] {
            let total: f64 = (0..=200).map(|k| poisson_logpmf(k as f64, rate).unwrap().exp()).sum();
            assert!((total - 1.0).abs() < 1e-8, "rate {rate}: {total}");
        }
    }

    #[test]
    fn ln_factorial_is_accurate() {
        let mut exact = 0.0f64;
        for k in 1..=170u32 {
            exact += (k as f64).ln();
            assert!((ln_factorial(k as f64) - exact).abs() <= 1e-12 * exact.max(1.0), "k={k}");
        }
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
