//! Latent-state propagation beyond the fitted window and predictive
//! distributions of rates and death counts.
//!
//! Per factor the pair `(X, K)` evolves linearly with Gaussian noise, so its
//! marginal at every horizon is Gaussian with
//!
//! ```text
//! m_X' = m_X + m_K                 C_XX' = C_XX + 2 C_XK + C_KK + σ_X²
//! m_K' = μ + φ (m_K - μ)           C_KK' = φ² C_KK + σ_K²
//!                                  C_XK' = φ (C_XK + C_KK)
//! ```
//!
//! Predictive death counts are Poisson mixtures over sampled latent paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::{ln_factorial, log_sum_exp};
use crate::error::{Error, Result};
use crate::guide::BivariateGaussian;
use crate::model::{sample_poisson, ConstrainedDynamics, EmissionParams, LatentDynamicsParams};
use crate::panel::MortalityPanel;
use crate::tape::matvec;

/// Default number of predictive samples.
pub const DEFAULT_SAMPLES: usize = 1000;

/// Closed-form per-horizon marginals; `steps[h][i]` for `h = 0..=horizon`,
/// where `h = 0` is the final fitted state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentForecast {
    pub dynamics: ConstrainedDynamics,
    pub steps: Vec<Vec<BivariateGaussian>>,
}

/// One step of the linear recursion.
pub fn propagate(s: &BivariateGaussian, drift: f64, phi: f64, sx: f64, sk: f64) -> BivariateGaussian {
    BivariateGaussian {
        mean_level: s.mean_level + s.mean_trend,
        mean_trend: drift + phi * (s.mean_trend - drift),
        var_level: s.var_level + 2.0 * s.cov + s.var_trend + sx * sx,
        var_trend: phi * phi * s.var_trend + sk * sk,
        cov: phi * (s.cov + s.var_trend),
    }
}

pub fn forecast_latent(
    final_state: &[BivariateGaussian],
    dynamics: &LatentDynamicsParams,
    horizon: usize,
) -> Result<LatentForecast> {
    if horizon == 0 {
        return Err(Error::Config("forecast horizon must be at least 1".into()));
    }
    let c = dynamics.constrained();
    if final_state.len() != c.latent_dim() {
        return Err(Error::Shape(format!(
            "final state has {} factors, dynamics has {}",
            final_state.len(),
            c.latent_dim()
        )));
    }
    let mut steps = vec![final_state.to_vec()];
    for h in 1..=horizon {
        let next = steps[h - 1]
            .iter()
            .enumerate()
            .map(|(i, s)| propagate(s, c.drift[i], c.persistence[i], c.level_sd[i], c.trend_sd[i]))
            .collect();
        steps.push(next);
    }
    Ok(LatentForecast { dynamics: c, steps })
}

impl LatentForecast {
    pub fn horizon(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn latent_dim(&self) -> usize {
        self.dynamics.latent_dim()
    }

    /// `n` joint paths of the level: `out[m][(h - 1) * d + i]` for `h = 1..=H`.
    ///
    /// Each path starts from a draw of the `h = 0` joint Gaussian and runs the
    /// dynamics forward, so horizons within a path are dependent.
    pub fn sample_levels(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let d = self.latent_dim();
        let horizon = self.horizon();
        let c = &self.dynamics;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut path = Vec::with_capacity(horizon * d);
            let mut state: Vec<(f64, f64)> = self.steps[0]
                .iter()
                .map(|s| {
                    let (z1, z2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                    sample_pair(s, z1, z2)
                })
                .collect();
            for _ in 0..horizon {
                for (i, (x, k)) in state.iter_mut().enumerate() {
                    let (u, v): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                    let x_next = *x + *k + c.level_sd[i] * u;
                    let k_next = c.drift[i] + c.persistence[i] * (*k - c.drift[i]) + c.trend_sd[i] * v;
                    *x = x_next;
                    *k = k_next;
                }
                path.extend(state.iter().map(|s| s.0));
            }
            out.push(path);
        }
        out
    }
}

/// Cholesky draw from a bivariate Gaussian.
fn sample_pair(s: &BivariateGaussian, z1: f64, z2: f64) -> (f64, f64) {
    let sx = s.sd_level();
    let x = s.mean_level + sx * z1;
    if sx == 0.0 {
        return (x, s.mean_trend + s.sd_trend() * z2);
    }
    let l21 = s.cov / sx;
    let l22 = (s.var_trend - l21 * l21).max(0.0).sqrt();
    (x, s.mean_trend + l21 * z1 + l22 * z2)
}

/// Predictive death counts per (age, horizon) as an equal-weight mixture of
/// Poissons with rates `E · μ^{(m)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDeaths {
    pub first_year: i32,
    pub n_ages: usize,
    pub horizon: usize,
    pub n_samples: usize,
    /// `ln μ` indexed `[(a * horizon + (h - 1)) * n_samples + m]`.
    log_mu: Vec<f64>,
    /// `exposures[a * horizon + (h - 1)]`
    exposures: Vec<f64>,
}

impl PredictiveDeaths {
    pub fn from_log_rates(
        first_year: i32,
        n_ages: usize,
        horizon: usize,
        n_samples: usize,
        log_mu: Vec<f64>,
        exposures: Vec<f64>,
    ) -> Result<Self> {
        if log_mu.len() != n_ages * horizon * n_samples || exposures.len() != n_ages * horizon {
            return Err(Error::Shape(format!(
                "predictive {n_ages}×{horizon}×{n_samples} got {} rates and {} exposures",
                log_mu.len(),
                exposures.len()
            )));
        }
        if n_samples == 0 {
            return Err(Error::Config("predictive needs at least one sample".into()));
        }
        if let Some(v) = log_mu.iter().find(|v| !v.is_finite() || **v >= crate::density::MAX_RATE.ln()) {
            return Err(Error::Evaluation(format!("predictive log-rate {v} is not usable")));
        }
        Ok(Self { first_year, n_ages, horizon, n_samples, log_mu, exposures })
    }

    fn cell(&self, a: usize, h: usize) -> usize {
        assert!(h >= 1 && h <= self.horizon && a < self.n_ages, "cell ({a}, {h}) out of range");
        a * self.horizon + h - 1
    }

    pub fn exposure(&self, a: usize, h: usize) -> f64 {
        self.exposures[self.cell(a, h)]
    }

    /// `ln μ^{(m)}` for cell `(a, h)`.
    pub fn log_rates(&self, a: usize, h: usize) -> &[f64] {
        let c = self.cell(a, h) * self.n_samples;
        &self.log_mu[c..c + self.n_samples]
    }

    /// Predictive log-pmf at count `k`; `-∞` where the mixture has no mass.
    pub fn log_pmf(&self, a: usize, h: usize, k: f64) -> f64 {
        let e = self.exposure(a, h);
        if e == 0.0 {
            return if k == 0.0 { 0.0 } else { f64::NEG_INFINITY };
        }
        let (ln_e, lnk) = (e.ln(), ln_factorial(k));
        let terms: Vec<f64> = self
            .log_rates(a, h)
            .iter()
            .map(|&lm| {
                let lr = lm + ln_e;
                k * lr - lr.exp() - lnk
            })
            .collect();
        log_sum_exp(&terms) - (self.n_samples as f64).ln()
    }

    /// Mean and variance of the mixture `μ^{(m)}`.
    pub fn rate_moments(&self, a: usize, h: usize) -> (f64, f64) {
        let r = self.log_rates(a, h);
        let n = r.len() as f64;
        let mean = r.iter().map(|v| v.exp()).sum::<f64>() / n;
        let var = r.iter().map(|v| (v.exp() - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    pub fn mean_deaths(&self, a: usize, h: usize) -> f64 {
        self.exposure(a, h) * self.rate_moments(a, h).0
    }
}

/// Exposures for `horizon` years following `panel`, repeating its last row.
pub fn carry_forward_exposures(panel: &MortalityPanel, horizon: usize) -> Result<MortalityPanel> {
    if panel.n_years() == 0 {
        return Err(Error::Shape("cannot carry forward an empty panel".into()));
    }
    let last = panel.exposure_row(panel.n_years() - 1);
    let n_ages = panel.n_ages();
    let mut exposures = vec![0.0; n_ages * horizon];
    for (a, &e) in last.iter().enumerate() {
        exposures[a * horizon..(a + 1) * horizon].fill(e);
    }
    MortalityPanel::new(panel.last_year() + 1, n_ages, horizon, vec![0.0; n_ages * horizon], exposures)
}

fn exposure_grid(exposures: &MortalityPanel, n_ages: usize, horizon: usize) -> Result<Vec<f64>> {
    if exposures.n_ages() != n_ages || exposures.n_years() < horizon {
        return Err(Error::Shape(format!(
            "exposures cover {}×{}, forecast needs {n_ages}×{horizon}",
            exposures.n_ages(),
            exposures.n_years()
        )));
    }
    let mut out = Vec::with_capacity(n_ages * horizon);
    for a in 0..n_ages {
        out.extend((0..horizon).map(|t| exposures.exposure(a, t)));
    }
    Ok(out)
}

/// Predictive deaths over the first `H` years of `exposures`, using `n`
/// sampled latent paths.
pub fn forecast_deaths(
    forecast: &LatentForecast,
    emission: &EmissionParams,
    exposures: &MortalityPanel,
    n: usize,
    seed: u64,
) -> Result<PredictiveDeaths> {
    if n == 0 {
        return Err(Error::Config("predictive needs at least one sample".into()));
    }
    let (horizon, d, n_ages) = (forecast.horizon(), forecast.latent_dim(), emission.n_ages());
    let grid = exposure_grid(exposures, n_ages, horizon)?;
    let loadings = emission.loadings(d)?;
    let intercept = emission.intercept();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths = forecast.sample_levels(n, &mut rng);
    let mut log_mu = vec![0.0; n_ages * horizon * n];
    for (m, path) in paths.iter().enumerate() {
        for h in 0..horizon {
            let eta = matvec(&loadings, &path[h * d..(h + 1) * d]);
            for a in 0..n_ages {
                log_mu[(a * horizon + h) * n + m] = eta[a] + intercept[a];
            }
        }
    }
    PredictiveDeaths::from_log_rates(exposures.first_year(), n_ages, horizon, n, log_mu, grid)
}

/// Predictive summary of the realised rate in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub age: usize,
    pub year: i32,
    pub horizon: usize,
    pub mean_rate: f64,
    pub sd_rate: f64,
    /// `max(mean - sd, 0)`
    pub lower: f64,
    pub upper: f64,
    pub mean_deaths: f64,
    /// Empirical quantiles of simulated `deaths / exposure`, one per requested level.
    pub quantiles: Vec<f64>,
}

/// Mean and ±1 sd band of `deaths / exposure` per cell.
///
/// Where exposure is zero the band describes the underlying rate `μ` only.
pub fn forecast_rates(pred: &PredictiveDeaths, quantiles: &[f64], seed: u64) -> Result<Vec<RateSummary>> {
    if let Some(q) = quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::Config(format!("quantile level {q} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pred.n_ages * pred.horizon);
    for a in 0..pred.n_ages {
        for h in 1..=pred.horizon {
            let e = pred.exposure(a, h);
            let (mu, var_mu) = pred.rate_moments(a, h);
            let (mean_rate, sd_rate) = if e > 0.0 {
                // Var(D/E) = E[λ]/E² + Var(λ)/E² for a Poisson mixture.
                (mu, (mu / e + var_mu).sqrt())
            } else {
                (mu, var_mu.sqrt())
            };
            let q = if quantiles.is_empty() {
                Vec::new()
            } else {
                let mut draws = pred
                    .log_rates(a, h)
                    .iter()
                    .map(|lm| {
                        if e > 0.0 {
                            Ok(sample_poisson(e * lm.exp(), &mut rng)? / e)
                        } else {
                            Ok(lm.exp())
                        }
                    })
                    .collect::<Result<Vec<f64>>>()?;
                draws.sort_by(f64::total_cmp);
                quantiles.iter().map(|&p| empirical_quantile(&draws, p)).collect()
            };
            out.push(RateSummary {
                age: a,
                year: pred.first_year + h as i32 - 1,
                horizon: h,
                mean_rate,
                sd_rate,
                lower: (mean_rate - sd_rate).max(0.0),
                upper: mean_rate + sd_rate,
                mean_deaths: e * mu,
                quantiles: q,
            });
        }
    }
    Ok(out)
}

/// Linear-interpolation quantile of sorted data.
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
