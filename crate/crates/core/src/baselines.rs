//! Poisson Lee-Carter: `D ~ Poisson(E exp(α_a + β_a κ_t))`, fitted by
//! alternating one-dimensional Newton updates, with κ forecast as a random
//! walk with drift.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::density::ln_factorial;
use crate::error::{Error, Result};
use crate::forecast::PredictiveDeaths;
use crate::panel::MortalityPanel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeeCarterParams {
    pub alpha: Vec<f64>,
    /// Sums to 1.
    pub beta: Vec<f64>,
    /// Sums to 0.
    pub kappa: Vec<f64>,
    pub drift: f64,
    pub rw_sd: f64,
}

impl LeeCarterParams {
    pub fn log_rate(&self, a: usize, t: usize) -> f64 {
        self.alpha[a] + self.beta[a] * self.kappa[t]
    }

    /// Row-major `n_ages × n_years`.
    pub fn log_rate_matrix(&self) -> Vec<f64> {
        let n = self.kappa.len();
        (0..self.alpha.len() * n).map(|j| self.log_rate(j / n, j % n)).collect()
    }

    /// Flat view of every parameter.
    pub fn values(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.extend(&self.beta);
        v.extend(&self.kappa);
        v.push(self.drift);
        v.push(self.rw_sd);
        v
    }

    /// Standard deviation of `κ_{T+h}` given the fitted `κ_T`.
    pub fn kappa_sd(&self, h: usize) -> f64 {
        self.rw_sd * (h as f64).sqrt()
    }

    /// Rescales to `Σβ = 1`, `Σκ = 0` without changing any rate.
    pub fn normalize(&mut self) -> Result<()> {
        let s: f64 = self.beta.iter().sum();
        let scale = self.beta.iter().map(|b| b.abs()).fold(0.0, f64::max);
        if !(s.abs() > 1e-10 * scale.max(1e-300)) || scale < 1e-12 {
            return Err(Error::Evaluation("Lee-Carter age loadings are degenerate".into()));
        }
        self.beta.iter_mut().for_each(|b| *b /= s);
        self.kappa.iter_mut().for_each(|k| *k *= s);
        let mean = self.kappa.iter().sum::<f64>() / self.kappa.len() as f64;
        self.kappa.iter_mut().for_each(|k| *k -= mean);
        for (a, b) in self.alpha.iter_mut().zip(&self.beta) {
            *a += b * mean;
        }
        Ok(())
    }
}

/// Poisson log-likelihood over observed cells.
pub fn lee_carter_loglik(params: &LeeCarterParams, panel: &MortalityPanel) -> f64 {
    let mut total = 0.0;
    for a in 0..panel.n_ages() {
        for t in 0..panel.n_years() {
            if panel.is_observed(a, t) {
                let lr = params.log_rate(a, t) + panel.exposure(a, t).ln();
                let d = panel.death_count(a, t);
                total += d * lr - lr.exp() - ln_factorial(d);
            }
        }
    }
    total
}

fn deviance(params: &LeeCarterParams, panel: &MortalityPanel) -> f64 {
    let mut total = 0.0;
    for a in 0..panel.n_ages() {
        for t in 0..panel.n_years() {
            if panel.is_observed(a, t) {
                let fitted = panel.exposure(a, t) * params.log_rate(a, t).exp();
                let d = panel.death_count(a, t);
                let term = if d > 0.0 { d * (d / fitted).ln() } else { 0.0 };
                total += 2.0 * (term - (d - fitted));
            }
        }
    }
    total
}

fn initial_params(panel: &MortalityPanel) -> LeeCarterParams {
    let (n_ages, n) = (panel.n_ages(), panel.n_years());
    let alpha: Vec<f64> = (0..n_ages)
        .map(|a| {
            let d: f64 = (0..n).map(|t| panel.deaths(a, t)).sum();
            let e: f64 = (0..n).map(|t| panel.exposure(a, t)).sum();
            ((d + 0.5) / (e + 0.5)).ln()
        })
        .collect();
    let centred = DMatrix::from_fn(n_ages, n, |a, t| {
        if panel.is_observed(a, t) {
            panel.smoothed_log_rate(a, t) - alpha[a]
        } else {
            0.0
        }
    });
    let svd = centred.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let c = (0..svd.singular_values.len())
        .max_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]))
        .unwrap_or(0);
    let s = svd.singular_values.get(c).copied().unwrap_or(0.0);
    let usable = s > 1e-8;
    let beta: Vec<f64> =
        (0..n_ages).map(|a| if usable { u[(a, c)] } else { 1.0 / n_ages as f64 }).collect();
    let kappa: Vec<f64> = (0..n).map(|t| if usable { s * v_t[(c, t)] } else { 0.0 }).collect();
    LeeCarterParams { alpha, beta, kappa, drift: 0.0, rw_sd: 0.0 }
}

/// Poisson maximum likelihood, then random-walk parameters from `κ`.
pub fn fit_lee_carter(train: &MortalityPanel, max_iter: usize, tol: f64) -> Result<LeeCarterParams> {
    let (n_ages, n) = (train.n_ages(), train.n_years());
    if n < 2 {
        return Err(Error::Shape("Lee-Carter needs at least two years".into()));
    }
    for a in 0..n_ages {
        if (0..n).all(|t| !train.is_observed(a, t)) {
            return Err(Error::Data(format!("age {a} has no exposure in the training window")));
        }
    }
    let mut p = initial_params(train);
    let fitted = |p: &LeeCarterParams, a: usize, t: usize| train.exposure(a, t) * p.log_rate(a, t).exp();
    let mut eta = p.log_rate_matrix();
    let mut converged = false;
    for iter in 0..max_iter {
        for a in 0..n_ages {
            let (mut num, mut den) = (0.0, 0.0);
            for t in (0..n).filter(|&t| train.is_observed(a, t)) {
                let f = fitted(&p, a, t);
                num += train.death_count(a, t) - f;
                den += f;
            }
            p.alpha[a] += num / den;
        }
        for t in 0..n {
            let (mut num, mut den) = (0.0, 0.0);
            for a in (0..n_ages).filter(|&a| train.is_observed(a, t)) {
                let f = fitted(&p, a, t);
                num += (train.death_count(a, t) - f) * p.beta[a];
                den += f * p.beta[a] * p.beta[a];
            }
            if den > 0.0 {
                p.kappa[t] += num / den;
            }
        }
        let mean = p.kappa.iter().sum::<f64>() / n as f64;
        p.kappa.iter_mut().for_each(|k| *k -= mean);
        for (a, b) in p.alpha.iter_mut().zip(&p.beta) {
            *a += b * mean;
        }
        for a in 0..n_ages {
            let (mut num, mut den) = (0.0, 0.0);
            for t in (0..n).filter(|&t| train.is_observed(a, t)) {
                let f = fitted(&p, a, t);
                num += (train.death_count(a, t) - f) * p.kappa[t];
                den += f * p.kappa[t] * p.kappa[t];
            }
            if den > 0.0 {
                p.beta[a] += num / den;
            }
        }
        let next = p.log_rate_matrix();
        // ΔLL = Σ D Δη - E e^η (e^{Δη} - 1), free of the cancellation in LL itself.
        let mut change = 0.0;
        for a in 0..n_ages {
            for t in (0..n).filter(|&t| train.is_observed(a, t)) {
                let (old, new) = (eta[a * n + t], next[a * n + t]);
                let step = new - old;
                change += train.death_count(a, t) * step - train.exposure(a, t) * old.exp() * step.exp_m1();
            }
        }
        if !change.is_finite() {
            return Err(Error::Convergence { iterations: iter + 1, deviance: deviance(&p, train) });
        }
        eta = next;
        if change.abs() < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence { iterations: max_iter, deviance: deviance(&p, train) });
    }
    p.normalize()?;
    let steps = (n - 1) as f64;
    p.drift = (p.kappa[n - 1] - p.kappa[0]) / steps;
    p.rw_sd = (p.kappa.windows(2).map(|w| (w[1] - w[0] - p.drift).powi(2)).sum::<f64>() / steps).sqrt();
    Ok(p)
}

/// Predictive deaths for the years after the fitted window: `n` random-walk
/// paths of `κ`, each mapped through `α + β κ`.
pub fn forecast_lee_carter(
    params: &LeeCarterParams,
    horizon: usize,
    n: usize,
    seed: u64,
    exposures: &MortalityPanel,
) -> Result<PredictiveDeaths> {
    if horizon == 0 {
        return Err(Error::Config("forecast horizon must be at least 1".into()));
    }
    let n_ages = params.alpha.len();
    if exposures.n_ages() != n_ages || exposures.n_years() < horizon {
        return Err(Error::Shape(format!(
            "exposures cover {}×{}, forecast needs {n_ages}×{horizon}",
            exposures.n_ages(),
            exposures.n_years()
        )));
    }
    let last = *params.kappa.last().ok_or_else(|| Error::Shape("empty κ".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log_mu = vec![0.0; n_ages * horizon * n];
    for m in 0..n {
        let mut kappa = last;
        for h in 0..horizon {
            let z: f64 = rng.sample(StandardNormal);
            kappa += params.drift + params.rw_sd * z;
            for a in 0..n_ages {
                log_mu[(a * horizon + h) * n + m] = params.alpha[a] + params.beta[a] * kappa;
            }
        }
    }
    let mut grid = Vec::with_capacity(n_ages * horizon);
    for a in 0..n_ages {
        grid.extend((0..horizon).map(|t| exposures.exposure(a, t)));
    }
    PredictiveDeaths::from_log_rates(exposures.first_year(), n_ages, horizon, n, log_mu, grid)
}
