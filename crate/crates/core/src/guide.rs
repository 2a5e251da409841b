//! Autoregressive Gaussian variational family over latent paths.
//!
//! ```text
//! X̃_{i,t} = m^X_{i,t} + α_{i,t} X̃_{i,t-1}                   + s^X_i z^X_{i,t}
//! K̃_{i,t} = m^K_{i,t} + β_{i,t} K̃_{i,t-1} + ρ_{i,t} X̃_{i,t-1} + s^K_i z^K_{i,t}
//! ```
//!
//! Lag terms vanish at `t = 0`, so the coefficients stored for `t = 0` are
//! inert. Standard deviations are per factor and pass through softplus.

use serde::{Deserialize, Serialize};

use crate::density::{gaussian_logpdf, HALF_LN_2PI};
use crate::error::{Error, Result};
use crate::model::{inverse_softplus, LatentPath};
use crate::tape::Real;

/// Guide parameters. Time-indexed fields are row-major `d × n_times`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideParams<R = f64> {
    pub latent_dim: usize,
    pub n_times: usize,
    pub level_mean: Vec<R>,
    pub level_coef: Vec<R>,
    pub level_sd_raw: Vec<R>,
    pub trend_mean: Vec<R>,
    pub trend_coef: Vec<R>,
    pub cross_coef: Vec<R>,
    pub trend_sd_raw: Vec<R>,
}

/// Shape of a guide, enough to rebuild it from a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuideShape {
    pub latent_dim: usize,
    pub n_times: usize,
}

impl GuideShape {
    pub fn n_params(&self) -> usize {
        5 * self.latent_dim * self.n_times + 2 * self.latent_dim
    }

    /// Length of the standard-normal noise array driving one path.
    pub fn noise_len(&self) -> usize {
        2 * self.latent_dim * self.n_times
    }
}

/// Mean and covariance of `(X̃_{i,t}, K̃_{i,t})` for one factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivariateGaussian {
    pub mean_level: f64,
    pub mean_trend: f64,
    pub var_level: f64,
    pub var_trend: f64,
    pub cov: f64,
}

impl BivariateGaussian {
    pub fn sd_level(&self) -> f64 {
        self.var_level.sqrt()
    }

    pub fn sd_trend(&self) -> f64 {
        self.var_trend.sqrt()
    }

    pub fn correlation(&self) -> f64 {
        let denom = (self.var_level * self.var_trend).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            self.cov / denom
        }
    }
}

impl GuideParams<f64> {
    /// All coefficients zero, the given means, one shared sd.
    pub fn independent(
        latent_dim: usize,
        n_times: usize,
        level_mean: Vec<f64>,
        trend_mean: Vec<f64>,
        sd: f64,
    ) -> Result<Self> {
        let n = latent_dim * n_times;
        if level_mean.len() != n || trend_mean.len() != n {
            return Err(Error::Shape(format!("guide means must have {latent_dim}×{n_times} entries")));
        }
        let raw = inverse_softplus(sd);
        Ok(Self {
            latent_dim,
            n_times,
            level_mean,
            level_coef: vec![0.0; n],
            level_sd_raw: vec![raw; latent_dim],
            trend_mean,
            trend_coef: vec![0.0; n],
            cross_coef: vec![0.0; n],
            trend_sd_raw: vec![raw; latent_dim],
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.shape().n_params());
        for block in [
            &self.level_mean,
            &self.level_coef,
            &self.trend_mean,
            &self.trend_coef,
            &self.cross_coef,
            &self.level_sd_raw,
            &self.trend_sd_raw,
        ] {
            out.extend_from_slice(block);
        }
        out
    }

    /// Per-factor marginal of `(X̃_t, K̃_t)` for every `t`, indexed `[i][t]`.
    pub fn marginals(&self) -> Vec<Vec<BivariateGaussian>> {
        let n = self.n_times;
        (0..self.latent_dim)
            .map(|i| {
                let sx2 = self.level_sd(i).powi(2);
                let sk2 = self.trend_sd(i).powi(2);
                let mut out: Vec<BivariateGaussian> = Vec::with_capacity(n);
                for t in 0..n {
                    let j = i * n + t;
                    let (mx, mk) = (self.level_mean[j], self.trend_mean[j]);
                    let next = match out.last() {
                        None => BivariateGaussian {
                            mean_level: mx,
                            mean_trend: mk,
                            var_level: sx2,
                            var_trend: sk2,
                            cov: 0.0,
                        },
                        Some(p) => {
                            let (a, b, r) = (self.level_coef[j], self.trend_coef[j], self.cross_coef[j]);
                            BivariateGaussian {
                                mean_level: mx + a * p.mean_level,
                                mean_trend: mk + b * p.mean_trend + r * p.mean_level,
                                var_level: a * a * p.var_level + sx2,
                                var_trend: b * b * p.var_trend
                                    + r * r * p.var_level
                                    + 2.0 * b * r * p.cov
                                    + sk2,
                                cov: a * (b * p.cov + r * p.var_level),
                            }
                        }
                    };
                    out.push(next);
                }
                out
            })
            .collect()
    }

    /// Joint Gaussian of the final time slice, one entry per factor.
    pub fn final_state_distribution(&self) -> Result<Vec<BivariateGaussian>> {
        if self.n_times == 0 {
            return Err(Error::Shape("guide has no time points".into()));
        }
        Ok(self.marginals().into_iter().map(|m| *m.last().expect("n_times > 0")).collect())
    }
}

impl<R: Real> GuideParams<R> {
    pub fn shape(&self) -> GuideShape {
        GuideShape { latent_dim: self.latent_dim, n_times: self.n_times }
    }

    pub fn from_flat(shape: GuideShape, flat: &[R]) -> Result<Self> {
        if flat.len() != shape.n_params() {
            return Err(Error::Shape(format!(
                "guide expects {} parameters, got {}",
                shape.n_params(),
                flat.len()
            )));
        }
        let (d, n) = (shape.latent_dim, shape.n_times);
        let mut rest = flat;
        let mut take = |len: usize| {
            let (head, tail) = rest.split_at(len);
            rest = tail;
            head.to_vec()
        };
        Ok(Self {
            latent_dim: d,
            n_times: n,
            level_mean: take(d * n),
            level_coef: take(d * n),
            trend_mean: take(d * n),
            trend_coef: take(d * n),
            cross_coef: take(d * n),
            level_sd_raw: take(d),
            trend_sd_raw: take(d),
        })
    }

    pub fn level_sd(&self, i: usize) -> R {
        self.level_sd_raw[i].softplus()
    }

    pub fn trend_sd(&self, i: usize) -> R {
        self.trend_sd_raw[i].softplus()
    }

    fn check(&self) -> Result<()> {
        let n = self.latent_dim * self.n_times;
        let ok = [&self.level_mean, &self.level_coef, &self.trend_mean, &self.trend_coef, &self.cross_coef]
            .iter()
            .all(|v| v.len() == n)
            && self.level_sd_raw.len() == self.latent_dim
            && self.trend_sd_raw.len() == self.latent_dim;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "guide arrays do not match {}×{}",
                self.latent_dim, self.n_times
            )))
        }
    }

    /// Reparameterised draw. `noise` holds the level block then the trend
    /// block, each `d × n_times`. Returns the path and its exact log-density.
    pub fn sample_path(&self, noise: &[f64]) -> Result<(LatentPath<R>, R)> {
        self.check()?;
        let (d, n) = (self.latent_dim, self.n_times);
        if noise.len() != 2 * d * n {
            return Err(Error::Shape(format!(
                "noise has {} entries, expected 2×{d}×{n}",
                noise.len()
            )));
        }
        let (zx, zk) = noise.split_at(d * n);
        let mut level = Vec::with_capacity(d * n);
        let mut trend = Vec::with_capacity(d * n);
        let mut log_sd = Vec::with_capacity(2 * d);
        for i in 0..d {
            let sx = self.level_sd(i);
            let sk = self.trend_sd(i);
            log_sd.push(sx.ln() * n as f64);
            log_sd.push(sk.ln() * n as f64);
            for t in 0..n {
                let j = i * n + t;
                let mut x = self.level_mean[j] + sx * zx[j];
                let mut k = self.trend_mean[j] + sk * zk[j];
                if t > 0 {
                    let (x_prev, k_prev) = (level[j - 1], trend[j - 1]);
                    x = x + self.level_coef[j] * x_prev;
                    k = k + self.trend_coef[j] * k_prev + self.cross_coef[j] * x_prev;
                }
                level.push(x);
                trend.push(k);
            }
        }
        // log q(T(z)) = log N(z) - log|∂T/∂z|, and the Jacobian is triangular
        // with the sds on the diagonal.
        let base: f64 = noise.iter().map(|z| -0.5 * z * z - HALF_LN_2PI).sum();
        let logq = -R::sum(&log_sd) + base;
        Ok((LatentPath::new(d, n, level, trend)?, logq))
    }

    /// Exact `log q(path)`.
    pub fn path_logdensity(&self, path: &LatentPath<R>) -> Result<R> {
        self.check()?;
        if path.latent_dim != self.latent_dim || path.n_times != self.n_times {
            return Err(Error::Shape(format!(
                "path {}×{} does not match guide {}×{}",
                path.latent_dim, path.n_times, self.latent_dim, self.n_times
            )));
        }
        let n = self.n_times;
        let mut terms = Vec::with_capacity(2 * self.latent_dim * n);
        for i in 0..self.latent_dim {
            let sx = self.level_sd(i);
            let sk = self.trend_sd(i);
            for t in 0..n {
                let j = i * n + t;
                let mut mx = self.level_mean[j];
                let mut mk = self.trend_mean[j];
                if t > 0 {
                    let (x_prev, k_prev) = (path.level[j - 1], path.trend[j - 1]);
                    mx = mx + self.level_coef[j] * x_prev;
                    mk = mk + self.trend_coef[j] * k_prev + self.cross_coef[j] * x_prev;
                }
                terms.push(gaussian_logpdf(path.level[j], mx, sx)?);
                terms.push(gaussian_logpdf(path.trend[j], mk, sk)?);
            }
        }
        Ok(R::sum(&terms))
    }
}
