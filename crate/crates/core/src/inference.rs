//! ELBO estimation, gradient estimators and the stochastic optimiser.
//!
//! All model and guide parameters are packed into one flat unconstrained
//! vector `[ψ; θ]` ([`Objective::join`]) and fitted jointly by Adam-style
//! gradient ascent on single- or multi-sample ELBO estimates.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamSnapshot;
use crate::error::{Error, Result};
use crate::guide::{GuideParams, GuideShape};
use crate::model::{
    inverse_softplus, joint_logdensity, EmissionKind, EmissionParams, LatentDynamicsParams, LatentPath,
    ModelParams, ModelSpec,
};
use crate::panel::MortalityPanel;
use crate::tape::{gradient, Real, Var};

/// Standard deviation the guide starts from.
pub const INIT_GUIDE_SD: f64 = 0.1;

/// Per-step factor that takes the learning rate to `ratio` times its initial
/// value after `steps` steps.
pub fn decay_over(steps: usize, ratio: f64) -> f64 {
    if steps == 0 {
        1.0
    } else {
        ratio.powf(1.0 / steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every step.
    pub lr_decay: f64,
    pub mc_samples: usize,
    pub seed: u64,
    /// Trailing window for the smoothed ELBO.
    pub convergence_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            learning_rate: 0.01,
            lr_decay: decay_over(10_000, 0.1),
            mc_samples: 1,
            seed: 0,
            convergence_window: 500,
        }
    }
}

impl TrainConfig {
    /// Default schedule rescaled to `steps` (learning rate still ends at a tenth).
    pub fn with_steps(steps: usize) -> Self {
        Self { steps, lr_decay: decay_over(steps, 0.1), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if self.convergence_window == 0 {
            return Err(Error::Config("convergence_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Monte-Carlo ELBO estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Per-coordinate Monte-Carlo gradient estimate over `[ψ; θ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// Mean ELBO over the samples used.
    pub value: f64,
    pub mean: Vec<f64>,
    /// Sample variance of the single-draw estimator, per coordinate.
    pub variance: Vec<f64>,
    pub n: usize,
}

impl GradientEstimate {
    /// Standard error of `mean`, per coordinate.
    pub fn std_error(&self) -> Vec<f64> {
        self.variance.iter().map(|v| (v / self.n as f64).sqrt()).collect()
    }

    fn from_samples(samples: Vec<(f64, Vec<f64>)>) -> Self {
        let n = samples.len();
        let dim = samples.first().map_or(0, |s| s.1.len());
        let value = samples.iter().map(|s| s.0).sum::<f64>() / n as f64;
        let mut mean = vec![0.0; dim];
        for (_, g) in &samples {
            for (m, x) in mean.iter_mut().zip(g) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut variance = vec![0.0; dim];
        if n > 1 {
            for (_, g) in &samples {
                for ((v, x), m) in variance.iter_mut().zip(g).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            variance.iter_mut().for_each(|v| *v /= (n - 1) as f64);
        }
        Self { value, mean, variance, n }
    }
}

/// The ELBO as a function of the flat parameter vector and the noise.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    spec: ModelSpec,
    shape: GuideShape,
    panel: &'a MortalityPanel,
}

impl<'a> Objective<'a> {
    pub fn new(spec: &ModelSpec, shape: GuideShape, panel: &'a MortalityPanel) -> Result<Self> {
        spec.validate()?;
        if spec.latent_dim != shape.latent_dim {
            return Err(Error::Shape(format!(
                "model has {} factors, guide has {}",
                spec.latent_dim, shape.latent_dim
            )));
        }
        if shape.n_times != panel.n_years() || spec.n_ages != panel.n_ages() {
            return Err(Error::Shape(format!(
                "panel is {}×{}, model/guide expect {}×{}",
                panel.n_ages(),
                panel.n_years(),
                spec.n_ages,
                shape.n_times
            )));
        }
        Ok(Self { spec: spec.clone(), shape, panel })
    }

    pub fn for_params(model: &ModelParams, guide: &GuideParams, panel: &'a MortalityPanel) -> Result<Self> {
        Self::new(&model.spec, guide.shape(), panel)
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_params() + self.shape.n_params()
    }

    pub fn noise_len(&self) -> usize {
        self.shape.noise_len()
    }

    pub fn join(model: &ModelParams, guide: &GuideParams) -> Vec<f64> {
        let mut flat = model.to_flat();
        flat.extend(guide.to_flat());
        flat
    }

    pub fn split(&self, flat: &[f64]) -> Result<(ModelParams, GuideParams)> {
        self.split_generic(flat)
    }

    fn split_generic<R: Real>(&self, flat: &[R]) -> Result<(ModelParams<R>, GuideParams<R>)> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.n_params(), flat.len())));
        }
        let (m, g) = flat.split_at(self.spec.n_params());
        Ok((ModelParams::from_flat(&self.spec, m)?, GuideParams::from_flat(self.shape, g)?))
    }

    fn eval<R: Real>(&self, flat: &[R], noise: &[f64]) -> Result<R> {
        let (model, guide) = self.split_generic(flat)?;
        let (path, logq) = guide.sample_path(noise)?;
        Ok(joint_logdensity(&path, &model, self.panel)? - logq)
    }

    /// `log p(y, x) - log q(x)` at the path driven by `noise`.
    pub fn sample_value(&self, flat: &[f64], noise: &[f64]) -> Result<f64> {
        self.eval(flat, noise)
    }

    /// Pathwise gradient of [`Objective::sample_value`].
    pub fn sample_gradient(&self, flat: &[f64], noise: &[f64]) -> Result<(f64, Vec<f64>)> {
        gradient(flat, |v| self.eval(v, noise))
    }

    /// Single-draw score-function estimator: `∇ψ log p(y, x)` for the model
    /// block and `(log p - log q) ∇θ log q(x)` for the guide block.
    pub fn score_function_sample(&self, flat: &[f64], noise: &[f64]) -> Result<(f64, Vec<f64>)> {
        let weight = self.eval(flat, noise)?;
        let (_, guide) = self.split(flat)?;
        let (path, _) = guide.sample_path(noise)?;
        let (_, grad) = gradient(flat, |v| {
            let (model, guide) = self.split_generic(v)?;
            let fixed = LatentPath::new(
                path.latent_dim,
                path.n_times,
                path.level.iter().map(|&x| Var::constant(x)).collect(),
                path.trend.iter().map(|&x| Var::constant(x)).collect(),
            )?;
            let logp = joint_logdensity(&fixed, &model, self.panel)?;
            let logq = guide.path_logdensity(&fixed)?;
            Ok(logp + logq * weight)
        })?;
        Ok((weight, grad))
    }

    /// Mean pathwise gradient over pre-drawn noise; samples run in parallel
    /// and are merged in index order.
    pub fn gradient_estimate(&self, flat: &[f64], noises: &[Vec<f64>]) -> Result<GradientEstimate> {
        let samples = noises
            .par_iter()
            .enumerate()
            .map(|(k, z)| self.sample_gradient(flat, z).map_err(|e| tag_sample(k, e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GradientEstimate::from_samples(samples))
    }
}

fn tag_sample(k: usize, e: Error) -> Error {
    Error::Evaluation(format!("sample {k}: {e}"))
}

/// `n` standard-normal noise vectors of length `len`.
pub fn draw_noise(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..len).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::Config("number of Monte-Carlo samples must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Unbiased `n`-sample estimate of the ELBO; deterministic given `seed`.
pub fn elbo_estimate(
    model: &ModelParams,
    guide: &GuideParams,
    panel: &MortalityPanel,
    n: usize,
    seed: u64,
) -> Result<ElboEstimate> {
    check_n(n)?;
    let obj = Objective::for_params(model, guide, panel)?;
    let flat = Objective::join(model, guide);
    let noises = draw_noise(&mut ChaCha8Rng::seed_from_u64(seed), n, obj.noise_len());
    let values = noises
        .par_iter()
        .enumerate()
        .map(|(k, z)| {
            let v = obj.sample_value(&flat, z).map_err(|e| tag_sample(k, e))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Evaluation(format!("sample {k}: non-finite ELBO term {v}")))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_error = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(ElboEstimate { mean, std_error, n })
}

/// Pathwise gradient of the `n`-sample ELBO estimate over `[ψ; θ]`.
pub fn elbo_gradient(
    model: &ModelParams,
    guide: &GuideParams,
    panel: &MortalityPanel,
    n: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    check_n(n)?;
    let obj = Objective::for_params(model, guide, panel)?;
    let noises = draw_noise(&mut ChaCha8Rng::seed_from_u64(seed), n, obj.noise_len());
    obj.gradient_estimate(&Objective::join(model, guide), &noises)
}

/// Score-function estimate of the same gradient. Test oracle only.
pub fn score_function_gradient(
    model: &ModelParams,
    guide: &GuideParams,
    panel: &MortalityPanel,
    n: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    check_n(n)?;
    let obj = Objective::for_params(model, guide, panel)?;
    let flat = Objective::join(model, guide);
    let noises = draw_noise(&mut ChaCha8Rng::seed_from_u64(seed), n, obj.noise_len());
    let samples = noises
        .par_iter()
        .enumerate()
        .map(|(k, z)| obj.score_function_sample(&flat, z).map_err(|e| tag_sample(k, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientEstimate::from_samples(samples))
}

/// Adam for gradient ascent.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p += lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ModelParams,
    pub guide: GuideParams,
    pub elbo_trace: Vec<f64>,
    pub config: TrainConfig,
}

impl FitResult {
    /// Mean ELBO over the trailing convergence window.
    pub fn smoothed_elbo(&self) -> Option<f64> {
        let n = self.elbo_trace.len();
        if n == 0 {
            return None;
        }
        let w = self.config.convergence_window.min(n);
        Some(self.elbo_trace[n - w..].iter().sum::<f64>() / w as f64)
    }

    /// Mean ELBO of the first and last quarter of the trace.
    pub fn quartile_means(&self) -> Option<(f64, f64)> {
        let n = self.elbo_trace.len();
        let q = n / 4;
        if q == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.elbo_trace[..q]), mean(&self.elbo_trace[n - q..])))
    }
}

/// Data-driven starting point for model and guide.
///
/// Intercepts are per-age means of smoothed log-rates; loadings and latent
/// levels come from the leading singular vectors of the centred log-rates.
pub fn initialize(spec: &ModelSpec, panel: &MortalityPanel) -> Result<(ModelParams, GuideParams)> {
    spec.validate()?;
    let (n_ages, n) = (panel.n_ages(), panel.n_years());
    if spec.n_ages != n_ages {
        return Err(Error::Shape(format!("model has {} ages, panel has {n_ages}", spec.n_ages)));
    }
    if n == 0 {
        return Err(Error::Shape("panel has no years".into()));
    }
    let d = spec.latent_dim;
    let intercept: Vec<f64> = (0..n_ages)
        .map(|a| {
            let obs: Vec<f64> =
                (0..n).filter(|&t| panel.is_observed(a, t)).map(|t| panel.smoothed_log_rate(a, t)).collect();
            if obs.is_empty() {
                0.0
            } else {
                obs.iter().sum::<f64>() / obs.len() as f64
            }
        })
        .collect();
    let centred = DMatrix::from_fn(n_ages, n, |a, t| {
        if panel.is_observed(a, t) {
            panel.smoothed_log_rate(a, t) - intercept[a]
        } else {
            0.0
        }
    });
    let svd = centred.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let scale = (n_ages as f64).sqrt();
    let mut loadings = vec![0.0; n_ages * d];
    let mut level = vec![0.0; d * n];
    for (i, &c) in order.iter().take(d).enumerate() {
        let s = svd.singular_values[c];
        // Orient each factor so its loadings are positive on average.
        let sign = if u.column(c).sum() < 0.0 { -1.0 } else { 1.0 };
        for a in 0..n_ages {
            loadings[a * d + i] = sign * u[(a, c)] * scale;
        }
        for t in 0..n {
            level[i * n + t] = sign * s * v_t[(c, t)] / scale;
        }
    }
    let mut trend = vec![0.0; d * n];
    let mut drift = vec![0.0; d];
    let mut step_sd = vec![0.0; d];
    for i in 0..d {
        let x = &level[i * n..(i + 1) * n];
        let diffs: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        for t in 0..n {
            trend[i * n + t] = match diffs.len() {
                0 => 0.0,
                len => diffs[t.min(len - 1)],
            };
        }
        if !diffs.is_empty() {
            let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
            drift[i] = m;
            step_sd[i] = (diffs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
        }
    }
    let sd_raw: Vec<f64> = step_sd.iter().map(|&s| inverse_softplus(s.max(0.01))).collect();
    let dynamics = LatentDynamicsParams {
        drift,
        persistence_raw: vec![0.0; d],
        level_sd_raw: sd_raw.clone(),
        trend_sd_raw: sd_raw,
    };
    let emission = match spec.kind {
        EmissionKind::Affine => EmissionParams::Affine { loadings, intercept },
        EmissionKind::Rbf => {
            let p = spec.rbf_count;
            let centers: Vec<f64> = if p == 1 {
                vec![(n_ages - 1) as f64 / 2.0]
            } else {
                (0..p).map(|j| j as f64 * (n_ages - 1) as f64 / (p - 1) as f64).collect()
            };
            let basis = DMatrix::from_fn(n_ages, p, |a, j| {
                crate::model::rbf_kernel(a as f64, centers[j], spec.tau, n_ages)
            });
            let target = DMatrix::from_row_slice(n_ages, d, &loadings);
            let w = basis
                .svd(true, true)
                .solve(&target, 1e-10)
                .map_err(|e| Error::Evaluation(format!("RBF least squares failed: {e}")))?;
            let mut weights = vec![0.0; p * d];
            for j in 0..p {
                for i in 0..d {
                    weights[j * d + i] = w[(j, i)];
                }
            }
            EmissionParams::Rbf { weights, centers, intercept, tau: spec.tau }
        }
    };
    let model = ModelParams { spec: spec.clone(), dynamics, emission };
    let guide = GuideParams::independent(d, n, level, trend, INIT_GUIDE_SD)?;
    Ok((model, guide))
}

/// Fits from the data-driven initialisation.
pub fn fit(panel: &MortalityPanel, spec: &ModelSpec, config: &TrainConfig) -> Result<FitResult> {
    let (model, guide) = initialize(spec, panel)?;
    fit_from(panel, model, guide, config)
}

/// Joint stochastic-gradient ascent on `[ψ; θ]` from the given start.
pub fn fit_from(
    panel: &MortalityPanel,
    model: ModelParams,
    guide: GuideParams,
    config: &TrainConfig,
) -> Result<FitResult> {
    ascend(panel, model, guide, config, false)
}

/// Ascent on the guide alone; the model parameters stay as given.
pub fn fit_guide(
    panel: &MortalityPanel,
    model: ModelParams,
    guide: GuideParams,
    config: &TrainConfig,
) -> Result<FitResult> {
    ascend(panel, model, guide, config, true)
}

fn ascend(
    panel: &MortalityPanel,
    model: ModelParams,
    guide: GuideParams,
    config: &TrainConfig,
    guide_only: bool,
) -> Result<FitResult> {
    config.validate()?;
    let n_model = model.spec.n_params();
    let obj = Objective::for_params(&model, &guide, panel)?;
    let mut flat = Objective::join(&model, &guide);
    let mut adam = Adam::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.steps);
    let mut lr = config.learning_rate;
    let diverged = |step: usize, reason: String, flat: &[f64]| -> Error {
        let snapshot = match obj.split(flat) {
            Ok((model, guide)) => ParamSnapshot { model, guide },
            Err(e) => return e,
        };
        Error::Diverged { step, reason, snapshot: Box::new(snapshot) }
    };
    for step in 0..config.steps {
        let noises = draw_noise(&mut rng, config.mc_samples, obj.noise_len());
        let mut est = match obj.gradient_estimate(&flat, &noises) {
            Ok(est) => est,
            Err(e) => return Err(diverged(step, e.to_string(), &flat)),
        };
        if !est.value.is_finite() || est.mean.iter().any(|g| !g.is_finite()) {
            return Err(diverged(step, format!("non-finite ELBO estimate {}", est.value), &flat));
        }
        trace.push(est.value);
        if guide_only {
            est.mean[..n_model].fill(0.0);
        }
        adam.ascend(&mut flat, &est.mean, lr);
        lr *= config.lr_decay;
        if (step + 1) % 1000 == 0 {
            log::debug!("step {}: elbo {:.3}", step + 1, est.value);
        }
    }
    let (model, guide) = obj.split(&flat)?;
    Ok(FitResult { model, guide, elbo_trace: trace, config: config.clone() })
}
