//! The generative model.
//!
//! Each latent factor `i` carries a level `X_i` and a trend `K_i`:
//!
//! ```text
//! X_{i,t} = X_{i,t-1} + K_{i,t-1} + U_{i,t},              U ~ N(0, σ_X,i²)
//! K_{i,t} = μ_i + φ_i (K_{i,t-1} - μ_i) + V_{i,t},         V ~ N(0, σ_K,i²)
//! D_{a,t} | X_t ~ Poisson(E_{a,t} · exp(f_a(X_t)))
//! ```
//!
//! with `(X_0, K_0)` drawn from an independent diffuse Gaussian and `f` either
//! affine or a sum of radial basis functions over age.
//!
//! All parameter containers are generic over [`Real`] so the same code
//! evaluates densities in `f64` and records them on a tape. They are stored
//! unconstrained: persistence through a logistic map, standard deviations
//! through softplus.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::density::{gaussian_logpdf, poisson_logpmf_log_rate};
use crate::error::{Error, Result};
use crate::panel::MortalityPanel;
use crate::tape::{matvec, Real};

pub const DEFAULT_TAU: f64 = 10.0;
pub const DEFAULT_INIT_SD: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmissionKind {
    Affine,
    Rbf,
}

/// Architecture of a model: shapes and fixed hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: EmissionKind,
    pub latent_dim: usize,
    pub n_ages: usize,
    /// Number of radial basis functions (RBF only).
    pub rbf_count: usize,
    /// Fixed RBF width parameter τ (RBF only).
    pub tau: f64,
    /// Standard deviation of the initial-state prior on `(X_0, K_0)`.
    pub init_sd: f64,
}

impl ModelSpec {
    pub fn affine(latent_dim: usize, n_ages: usize) -> Self {
        Self {
            kind: EmissionKind::Affine,
            latent_dim,
            n_ages,
            rbf_count: 0,
            tau: DEFAULT_TAU,
            init_sd: DEFAULT_INIT_SD,
        }
    }

    pub fn rbf(latent_dim: usize, n_ages: usize, rbf_count: usize, tau: f64) -> Self {
        Self { kind: EmissionKind::Rbf, latent_dim, n_ages, rbf_count, tau, init_sd: DEFAULT_INIT_SD }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be at least 1".into()));
        }
        if self.n_ages == 0 {
            return Err(Error::Config("model needs at least one age".into()));
        }
        if self.kind == EmissionKind::Rbf {
            if self.rbf_count == 0 {
                return Err(Error::Config("RBF emission needs at least one basis function".into()));
            }
            if !(self.tau > 0.0) {
                return Err(Error::Config(format!("RBF width τ must be positive, got {}", self.tau)));
            }
        }
        if !(self.init_sd > 0.0) {
            return Err(Error::Config("initial-state sd must be positive".into()));
        }
        Ok(())
    }

    fn dynamics_len(&self) -> usize {
        4 * self.latent_dim
    }

    fn emission_len(&self) -> usize {
        match self.kind {
            EmissionKind::Affine => self.n_ages * self.latent_dim + self.n_ages,
            EmissionKind::Rbf => self.rbf_count * self.latent_dim + self.rbf_count + self.n_ages,
        }
    }

    /// Length of the flat unconstrained parameter vector.
    pub fn n_params(&self) -> usize {
        self.dynamics_len() + self.emission_len()
    }

    /// Positions of the emission parameters in the flat vector.
    pub fn emission_range(&self) -> Range<usize> {
        self.dynamics_len()..self.n_params()
    }
}

/// Per-factor latent dynamics in unconstrained form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDynamicsParams<R = f64> {
    pub drift: Vec<R>,
    /// logit φ
    pub persistence_raw: Vec<R>,
    /// softplus⁻¹ σ_X
    pub level_sd_raw: Vec<R>,
    /// softplus⁻¹ σ_K
    pub trend_sd_raw: Vec<R>,
}

/// Dynamics on their natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedDynamics {
    pub drift: Vec<f64>,
    pub persistence: Vec<f64>,
    pub level_sd: Vec<f64>,
    pub trend_sd: Vec<f64>,
}

impl ConstrainedDynamics {
    pub fn latent_dim(&self) -> usize {
        self.drift.len()
    }
}

/// Inverse of softplus; `-∞` for 0.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl<R: Real> LatentDynamicsParams<R> {
    pub fn latent_dim(&self) -> usize {
        self.drift.len()
    }

    pub fn persistence(&self, i: usize) -> R {
        self.persistence_raw[i].logistic()
    }

    pub fn level_sd(&self, i: usize) -> R {
        self.level_sd_raw[i].softplus()
    }

    pub fn trend_sd(&self, i: usize) -> R {
        self.trend_sd_raw[i].softplus()
    }

    pub fn constrained(&self) -> ConstrainedDynamics {
        let d = self.latent_dim();
        ConstrainedDynamics {
            drift: self.drift.iter().map(|v| v.value()).collect(),
            persistence: (0..d).map(|i| self.persistence(i).value()).collect(),
            level_sd: (0..d).map(|i| self.level_sd(i).value()).collect(),
            trend_sd: (0..d).map(|i| self.trend_sd(i).value()).collect(),
        }
    }
}

impl LatentDynamicsParams<f64> {
    pub fn from_constrained(c: &ConstrainedDynamics) -> Self {
        Self {
            drift: c.drift.clone(),
            persistence_raw: c.persistence.iter().map(|&p| logit(p)).collect(),
            level_sd_raw: c.level_sd.iter().map(|&s| inverse_softplus(s)).collect(),
            trend_sd_raw: c.trend_sd.iter().map(|&s| inverse_softplus(s)).collect(),
        }
    }
}

/// Emission map `f: R^d → R^{n_ages}` from latent factors to log-rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmissionParams<R = f64> {
    /// `f(x) = A x + b`; `loadings` is `A`, row-major `n_ages × d`.
    Affine { loadings: Vec<R>, intercept: Vec<R> },
    /// `f_a(x) = xᵀ Σ_j w_j exp(-τ² ((a - c_j)/n_ages)²) + b_a`;
    /// `weights` is row-major `p × d`.
    Rbf { weights: Vec<R>, centers: Vec<R>, intercept: Vec<R>, tau: f64 },
}

/// `exp(-τ² ((age - center)/n_ages)²)`
pub fn rbf_kernel<R: Real>(age: f64, center: R, tau: f64, n_ages: usize) -> R {
    let z = (center - age) * (tau / n_ages as f64);
    (-(z.square())).exp()
}

impl<R: Real> EmissionParams<R> {
    pub fn n_ages(&self) -> usize {
        match self {
            EmissionParams::Affine { intercept, .. } | EmissionParams::Rbf { intercept, .. } => {
                intercept.len()
            }
        }
    }

    pub fn intercept(&self) -> &[R] {
        match self {
            EmissionParams::Affine { intercept, .. } | EmissionParams::Rbf { intercept, .. } => intercept,
        }
    }

    /// Effective loading matrix (row-major `n_ages × d`).
    ///
    /// For the RBF map this is `Σ_j k_j(a) w_j`, computed once so that every
    /// time step reuses it.
    pub fn loadings(&self, latent_dim: usize) -> Result<Vec<R>> {
        match self {
            EmissionParams::Affine { loadings, intercept } => {
                if loadings.len() != intercept.len() * latent_dim {
                    return Err(Error::Shape(format!(
                        "affine loadings have {} entries, expected {}×{latent_dim}",
                        loadings.len(),
                        intercept.len()
                    )));
                }
                Ok(loadings.clone())
            }
            EmissionParams::Rbf { weights, centers, intercept, tau } => {
                let p = centers.len();
                if p == 0 {
                    return Err(Error::Config("RBF emission needs at least one basis function".into()));
                }
                if weights.len() != p * latent_dim {
                    return Err(Error::Shape(format!(
                        "RBF weights have {} entries, expected {p}×{latent_dim}",
                        weights.len()
                    )));
                }
                let n_ages = intercept.len();
                let mut out = Vec::with_capacity(n_ages * latent_dim);
                for a in 0..n_ages {
                    let k: Vec<R> =
                        centers.iter().map(|&c| rbf_kernel(a as f64, c, *tau, n_ages)).collect();
                    for i in 0..latent_dim {
                        let column: Vec<R> = (0..p).map(|j| weights[j * latent_dim + i]).collect();
                        out.push(R::dot(&k, &column));
                    }
                }
                Ok(out)
            }
        }
    }

    /// `f(x)` for one latent vector.
    pub fn log_rates(&self, x: &[R]) -> Result<Vec<R>> {
        let loadings = self.loadings(x.len())?;
        Ok(apply_loadings(&loadings, self.intercept(), x))
    }
}

fn apply_loadings<R: Real>(loadings: &[R], intercept: &[R], x: &[R]) -> Vec<R> {
    matvec(loadings, x).into_iter().zip(intercept).map(|(v, &b)| v + b).collect()
}

/// Full model parameters `ψ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<R = f64> {
    pub spec: ModelSpec,
    pub dynamics: LatentDynamicsParams<R>,
    pub emission: EmissionParams<R>,
}

impl ModelParams<f64> {
    /// Flat unconstrained vector: dynamics, then emission parameters.
    pub fn to_flat(&self) -> Vec<f64> {
        let dy = &self.dynamics;
        let mut out = Vec::with_capacity(self.spec.n_params());
        for block in [&dy.drift, &dy.persistence_raw, &dy.level_sd_raw, &dy.trend_sd_raw] {
            out.extend_from_slice(block);
        }
        match &self.emission {
            EmissionParams::Affine { loadings, intercept } => {
                out.extend_from_slice(loadings);
                out.extend_from_slice(intercept);
            }
            EmissionParams::Rbf { weights, centers, intercept, .. } => {
                out.extend_from_slice(weights);
                out.extend_from_slice(centers);
                out.extend_from_slice(intercept);
            }
        }
        out
    }
}

impl<R: Real> ModelParams<R> {
    pub fn from_flat(spec: &ModelSpec, flat: &[R]) -> Result<Self> {
        if flat.len() != spec.n_params() {
            return Err(Error::Shape(format!(
                "model expects {} parameters, got {}",
                spec.n_params(),
                flat.len()
            )));
        }
        let d = spec.latent_dim;
        let mut rest = flat;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let dynamics = LatentDynamicsParams {
            drift: take(d),
            persistence_raw: take(d),
            level_sd_raw: take(d),
            trend_sd_raw: take(d),
        };
        let emission = match spec.kind {
            EmissionKind::Affine => {
                EmissionParams::Affine { loadings: take(spec.n_ages * d), intercept: take(spec.n_ages) }
            }
            EmissionKind::Rbf => EmissionParams::Rbf {
                weights: take(spec.rbf_count * d),
                centers: take(spec.rbf_count),
                intercept: take(spec.n_ages),
                tau: spec.tau,
            },
        };
        Ok(Self { spec: spec.clone(), dynamics, emission })
    }
}

/// Latent level and trend paths, each row-major `d × n_times`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPath<R = f64> {
    pub latent_dim: usize,
    pub n_times: usize,
    pub level: Vec<R>,
    pub trend: Vec<R>,
}

impl<R: Real> LatentPath<R> {
    pub fn new(latent_dim: usize, n_times: usize, level: Vec<R>, trend: Vec<R>) -> Result<Self> {
        if level.len() != latent_dim * n_times || trend.len() != latent_dim * n_times {
            return Err(Error::Shape(format!(
                "latent path {latent_dim}×{n_times} got {} level and {} trend entries",
                level.len(),
                trend.len()
            )));
        }
        Ok(Self { latent_dim, n_times, level, trend })
    }

    pub fn x(&self, i: usize, t: usize) -> R {
        self.level[i * self.n_times + t]
    }

    pub fn k(&self, i: usize, t: usize) -> R {
        self.trend[i * self.n_times + t]
    }

    /// `X_{·,t}`
    pub fn level_at(&self, t: usize) -> Vec<R> {
        (0..self.latent_dim).map(|i| self.x(i, t)).collect()
    }
}

impl LatentPath<f64> {
    pub fn is_finite(&self) -> bool {
        self.level.iter().chain(&self.trend).all(|v| v.is_finite())
    }
}

/// log p(x): initial-state prior plus level and trend transitions.
pub fn transition_logdensity<R: Real>(
    path: &LatentPath<R>,
    dynamics: &LatentDynamicsParams<R>,
    init_sd: f64,
) -> Result<R> {
    if dynamics.latent_dim() != path.latent_dim {
        return Err(Error::Shape(format!(
            "dynamics for {} factors, path has {}",
            dynamics.latent_dim(),
            path.latent_dim
        )));
    }
    if path.n_times == 0 {
        return Ok(R::constant(0.0));
    }
    let zero = R::constant(0.0);
    let init_sd = R::constant(init_sd);
    let mut terms = Vec::with_capacity(path.latent_dim * (2 * path.n_times + 2));
    for i in 0..path.latent_dim {
        let phi = dynamics.persistence(i);
        let mu = dynamics.drift[i];
        let sx = dynamics.level_sd(i);
        let sk = dynamics.trend_sd(i);
        terms.push(gaussian_logpdf(path.x(i, 0), zero, init_sd)?);
        terms.push(gaussian_logpdf(path.k(i, 0), zero, init_sd)?);
        for t in 1..path.n_times {
            let (x_prev, k_prev) = (path.x(i, t - 1), path.k(i, t - 1));
            terms.push(gaussian_logpdf(path.x(i, t), x_prev + k_prev, sx)?);
            terms.push(gaussian_logpdf(path.k(i, t), mu + phi * (k_prev - mu), sk)?);
        }
    }
    Ok(R::sum(&terms))
}

/// Log-rates `f_a(X_t)` for every age and time, row-major `n_ages × n_times`.
pub fn log_rate_matrix<R: Real>(path: &LatentPath<R>, emission: &EmissionParams<R>) -> Result<Vec<R>> {
    let loadings = emission.loadings(path.latent_dim)?;
    let n_ages = emission.n_ages();
    let mut out = vec![R::constant(0.0); n_ages * path.n_times];
    for t in 0..path.n_times {
        let eta = apply_loadings(&loadings, emission.intercept(), &path.level_at(t));
        for (a, v) in eta.into_iter().enumerate() {
            out[a * path.n_times + t] = v;
        }
    }
    Ok(out)
}

/// log p(y | x): Poisson terms over every observed cell.
pub fn observation_logdensity<R: Real>(
    path: &LatentPath<R>,
    emission: &EmissionParams<R>,
    panel: &MortalityPanel,
) -> Result<R> {
    if panel.n_years() != path.n_times || panel.n_ages() != emission.n_ages() {
        return Err(Error::Shape(format!(
            "panel {}×{} does not match model {}×{}",
            panel.n_ages(),
            panel.n_years(),
            emission.n_ages(),
            path.n_times
        )));
    }
    let loadings = emission.loadings(path.latent_dim)?;
    let mut terms = Vec::with_capacity(panel.n_ages() * panel.n_years());
    for t in 0..path.n_times {
        let mut eta: Option<Vec<R>> = None;
        for a in 0..panel.n_ages() {
            if !panel.is_observed(a, t) {
                continue;
            }
            let eta = eta.get_or_insert_with(|| {
                apply_loadings(&loadings, emission.intercept(), &path.level_at(t))
            });
            let log_rate = eta[a] + panel.exposure(a, t).ln();
            terms.push(poisson_logpmf_log_rate(panel.death_count(a, t), log_rate)?);
        }
    }
    Ok(R::sum(&terms))
}

/// log p(y, x) = log p(y | x) + log p(x)
pub fn joint_logdensity<R: Real>(
    path: &LatentPath<R>,
    params: &ModelParams<R>,
    panel: &MortalityPanel,
) -> Result<R> {
    let prior = transition_logdensity(path, &params.dynamics, params.spec.init_sd)?;
    let likelihood = observation_logdensity(path, &params.emission, panel)?;
    Ok(prior + likelihood)
}

/// How a simulation chooses `(X_0, K_0)`.
#[derive(Debug, Clone, PartialEq)]
pub enum SimulationStart {
    /// Draw from the model's initial-state prior.
    Prior,
    Fixed { level: Vec<f64>, trend: Vec<f64> },
}

/// Draws a latent path and Poisson deaths for the exposures in `exposures`.
///
/// Deterministic given `seed`. The returned panel keeps the input exposures.
pub fn simulate(
    params: &ModelParams<f64>,
    exposures: &MortalityPanel,
    start: &SimulationStart,
    seed: u64,
) -> Result<(LatentPath<f64>, MortalityPanel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dyn_c = params.dynamics.constrained();
    let d = dyn_c.latent_dim();
    let n = exposures.n_years();
    let mut level = vec![0.0; d * n];
    let mut trend = vec![0.0; d * n];
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    for i in 0..d {
        if n == 0 {
            break;
        }
        let (x0, k0) = match start {
            SimulationStart::Prior => (params.spec.init_sd * normal(), params.spec.init_sd * normal()),
            SimulationStart::Fixed { level, trend } => (level[i], trend[i]),
        };
        level[i * n] = x0;
        trend[i * n] = k0;
        for t in 1..n {
            let (x_prev, k_prev) = (level[i * n + t - 1], trend[i * n + t - 1]);
            level[i * n + t] = x_prev + k_prev + dyn_c.level_sd[i] * normal();
            trend[i * n + t] = dyn_c.drift[i]
                + dyn_c.persistence[i] * (k_prev - dyn_c.drift[i])
                + dyn_c.trend_sd[i] * normal();
        }
    }
    let path = LatentPath::new(d, n, level, trend)?;
    let eta = log_rate_matrix(&path, &params.emission)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let n_ages = exposures.n_ages();
    let mut deaths = vec![0.0; n_ages * n];
    let mut exps = vec![0.0; n_ages * n];
    for a in 0..n_ages {
        for t in 0..n {
            let e = exposures.exposure(a, t);
            exps[a * n + t] = e;
            if e > 0.0 {
                let rate = e * eta[a * n + t].exp();
                deaths[a * n + t] = sample_poisson(rate, &mut rng)?;
            }
        }
    }
    let panel = MortalityPanel::new(exposures.first_year(), n_ages, n, deaths, exps)?;
    Ok((path, panel))
}

pub(crate) fn sample_poisson(rate: f64, rng: &mut impl rand::Rng) -> Result<f64> {
    if rate == 0.0 {
        return Ok(0.0);
    }
    let dist = Poisson::new(rate)
        .map_err(|e| Error::Evaluation(format!("cannot sample Poisson({rate}): {e}")))?;
    Ok(dist.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::HALF_LN_2PI;
    use crate::tape::gradient;
    use mortvi_oracles::fd::{central_gradient, relative_error};
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * (r.random::<f64>() * 2.0 - 1.0)).collect()
    }

    pub(crate) fn random_params(spec: &ModelSpec, seed: u64) -> ModelParams<f64> {
        let mut r = rng(seed);
        let mut flat = random_vec(&mut r, spec.n_params(), 0.5);
        if spec.kind == EmissionKind::Rbf {
            let range = spec.emission_range();
            let c0 = range.start + spec.rbf_count * spec.latent_dim;
            for j in 0..spec.rbf_count {
                flat[c0 + j] = spec.n_ages as f64 * r.random::<f64>();
            }
        }
        ModelParams::from_flat(spec, &flat).unwrap()
    }

    fn random_path(d: usize, n: usize, seed: u64) -> LatentPath<f64> {
        let mut r = rng(seed);
        LatentPath::new(d, n, random_vec(&mut r, d * n, 1.0), random_vec(&mut r, d * n, 0.2)).unwrap()
    }

    fn random_panel(n_ages: usize, n_years: usize, seed: u64) -> MortalityPanel {
        let mut r = rng(seed);
        let e: Vec<f64> = (0..n_ages * n_years).map(|_| 10.0 + 50.0 * r.random::<f64>()).collect();
        let d: Vec<f64> = (0..n_ages * n_years).map(|_| (r.random::<f64>() * 20.0).floor()).collect();
        MortalityPanel::new(1990, n_ages, n_years, d, e).unwrap()
    }

    #[test]
    fn zero_loadings_give_intercept() {
        let b = vec![0.5, -1.0, 2.0];
        let e = EmissionParams::Affine { loadings: vec![0.0; 6], intercept: b.clone() };
        assert_eq!(e.log_rates(&[3.0, -7.0]).unwrap(), b);
        let e = EmissionParams::Rbf { weights: vec![0.0; 4], centers: vec![1.0, 2.0], intercept: b.clone(), tau: 10.0 };
        assert_eq!(e.log_rates(&[3.0, -7.0]).unwrap(), b);
    }

    #[test]
    fn unit_loadings_broadcast() {
        let e = EmissionParams::Affine { loadings: vec![1.0; 4], intercept: vec![0.0; 4] };
        assert_eq!(e.log_rates(&[2.0]).unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn affine_matches_loop() {
        let mut r = rng(1);
        let (n_ages, d) = (7, 3);
        let a = random_vec(&mut r, n_ages * d, 2.0);
        let b = random_vec(&mut r, n_ages, 2.0);
        let x = random_vec(&mut r, d, 2.0);
        let e = EmissionParams::Affine { loadings: a.clone(), intercept: b.clone() };
        let got = e.log_rates(&x).unwrap();
        for age in 0..n_ages {
            let mut s = b[age];
            for i in 0..d {
                s += a[age * d + i] * x[i];
            }
            assert!((got[age] - s).abs() < 1e-12);
        }
        assert!(matches!(e.log_rates(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn rbf_peak_and_loop() {
        let e = EmissionParams::Rbf { weights: vec![0.7, -0.2], centers: vec![3.0], intercept: vec![0.1; 6], tau: 10.0 };
        let got = e.log_rates(&[2.0, 1.0]).unwrap();
        assert_eq!(got[3], 2.0 * 0.7 + 1.0 * -0.2 + 0.1);

        let mut r = rng(2);
        let (n_ages, d, p, tau) = (9, 2, 3, 10.0);
        let w = random_vec(&mut r, p * d, 1.0);
        let c: Vec<f64> = (0..p).map(|_| r.random::<f64>() * n_ages as f64).collect();
        let b = random_vec(&mut r, n_ages, 1.0);
        let x = random_vec(&mut r, d, 1.0);
        let e = EmissionParams::Rbf { weights: w.clone(), centers: c.clone(), intercept: b.clone(), tau };
        let got = e.log_rates(&x).unwrap();
        for a in 0..n_ages {
            let mut s = 0.0;
            for j in 0..p {
                let k = (-(tau * tau) * ((a as f64 - c[j]) / n_ages as f64).powi(2)).exp();
                assert!(k > 0.0 && k <= 1.0);
                for i in 0..d {
                    s += x[i] * w[j * d + i] * k;
                }
            }
            assert!((got[a] - (s + b[a])).abs() < 1e-12);
        }
    }

    #[test]
    fn rbf_without_bases_is_config_error() {
        let e = EmissionParams::Rbf { weights: vec![], centers: vec![], intercept: vec![0.0; 3], tau: 10.0 };
        assert!(matches!(e.log_rates(&[1.0]), Err(Error::Config(_))));
        assert!(ModelSpec::rbf(2, 10, 0, 10.0).validate().is_err());
        assert!(ModelSpec::rbf(2, 10, 3, 0.0).validate().is_err());
        assert!(ModelSpec::affine(0, 10).validate().is_err());
    }

    fn unit_dynamics(d: usize, drift: f64, phi: f64, sd: f64) -> LatentDynamicsParams<f64> {
        LatentDynamicsParams::from_constrained(&ConstrainedDynamics {
            drift: vec![drift; d],
            persistence: vec![phi; d],
            level_sd: vec![sd; d],
            trend_sd: vec![sd; d],
        })
    }

    #[test]
    fn transition_at_means() {
        let path = LatentPath::new(1, 2, vec![0.0; 2], vec![0.0; 2]).unwrap();
        let v = transition_logdensity(&path, &unit_dynamics(1, 0.0, 0.0, 1.0), 1.0).unwrap();
        assert!((v + 4.0 * HALF_LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn unit_persistence_ignores_drift() {
        let path = random_path(1, 5, 3);
        let mut dy = unit_dynamics(1, 0.0, 0.5, 0.3);
        dy.persistence_raw = vec![f64::INFINITY];
        assert_eq!(dy.persistence(0), 1.0);
        let a = transition_logdensity(&path, &dy, 10.0).unwrap();
        dy.drift = vec![4.2];
        let b = transition_logdensity(&path, &dy, 10.0).unwrap();
        assert_eq!(a, b);
    }

    /// Term-by-term oracle straight from the recursion.
    fn transition_oracle(path: &LatentPath<f64>, c: &ConstrainedDynamics, s0: f64) -> f64 {
        let lpdf = |x: f64, m: f64, s: f64| -0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln() - 0.5 * ((x - m) / s).powi(2);
        let mut total = 0.0;
        for i in 0..path.latent_dim {
            total += lpdf(path.x(i, 0), 0.0, s0) + lpdf(path.k(i, 0), 0.0, s0);
            for t in 1..path.n_times {
                total += lpdf(path.x(i, t), path.x(i, t - 1) + path.k(i, t - 1), c.level_sd[i]);
                let m = c.drift[i] + c.persistence[i] * (path.k(i, t - 1) - c.drift[i]);
                total += lpdf(path.k(i, t), m, c.trend_sd[i]);
            }
        }
        total
    }

    #[test]
    fn transition_matches_oracle() {
        let spec = ModelSpec::affine(3, 4);
        let params = random_params(&spec, 4);
        let path = random_path(3, 6, 5);
        let v = transition_logdensity(&path, &params.dynamics, 10.0).unwrap();
        let o = transition_oracle(&path, &params.dynamics.constrained(), 10.0);
        assert!((v - o).abs() < 1e-12 * o.abs().max(1.0));
    }

    #[test]
    fn transition_invariant_under_factor_relabeling() {
        let spec = ModelSpec::affine(2, 3);
        let params = random_params(&spec, 6);
        let path = random_path(2, 5, 7);
        let swap = |v: &Vec<f64>, n: usize| -> Vec<f64> { [&v[n..], &v[..n]].concat() };
        let swapped_path = LatentPath::new(2, 5, swap(&path.level, 5), swap(&path.trend, 5)).unwrap();
        let dy = &params.dynamics;
        let swapped_dy = LatentDynamicsParams {
            drift: swap(&dy.drift, 1),
            persistence_raw: swap(&dy.persistence_raw, 1),
            level_sd_raw: swap(&dy.level_sd_raw, 1),
            trend_sd_raw: swap(&dy.trend_sd_raw, 1),
        };
        let a = transition_logdensity(&path, dy, 10.0).unwrap();
        let b = transition_logdensity(&swapped_path, &swapped_dy, 10.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn observation_single_cells() {
        let e = EmissionParams::Affine { loadings: vec![0.0], intercept: vec![0.0] };
        let path = LatentPath::new(1, 1, vec![0.3], vec![0.0]).unwrap();
        let panel = MortalityPanel::new(2000, 1, 1, vec![0.0], vec![1.0]).unwrap();
        assert!((observation_logdensity(&path, &e, &panel).unwrap() + 1.0).abs() < 1e-15);
        let empty = MortalityPanel::new(2000, 1, 1, vec![0.0], vec![0.0]).unwrap();
        assert_eq!(observation_logdensity(&path, &e, &empty).unwrap(), 0.0);
    }

    #[test]
    fn observation_overflow_is_reported() {
        let e = EmissionParams::Affine { loadings: vec![1.0], intercept: vec![0.0] };
        let path = LatentPath::new(1, 1, vec![800.0], vec![0.0]).unwrap();
        let panel = MortalityPanel::new(2000, 1, 1, vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(observation_logdensity(&path, &e, &panel), Err(Error::Evaluation(_))));
    }

    #[test]
    fn observation_matches_cell_loop() {
        let spec = ModelSpec::affine(2, 3);
        let params = random_params(&spec, 8);
        let path = random_path(2, 2, 9);
        let panel = random_panel(3, 2, 10);
        let v = observation_logdensity(&path, &params.emission, &panel).unwrap();
        let EmissionParams::Affine { loadings, intercept } = &params.emission else { unreachable!() };
        let mut o = 0.0;
        for a in 0..3 {
            for t in 0..2 {
                let eta = intercept[a] + loadings[a * 2] * path.x(0, t) + loadings[a * 2 + 1] * path.x(1, t);
                let lam = panel.exposure(a, t) * eta.exp();
                let k = panel.deaths(a, t);
                let lnfact: f64 = (1..=k as u64).map(|j| (j as f64).ln()).sum();
                o += k * lam.ln() - lam - lnfact;
            }
        }
        assert!((v - o).abs() < 1e-12 * o.abs().max(1.0), "{v} vs {o}");
    }

    #[test]
    fn joint_is_sum_of_parts() {
        let spec = ModelSpec::rbf(2, 4, 3, 10.0);
        let params = random_params(&spec, 11);
        let path = random_path(2, 3, 12);
        let panel = random_panel(4, 3, 13);
        let j = joint_logdensity(&path, &params, &panel).unwrap();
        let t = transition_logdensity(&path, &params.dynamics, spec.init_sd).unwrap();
        let o = observation_logdensity(&path, &params.emission, &panel).unwrap();
        assert!((j - (t + o)).abs() < 1e-12 * j.abs());

        let empty = MortalityPanel::new(1990, 4, 3, vec![0.0; 12], vec![0.0; 12]).unwrap();
        assert_eq!(joint_logdensity(&path, &params, &empty).unwrap(), t);
    }

    #[test]
    fn lee_carter_like_special_case() {
        // d = 1 and A = 1 gives η_{a,t} = X_t + b_a.
        let b = vec![-3.0, -2.0, -1.0];
        let spec = ModelSpec::affine(1, 3);
        let params = ModelParams {
            spec: spec.clone(),
            dynamics: unit_dynamics(1, -0.02, 0.5, 0.1),
            emission: EmissionParams::Affine { loadings: vec![1.0; 3], intercept: b.clone() },
        };
        let path = random_path(1, 4, 14);
        let panel = random_panel(3, 4, 15);
        let got = observation_logdensity(&path, &params.emission, &panel).unwrap();
        let mut hand = 0.0;
        for a in 0..3 {
            for t in 0..4 {
                let lam = panel.exposure(a, t) * (path.x(0, t) + b[a]).exp();
                hand += crate::density::poisson_logpmf(panel.deaths(a, t), lam).unwrap();
            }
        }
        assert!((got - hand).abs() < 1e-10);
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        for spec in [ModelSpec::affine(2, 4), ModelSpec::rbf(2, 4, 3, 10.0)] {
            let params = random_params(&spec, 16);
            let path = random_path(2, 3, 17);
            let panel = random_panel(4, 3, 18);
            let flat = params.to_flat();
            let (_, g) = gradient(&flat, |v| {
                let p = ModelParams::from_flat(&spec, v)?;
                let lifted = LatentPath::new(
                    2,
                    3,
                    path.level.iter().map(|&x| crate::tape::Var::constant(x)).collect(),
                    path.trend.iter().map(|&x| crate::tape::Var::constant(x)).collect(),
                )?;
                joint_logdensity(&lifted, &p, &panel)
            })
            .unwrap();
            let fd = central_gradient(
                |v| joint_logdensity(&path, &ModelParams::from_flat(&spec, v).unwrap(), &panel).unwrap(),
                &flat,
                1e-5,
            );
            for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
                assert!(relative_error(*a, *b, 1e-6) < 1e-4, "{:?} coord {i}: {a} vs {b}", spec.kind);
            }
        }
    }

    #[test]
    fn noise_free_simulation_is_linear_ramp() {
        let spec = ModelSpec::affine(1, 2);
        let mut params = random_params(&spec, 19);
        params.dynamics = LatentDynamicsParams::from_constrained(&ConstrainedDynamics {
            drift: vec![0.3],
            persistence: vec![1.0],
            level_sd: vec![0.0],
            trend_sd: vec![0.0],
        });
        let exposures = random_panel(2, 6, 20);
        let start = SimulationStart::Fixed { level: vec![0.0], trend: vec![-0.04] };
        let (path, _) = simulate(&params, &exposures, &start, 1).unwrap();
        for t in 0..6 {
            assert!((path.x(0, t) - -0.04 * t as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn simulation_is_deterministic_and_respects_zero_exposure() {
        let spec = ModelSpec::affine(1, 2);
        let params = random_params(&spec, 21);
        let exposures = MortalityPanel::new(2000, 2, 2, vec![0.0; 4], vec![0.0, 100.0, 100.0, 0.0]).unwrap();
        let (_, a) = simulate(&params, &exposures, &SimulationStart::Prior, 5).unwrap();
        let (_, b) = simulate(&params, &exposures, &SimulationStart::Prior, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.deaths(0, 0), 0.0);
        assert_eq!(a.deaths(1, 1), 0.0);
    }

    #[test]
    fn simulated_death_mean_matches_rate() {
        let spec = ModelSpec::affine(1, 1);
        let params = ModelParams {
            spec,
            dynamics: unit_dynamics(1, 0.0, 0.5, 0.1),
            emission: EmissionParams::Affine { loadings: vec![0.5], intercept: vec![-4.0] },
        };
        let exposures = MortalityPanel::new(2000, 1, 1, vec![0.0], vec![500.0]).unwrap();
        let start = SimulationStart::Fixed { level: vec![1.0], trend: vec![0.0] };
        let n = 10_000;
        let draws: Vec<f64> =
            (0..n).map(|s| simulate(&params, &exposures, &start, s).unwrap().1.deaths(0, 0)).collect();
        let rate = 500.0 * (-4.0f64 + 0.5).exp();
        let mean = mortvi_oracles::stats::mean(&draws);
        let se = mortvi_oracles::stats::std_error(&draws);
        assert!((mean - rate).abs() < 3.0 * se, "mean {mean}, rate {rate}, se {se}");
    }

    #[test]
    fn flat_round_trip() {
        for spec in [ModelSpec::affine(3, 5), ModelSpec::rbf(2, 5, 4, 10.0)] {
            let p = random_params(&spec, 22);
            let back = ModelParams::from_flat(&spec, &p.to_flat()).unwrap();
            assert_eq!(back, p);
            assert!(ModelParams::<f64>::from_flat(&spec, &[0.0]).is_err());
        }
    }

    #[test]
    fn constraint_transforms_round_trip() {
        for &s in &[1e-6, 0.1, 1.0, 25.0, 60.0] {
            assert!((inverse_softplus(s).softplus() - s).abs() < 1e-12 * s.max(1.0));
        }
        assert_eq!(inverse_softplus(0.0), f64::NEG_INFINITY);
        assert_eq!(f64::NEG_INFINITY.softplus(), 0.0);
        for &p in &[0.01, 0.5, 0.93] {
            assert!((logit(p).logistic() - p).abs() < 1e-14);
        }
    }
}
