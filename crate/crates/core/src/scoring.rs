//! Log-scores, R² against intercept-only and saturated references, and the
//! rolling-window evaluation harness.
//!
//! A year's log-score is `Σ_a log P_a(d_a)` over that year's cells. Window
//! and aggregate scores are means of these per-year values over horizons
//! and windows.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_lee_carter, forecast_lee_carter};
use crate::density::poisson_logpmf_or_point_mass;
use crate::error::{Error, Result};
use crate::forecast::{forecast_deaths, forecast_latent, PredictiveDeaths, DEFAULT_SAMPLES};
use crate::inference::{fit, TrainConfig};
use crate::model::ModelSpec;
use crate::panel::{cut_window, MortalityPanel, WindowSpec};

/// Per-year log-scores of `pred` against `observed`, horizons `1..=H`.
pub fn log_scores(pred: &PredictiveDeaths, observed: &MortalityPanel) -> Result<Vec<f64>> {
    if observed.n_ages() != pred.n_ages || observed.n_years() < pred.horizon {
        return Err(Error::Shape(format!(
            "observed panel {}×{} does not cover predictive {}×{}",
            observed.n_ages(),
            observed.n_years(),
            pred.n_ages,
            pred.horizon
        )));
    }
    Ok((1..=pred.horizon)
        .map(|h| (0..pred.n_ages).map(|a| pred.log_pmf(a, h, observed.death_count(a, h - 1))).sum())
        .collect())
}

/// Score of the predictive whose mean is the observation itself, per year.
pub fn saturated_scores(observed: &MortalityPanel) -> Vec<f64> {
    (0..observed.n_years())
        .map(|t| {
            (0..observed.n_ages())
                .map(|a| {
                    let d = observed.death_count(a, t);
                    poisson_logpmf_or_point_mass(d, d)
                })
                .sum()
        })
        .collect()
}

/// Per-age constant log-rate fitted on `train`; `None` for an age with no
/// training exposure.
pub fn intercept_log_rates(train: &MortalityPanel) -> Vec<Option<f64>> {
    (0..train.n_ages())
        .map(|a| {
            let d: f64 = (0..train.n_years()).map(|t| train.death_count(a, t)).sum();
            let e: f64 = (0..train.n_years()).map(|t| train.exposure(a, t)).sum();
            if e == 0.0 {
                log::warn!("age {a} has no training exposure; its cells are excluded from the intercept score");
                None
            } else if d == 0.0 {
                Some(((d + 0.5) / (e + 0.5)).ln())
            } else {
                Some((d / e).ln())
            }
        })
        .collect()
}

/// Per-year scores of the intercept-only model fitted on `train`.
pub fn intercept_scores(train: &MortalityPanel, eval: &MortalityPanel) -> Result<Vec<f64>> {
    if train.n_ages() != eval.n_ages() {
        return Err(Error::Shape("train and eval panels have different ages".into()));
    }
    let alpha = intercept_log_rates(train);
    Ok((0..eval.n_years())
        .map(|t| {
            alpha
                .iter()
                .enumerate()
                .filter_map(|(a, al)| {
                    al.map(|al| poisson_logpmf_or_point_mass(eval.death_count(a, t), eval.exposure(a, t) * al.exp()))
                })
                .sum()
        })
        .collect())
}

/// `(model - intercept) / (saturated - intercept)`.
pub fn r_squared(model: f64, intercept: f64, saturated: f64) -> Result<f64> {
    if !(saturated > intercept) {
        return Err(Error::Undefined(format!(
            "R² needs saturated > intercept, got {saturated} and {intercept}"
        )));
    }
    Ok((model - intercept) / (saturated - intercept))
}

/// Something that can be fitted on a training window and scored on the
/// following years.
pub trait Forecaster: Sync {
    fn name(&self) -> String;

    /// Per-year log-scores for every year of `eval`.
    fn score_window(&self, train: &MortalityPanel, eval: &MortalityPanel, seed: u64) -> Result<Vec<f64>>;
}

/// The latent-factor model fitted by variational inference.
#[derive(Debug, Clone)]
pub struct VariationalForecaster {
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub n_samples: usize,
}

impl VariationalForecaster {
    pub fn new(spec: ModelSpec, train: TrainConfig) -> Self {
        Self { spec, train, n_samples: DEFAULT_SAMPLES }
    }
}

impl Forecaster for VariationalForecaster {
    fn name(&self) -> String {
        match self.spec.kind {
            crate::model::EmissionKind::Affine => "affine".into(),
            crate::model::EmissionKind::Rbf => "rbf".into(),
        }
    }

    fn score_window(&self, train: &MortalityPanel, eval: &MortalityPanel, seed: u64) -> Result<Vec<f64>> {
        let spec = ModelSpec { n_ages: train.n_ages(), ..self.spec.clone() };
        let config = TrainConfig { seed, ..self.train.clone() };
        let fitted = fit(train, &spec, &config)?;
        let start = fitted.guide.final_state_distribution()?;
        let latent = forecast_latent(&start, &fitted.model.dynamics, eval.n_years())?;
        let pred = forecast_deaths(&latent, &fitted.model.emission, eval, self.n_samples, seed)?;
        log_scores(&pred, eval)
    }
}

#[derive(Debug, Clone)]
pub struct LeeCarterForecaster {
    pub max_iter: usize,
    pub tol: f64,
    pub n_samples: usize,
}

impl Default for LeeCarterForecaster {
    fn default() -> Self {
        Self { max_iter: 1000, tol: 1e-8, n_samples: DEFAULT_SAMPLES }
    }
}

impl Forecaster for LeeCarterForecaster {
    fn name(&self) -> String {
        "lee-carter".into()
    }

    fn score_window(&self, train: &MortalityPanel, eval: &MortalityPanel, seed: u64) -> Result<Vec<f64>> {
        let params = fit_lee_carter(train, self.max_iter, self.tol)?;
        let pred = forecast_lee_carter(&params, eval.n_years(), self.n_samples, seed, eval)?;
        log_scores(&pred, eval)
    }
}

/// Per-age constant rate.
#[derive(Debug, Clone, Copy, Default)]
pub struct InterceptForecaster;

impl Forecaster for InterceptForecaster {
    fn name(&self) -> String {
        "intercept".into()
    }

    fn score_window(&self, train: &MortalityPanel, eval: &MortalityPanel, _seed: u64) -> Result<Vec<f64>> {
        intercept_scores(train, eval)
    }
}

/// Predicts the observation itself; the score ceiling.
#[derive(Debug, Clone, Copy, Default)]
pub struct SaturatedForecaster;

impl Forecaster for SaturatedForecaster {
    fn name(&self) -> String {
        "saturated".into()
    }

    fn score_window(&self, _train: &MortalityPanel, eval: &MortalityPanel, _seed: u64) -> Result<Vec<f64>> {
        Ok(saturated_scores(eval))
    }
}

/// Per-horizon scores of one window for the model and both references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScores {
    pub first_train_year: i32,
    pub model: Vec<f64>,
    pub intercept: Vec<f64>,
    pub saturated: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFailure {
    pub first_train_year: i32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub model: String,
    /// Sorted by first training year.
    pub windows: Vec<WindowScores>,
    pub failures: Vec<WindowFailure>,
}

/// One row of the aggregate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateScore {
    pub model: String,
    pub mean_log_score: f64,
    pub r_squared: Option<f64>,
    pub n_windows: usize,
}

fn mean_over(windows: &[WindowScores], pick: impl Fn(&WindowScores) -> &[f64]) -> f64 {
    let all: Vec<f64> = windows.iter().flat_map(|w| pick(w).iter().copied()).collect();
    if all.is_empty() {
        f64::NAN
    } else {
        all.iter().sum::<f64>() / all.len() as f64
    }
}

impl ScoreReport {
    /// Mean model score over every (window, horizon) pair.
    pub fn mean_log_score(&self) -> f64 {
        mean_over(&self.windows, |w| &w.model)
    }

    pub fn mean_intercept_score(&self) -> f64 {
        mean_over(&self.windows, |w| &w.intercept)
    }

    pub fn mean_saturated_score(&self) -> f64 {
        mean_over(&self.windows, |w| &w.saturated)
    }

    pub fn r_squared(&self) -> Result<f64> {
        r_squared(self.mean_log_score(), self.mean_intercept_score(), self.mean_saturated_score())
    }

    pub fn aggregate(&self) -> AggregateScore {
        AggregateScore {
            model: self.model.clone(),
            mean_log_score: self.mean_log_score(),
            r_squared: self.r_squared().ok(),
            n_windows: self.windows.len(),
        }
    }

    /// The same windows scored by the intercept-only and saturated references.
    pub fn references(&self) -> [ScoreReport; 2] {
        let with = |name: &str, pick: fn(&WindowScores) -> Vec<f64>| ScoreReport {
            model: name.into(),
            windows: self.windows.iter().map(|w| WindowScores { model: pick(w), ..w.clone() }).collect(),
            failures: Vec::new(),
        };
        [with("intercept", |w| w.intercept.clone()), with("saturated", |w| w.saturated.clone())]
    }

    /// Rows `model,first_train_year,horizon,log_score`.
    pub fn write_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for win in &self.windows {
            for (h, s) in win.model.iter().enumerate() {
                w.write_record([
                    self.model.clone(),
                    win.first_train_year.to_string(),
                    (h + 1).to_string(),
                    s.to_string(),
                ])?;
            }
        }
        Ok(())
    }
}

/// Writes the header and rows for several reports.
pub fn write_report_csv<W: Write>(reports: &[ScoreReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "first_train_year", "horizon", "log_score"])?;
    for r in reports {
        r.write_rows(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct EvaluationOptions {
    pub base_seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    /// Record failing windows and carry on instead of aborting.
    pub skip_failed: bool,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self { base_seed: 0, jobs: None, skip_failed: false }
    }
}

/// Fits and scores `forecaster` on every window. Window `i` uses seed
/// `base_seed + i`; the report does not depend on scheduling.
pub fn rolling_evaluate(
    panel: &MortalityPanel,
    forecaster: &dyn Forecaster,
    windows: &[WindowSpec],
    options: EvaluationOptions,
) -> Result<ScoreReport> {
    let run = || -> Vec<(i32, Result<WindowScores>)> {
        windows
            .par_iter()
            .enumerate()
            .map(|(i, spec)| {
                let result = (|| {
                    let (train, eval) = cut_window(panel, spec)?;
                    let seed = options.base_seed.wrapping_add(i as u64);
                    let model = forecaster.score_window(&train, &eval, seed)?;
                    Ok(WindowScores {
                        first_train_year: spec.first_train_year,
                        model,
                        intercept: intercept_scores(&train, &eval)?,
                        saturated: saturated_scores(&eval),
                    })
                })();
                if let Err(e) = &result {
                    log::warn!("window starting {} failed: {e}", spec.first_train_year);
                }
                (spec.first_train_year, result)
            })
            .collect()
    };
    let results = match options.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let mut report = ScoreReport { model: forecaster.name(), windows: Vec::new(), failures: Vec::new() };
    for (year, r) in results {
        match r {
            Ok(w) => report.windows.push(w),
            Err(e) if options.skip_failed => {
                report.failures.push(WindowFailure { first_train_year: year, message: e.to_string() })
            }
            Err(e) => return Err(Error::Evaluation(format!("window starting {year}: {e}"))),
        }
    }
    report.windows.sort_by_key(|w| w.first_train_year);
    report.failures.sort_by_key(|f| f.first_train_year);
    Ok(report)
}
