use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mortvi::baselines::{fit_lee_carter, forecast_lee_carter};
use mortvi::checkpoint::{Checkpoint, Fitted};
use mortvi::forecast::{carry_forward_exposures, forecast_deaths, forecast_latent, forecast_rates};
use mortvi::hmd::parse_hmd;
use mortvi::inference::fit;
use mortvi::panel::build_panel;
use mortvi::scoring::{
    rolling_evaluate, write_report_csv, EvaluationOptions, Forecaster, InterceptForecaster, LeeCarterForecaster,
    SaturatedForecaster, VariationalForecaster,
};
use mortvi::{MortalityPanel, PredictiveDeaths, ScoreReport};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{ConfigError, ModelChoice, Settings, Sidecar};

pub const DEATHS_FILE: &str = "Deaths_1x1.txt";
pub const EXPOSURES_FILE: &str = "Exposures_1x1.txt";
pub const PANEL_FILE: &str = "panel.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Defaults for input paths not given explicitly.
pub fn fill_paths(command: &str, s: &mut Settings, data_dir: Option<&Path>, out: &Path) {
    if let Some(dir) = data_dir {
        if command == "ingest" {
            s.deaths.get_or_insert_with(|| dir.join(DEATHS_FILE));
            s.exposures.get_or_insert_with(|| dir.join(EXPOSURES_FILE));
        } else {
            s.panel.get_or_insert_with(|| dir.join(PANEL_FILE));
        }
    }
    if command == "forecast" {
        s.checkpoint.get_or_insert_with(|| out.join(CHECKPOINT_FILE));
    }
}

/// Output files of one command; refuses to overwrite any of its inputs.
struct Outputs<'a> {
    dir: &'a Path,
    inputs: Vec<PathBuf>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path, inputs: &[&Path]) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let inputs = inputs.iter().filter_map(|p| fs::canonicalize(p).ok()).collect();
        Ok(Self { dir, inputs })
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Ok(canon) = fs::canonicalize(&path) {
            if self.inputs.contains(&canon) {
                bail!(ConfigError::Invalid(format!("output {} would overwrite an input", path.display())));
            }
        }
        Ok(path)
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.path(name)?;
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn sidecar(&self, command: &str, settings: &Settings, notes: Map<String, Value>) -> Result<()> {
        let sidecar = Sidecar {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            settings: settings.clone(),
            notes,
        };
        let mut text = serde_json::to_string_pretty(&sidecar)?;
        text.push('\n');
        self.write(&format!("{command}.json"), text.as_bytes())
    }
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, ConfigError> {
    path.as_deref().ok_or_else(|| {
        ConfigError::Invalid(format!("no {what} given; pass --{what} or set MORTVI_DATA_DIR"))
    })
}

fn read_panel(s: &Settings) -> Result<MortalityPanel> {
    let path = required(&s.panel, "panel")?;
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    MortalityPanel::read_csv(file).with_context(|| format!("reading {}", path.display()))
}

pub fn run(command: &str, s: &Settings, out: &Path, jobs: Option<usize>) -> Result<()> {
    match command {
        "ingest" => ingest(s, out),
        "fit" => fit_cmd(s, out),
        "forecast" => forecast(s, out),
        "evaluate" => score(command, s, &s.sweep_models(), out, jobs),
        "compare" => score(command, s, &s.compare, out, jobs),
        other => unreachable!("unknown command {other}"),
    }
}

fn ingest(s: &Settings, out: &Path) -> Result<()> {
    let deaths_path = required(&s.deaths, "deaths")?;
    let exposures_path = required(&s.exposures, "exposures")?;
    let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let deaths = parse_hmd(&read(deaths_path)?, s.sex).with_context(|| deaths_path.display().to_string())?;
    let exposures =
        parse_hmd(&read(exposures_path)?, s.sex).with_context(|| exposures_path.display().to_string())?;
    let (Some((d0, d1)), Some((e0, e1))) = (deaths.years(), exposures.years()) else {
        bail!("empty HMD table");
    };
    let first = s.first_year.unwrap_or(d0.max(e0));
    let last = s.last_year.unwrap_or(d1.min(e1));
    if first > last {
        bail!(ConfigError::Invalid(format!("year range {first}..={last} is empty")));
    }
    let panel = build_panel(&deaths, &exposures, s.age_cap, first..=last)?;

    let outputs = Outputs::new(out, &[deaths_path, exposures_path])?;
    let mut buf = Vec::new();
    panel.write_csv(&mut buf)?;
    outputs.write(PANEL_FILE, &buf)?;
    let mut notes = Map::new();
    notes.insert("first_year".into(), json!(panel.first_year()));
    notes.insert("last_year".into(), json!(panel.last_year()));
    notes.insert("n_ages".into(), json!(panel.n_ages()));
    notes.insert("fractional_cells".into(), json!(panel.fractional_cells()));
    outputs.sidecar("ingest", s, notes)
}

fn fit_cmd(s: &Settings, out: &Path) -> Result<()> {
    let choice = s.single_model()?;
    let window = s.window()?;
    let panel = read_panel(s)?;
    let train = panel.years(window.first_train_year, window.train_len)?;
    let outputs = Outputs::new(out, &[required(&s.panel, "panel")?])?;

    let fitted = match choice {
        ModelChoice::Affine { .. } | ModelChoice::Rbf { .. } => {
            let spec = choice.spec(train.n_ages(), s.tau).expect("latent model");
            let config = s.train_config();
            let result = match fit(&train, &spec, &config) {
                Ok(r) => r,
                Err(mortvi::Error::Diverged { step, reason, snapshot }) => {
                    let mut text = serde_json::to_string_pretty(&snapshot)?;
                    text.push('\n');
                    outputs.write("diverged.json", text.as_bytes())?;
                    bail!("training diverged at step {step}: {reason}; last finite parameters in diverged.json");
                }
                Err(e) => return Err(e.into()),
            };
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["step", "elbo"])?;
            for (i, v) in result.elbo_trace.iter().enumerate() {
                w.write_record([(i + 1).to_string(), v.to_string()])?;
            }
            outputs.write("elbo.csv", &w.into_inner()?)?;
            let final_elbo = result.smoothed_elbo();
            Fitted::Latent { model: result.model, guide: result.guide, train: result.config, final_elbo }
        }
        ModelChoice::LeeCarter => {
            Fitted::LeeCarter { params: fit_lee_carter(&train, s.lee_carter_max_iter, s.lee_carter_tol)? }
        }
        ModelChoice::Intercept | ModelChoice::Saturated => {
            bail!(ConfigError::Invalid(format!("{choice} is a reference score and has no checkpoint")))
        }
    };
    let checkpoint = Checkpoint::new(train.first_year(), train.n_ages(), train.n_years(), Some(window), fitted);
    outputs.write(CHECKPOINT_FILE, checkpoint.to_json()?.as_bytes())?;
    let mut notes = Map::new();
    notes.insert("model".into(), json!(choice.to_string()));
    outputs.sidecar("fit", s, notes)
}

#[derive(Serialize)]
struct ForecastRow {
    age: usize,
    year: i32,
    horizon: usize,
    mean_rate: f64,
    sd_rate: f64,
    lower: f64,
    upper: f64,
    mean_deaths: f64,
}

fn forecast(s: &Settings, out: &Path) -> Result<()> {
    let checkpoint_path = required(&s.checkpoint, "checkpoint")?;
    let checkpoint =
        Checkpoint::load(checkpoint_path).with_context(|| format!("loading {}", checkpoint_path.display()))?;
    let panel = read_panel(s)?;
    if panel.n_ages() != checkpoint.n_ages {
        bail!("panel has {} ages, checkpoint has {}", panel.n_ages(), checkpoint.n_ages);
    }
    let horizon = s.horizon;
    let start = checkpoint.last_year() + 1;
    let (exposures, source) = if panel.first_year() <= start && start + horizon as i32 - 1 <= panel.last_year() {
        (panel.years(start, horizon)?, "observed")
    } else {
        let last = panel.years(checkpoint.last_year(), 1).context("panel does not cover the checkpoint's last year")?;
        (carry_forward_exposures(&last, horizon)?, "carried-forward")
    };

    let pred: PredictiveDeaths = match &checkpoint.fitted {
        Fitted::Latent { model, guide, .. } => {
            let state = guide.final_state_distribution()?;
            let latent = forecast_latent(&state, &model.dynamics, horizon)?;
            forecast_deaths(&latent, &model.emission, &exposures, s.samples, s.seed)?
        }
        Fitted::LeeCarter { params } => forecast_lee_carter(params, horizon, s.samples, s.seed, &exposures)?,
    };
    let rates = forecast_rates(&pred, &[], s.seed)?;

    let outputs = Outputs::new(out, &[checkpoint_path, required(&s.panel, "panel")?])?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rates {
        w.serialize(ForecastRow {
            age: r.age,
            year: r.year,
            horizon: r.horizon,
            mean_rate: r.mean_rate,
            sd_rate: r.sd_rate,
            lower: r.lower,
            upper: r.upper,
            mean_deaths: r.mean_deaths,
        })?;
    }
    outputs.write("forecast.csv", &w.into_inner()?)?;
    let mut notes = Map::new();
    notes.insert("model".into(), json!(checkpoint.variant()));
    notes.insert("exposures".into(), json!(source));
    outputs.sidecar("forecast", s, notes)
}

/// `model` wrapped with the name used in reports.
struct Named {
    name: String,
    inner: Box<dyn Forecaster>,
}

impl Forecaster for Named {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn score_window(
        &self,
        train: &MortalityPanel,
        eval: &MortalityPanel,
        seed: u64,
    ) -> mortvi::Result<Vec<f64>> {
        self.inner.score_window(train, eval, seed)
    }
}

fn forecaster(choice: ModelChoice, s: &Settings, n_ages: usize) -> Named {
    let inner: Box<dyn Forecaster> = match choice {
        ModelChoice::Affine { .. } | ModelChoice::Rbf { .. } => {
            let spec = choice.spec(n_ages, s.tau).expect("latent model");
            Box::new(VariationalForecaster { spec, train: s.train_config(), n_samples: s.samples })
        }
        ModelChoice::LeeCarter => Box::new(LeeCarterForecaster {
            max_iter: s.lee_carter_max_iter,
            tol: s.lee_carter_tol,
            n_samples: s.samples,
        }),
        ModelChoice::Intercept => Box::new(InterceptForecaster),
        ModelChoice::Saturated => Box::new(SaturatedForecaster),
    };
    Named { name: choice.to_string(), inner }
}

#[derive(Serialize)]
struct AggregateRow {
    #[serde(flatten)]
    score: mortvi::scoring::AggregateScore,
    n_failed: usize,
}

fn score(command: &str, s: &Settings, models: &[ModelChoice], out: &Path, jobs: Option<usize>) -> Result<()> {
    let panel = read_panel(s)?;
    let windows = s.sweep()?;
    let options = EvaluationOptions { base_seed: s.seed, jobs, skip_failed: s.skip_failed };
    let mut reports: Vec<ScoreReport> = Vec::new();
    for &choice in models {
        log::info!("scoring {choice} on {} windows", windows.len());
        let report = rolling_evaluate(&panel, &forecaster(choice, s, panel.n_ages()), &windows, options)
            .with_context(|| format!("scoring {choice}"))?;
        reports.push(report);
    }
    if let Some(first) = reports.first() {
        for r in first.references() {
            if !reports.iter().any(|x| x.model == r.model) {
                reports.push(r);
            }
        }
    }

    let outputs = Outputs::new(out, &[required(&s.panel, "panel")?])?;
    let mut buf = Vec::new();
    write_report_csv(&reports, &mut buf)?;
    outputs.write("report.csv", &buf)?;
    let rows: Vec<AggregateRow> =
        reports.iter().map(|r| AggregateRow { score: r.aggregate(), n_failed: r.failures.len() }).collect();
    let mut text = serde_json::to_string_pretty(&rows)?;
    text.push('\n');
    outputs.write("aggregate.json", text.as_bytes())?;
    let mut notes = Map::new();
    let failures: Vec<Value> = reports
        .iter()
        .flat_map(|r| r.failures.iter().map(|f| json!({"model": r.model, "first_train_year": f.first_train_year, "message": f.message})))
        .collect();
    if !failures.is_empty() {
        notes.insert("failures".into(), Value::Array(failures));
    }
    outputs.sidecar(command, s, notes)
}
