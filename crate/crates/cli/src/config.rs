//! Effective run settings: built-in defaults, overlaid by a config file,
//! overlaid by command-line flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mortvi::hmd::SexColumn;
use mortvi::inference::decay_over;
use mortvi::model::{ModelSpec, DEFAULT_TAU};
use mortvi::{TrainConfig, WindowSpec};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Affine,
    Rbf,
    LeeCarter,
    Intercept,
    Saturated,
}

/// One model to fit and score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Affine { latent_dim: usize },
    Rbf { latent_dim: usize, rbf_count: usize },
    LeeCarter,
    Intercept,
    Saturated,
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelChoice::Affine { latent_dim } => write!(f, "affine-d{latent_dim}"),
            ModelChoice::Rbf { latent_dim, rbf_count } => write!(f, "rbf-d{latent_dim}-p{rbf_count}"),
            ModelChoice::LeeCarter => f.write_str("lee-carter"),
            ModelChoice::Intercept => f.write_str("intercept"),
            ModelChoice::Saturated => f.write_str("saturated"),
        }
    }
}

impl FromStr for ModelChoice {
    type Err = ConfigError;

    /// Accepts `affine`, `affine-d3`, `rbf`, `rbf-d4-p15`, `lee-carter`,
    /// `intercept` and `saturated`.
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let bad = || ConfigError::Invalid(format!("unknown model {s:?}"));
        let num = |p: &str, prefix: char| -> Result<usize, ConfigError> {
            p.strip_prefix(prefix).and_then(|v| v.parse().ok()).ok_or_else(bad)
        };
        let parts: Vec<&str> = s.split('-').collect();
        match parts.as_slice() {
            ["affine"] => Ok(ModelChoice::Affine { latent_dim: 3 }),
            ["affine", d] => Ok(ModelChoice::Affine { latent_dim: num(d, 'd')? }),
            ["rbf"] => Ok(ModelChoice::Rbf { latent_dim: 4, rbf_count: 15 }),
            ["rbf", d, p] => Ok(ModelChoice::Rbf { latent_dim: num(d, 'd')?, rbf_count: num(p, 'p')? }),
            ["lee", "carter"] => Ok(ModelChoice::LeeCarter),
            ["intercept"] => Ok(ModelChoice::Intercept),
            ["saturated"] => Ok(ModelChoice::Saturated),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ModelChoice {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl ModelChoice {
    pub fn spec(&self, n_ages: usize, tau: f64) -> Option<ModelSpec> {
        match *self {
            ModelChoice::Affine { latent_dim } => Some(ModelSpec::affine(latent_dim, n_ages)),
            ModelChoice::Rbf { latent_dim, rbf_count } => Some(ModelSpec::rbf(latent_dim, n_ages, rbf_count, tau)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub deaths: Option<PathBuf>,
    pub exposures: Option<PathBuf>,
    pub sex: SexColumn,
    pub age_cap: u32,
    pub first_year: Option<i32>,
    pub last_year: Option<i32>,
    pub panel: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub model: Variant,
    /// More than one value makes `evaluate` sweep over them.
    pub latent_dim: Vec<usize>,
    pub rbf_count: Vec<usize>,
    /// Models scored by `compare`.
    pub compare: Vec<ModelChoice>,
    pub tau: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Defaults to a decay that ends at a tenth of the learning rate.
    pub lr_decay: Option<f64>,
    pub mc_samples: usize,
    pub convergence_window: usize,
    pub first_train_year: i32,
    pub train_len: usize,
    pub eval_len: usize,
    pub sweep_start: i32,
    pub sweep_end: i32,
    pub horizon: usize,
    pub samples: usize,
    pub seed: u64,
    pub skip_failed: bool,
    pub lee_carter_max_iter: usize,
    pub lee_carter_tol: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let train = TrainConfig::default();
        let window = WindowSpec::default();
        Self {
            deaths: None,
            exposures: None,
            sex: SexColumn::Male,
            age_cap: 100,
            first_year: None,
            last_year: None,
            panel: None,
            checkpoint: None,
            model: Variant::Affine,
            latent_dim: vec![3],
            rbf_count: vec![15],
            compare: vec![
                ModelChoice::Affine { latent_dim: 3 },
                ModelChoice::Rbf { latent_dim: 4, rbf_count: 15 },
                ModelChoice::LeeCarter,
            ],
            tau: DEFAULT_TAU,
            steps: train.steps,
            learning_rate: train.learning_rate,
            lr_decay: None,
            mc_samples: train.mc_samples,
            convergence_window: train.convergence_window,
            first_train_year: window.first_train_year,
            train_len: window.train_len,
            eval_len: window.eval_len,
            sweep_start: 1931,
            sweep_end: 1952,
            horizon: 10,
            samples: 1000,
            seed: 0,
            skip_failed: false,
            lee_carter_max_iter: 1000,
            lee_carter_tol: 1e-8,
        }
    }
}

/// What every command writes next to its outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub command: String,
    pub version: String,
    pub settings: Settings,
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub notes: serde_json::Map<String, serde_json::Value>,
}

impl Settings {
    /// Reads a JSON or TOML settings file; a sidecar is accepted as well.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let parse_err = |message: String| ConfigError::Parse { path: path.to_path_buf(), message };
        if path.extension().is_some_and(|e| e == "toml") {
            return toml::from_str(&text).map_err(|e| parse_err(e.to_string()));
        }
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        let inner = match value.get("settings") {
            Some(s) if value.get("command").is_some() => s.clone(),
            _ => value,
        };
        serde_json::from_value(inner).map_err(|e| parse_err(e.to_string()))
    }

    /// Every model in the `model` × `latent_dim` × `rbf_count` grid.
    pub fn sweep_models(&self) -> Vec<ModelChoice> {
        match self.model {
            Variant::Affine => self.latent_dim.iter().map(|&d| ModelChoice::Affine { latent_dim: d }).collect(),
            Variant::Rbf => self
                .latent_dim
                .iter()
                .flat_map(|&d| self.rbf_count.iter().map(move |&p| ModelChoice::Rbf { latent_dim: d, rbf_count: p }))
                .collect(),
            Variant::LeeCarter => vec![ModelChoice::LeeCarter],
            Variant::Intercept => vec![ModelChoice::Intercept],
            Variant::Saturated => vec![ModelChoice::Saturated],
        }
    }

    /// The single model `fit` works on.
    pub fn single_model(&self) -> Result<ModelChoice, ConfigError> {
        match self.sweep_models().as_slice() {
            [one] => Ok(*one),
            [] => Err(ConfigError::Invalid("no model selected".into())),
            many => Err(ConfigError::Invalid(format!("expected one model, the settings describe {}", many.len()))),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay.unwrap_or_else(|| decay_over(self.steps, 0.1)),
            mc_samples: self.mc_samples,
            seed: self.seed,
            convergence_window: self.convergence_window,
        }
    }

    pub fn window(&self) -> Result<WindowSpec, ConfigError> {
        WindowSpec::new(self.first_train_year, self.train_len, self.eval_len)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn sweep(&self) -> Result<Vec<WindowSpec>, ConfigError> {
        if self.sweep_start > self.sweep_end {
            return Err(ConfigError::Invalid(format!(
                "sweep start {} is after sweep end {}",
                self.sweep_start, self.sweep_end
            )));
        }
        WindowSpec::sweep(self.sweep_start..=self.sweep_end, self.train_len, self.eval_len)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Fills in derived values so that the sidecar reproduces the run exactly.
    pub fn resolved(mut self) -> Result<Self, ConfigError> {
        self.lr_decay = Some(self.train_config().lr_decay);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.sweep_models().is_empty() || self.compare.is_empty() {
            return invalid("no model selected".into());
        }
        for m in self.sweep_models().iter().chain(&self.compare) {
            match *m {
                ModelChoice::Affine { latent_dim } | ModelChoice::Rbf { latent_dim, .. } if latent_dim == 0 => {
                    return invalid(format!("{m}: latent dimension must be at least 1"))
                }
                ModelChoice::Rbf { rbf_count: 0, .. } => {
                    return invalid(format!("{m}: at least one radial basis function is needed"))
                }
                _ => {}
            }
        }
        if !(self.tau > 0.0) {
            return invalid(format!("tau must be positive, got {}", self.tau));
        }
        if self.horizon == 0 || self.samples == 0 {
            return invalid("horizon and samples must be at least 1".into());
        }
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.window()?;
        Ok(())
    }
}
