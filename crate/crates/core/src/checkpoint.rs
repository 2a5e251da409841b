//! Versioned JSON checkpoints for fitted models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::LeeCarterParams;
use crate::error::{Error, Result};
use crate::guide::GuideParams;
use crate::inference::TrainConfig;
use crate::model::{EmissionKind, ModelParams};
use crate::panel::WindowSpec;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Model and guide parameters at one point of training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub model: ModelParams,
    pub guide: GuideParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum Fitted {
    Latent {
        model: ModelParams,
        guide: GuideParams,
        train: TrainConfig,
        /// Smoothed ELBO at the end of training, if any steps ran.
        final_elbo: Option<f64>,
    },
    LeeCarter {
        params: LeeCarterParams,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Calendar year of the first training year.
    pub first_year: i32,
    pub n_ages: usize,
    pub n_years: usize,
    pub window: Option<WindowSpec>,
    pub fitted: Fitted,
}

impl Checkpoint {
    pub fn new(first_year: i32, n_ages: usize, n_years: usize, window: Option<WindowSpec>, fitted: Fitted) -> Self {
        Self { version: CHECKPOINT_VERSION, first_year, n_ages, n_years, window, fitted }
    }

    /// `affine`, `rbf` or `lee-carter`.
    pub fn variant(&self) -> &'static str {
        match &self.fitted {
            Fitted::Latent { model, .. } => match model.spec.kind {
                EmissionKind::Affine => "affine",
                EmissionKind::Rbf => "rbf",
            },
            Fitted::LeeCarter { .. } => "lee-carter",
        }
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.n_years as i32 - 1
    }

    fn check_finite(&self) -> Result<()> {
        let values: Vec<f64> = match &self.fitted {
            Fitted::Latent { model, guide, .. } => {
                let mut v = model.to_flat();
                v.extend(guide.to_flat());
                v
            }
            Fitted::LeeCarter { params } => params.values(),
        };
        match values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Evaluation(format!("parameter {i} is {} and cannot be saved", values[i]))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        self.check_finite()?;
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => return Err(Error::Config(format!("unsupported checkpoint version {v}"))),
            None => return Err(Error::Config("checkpoint has no version".into())),
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
