//! Experiment configuration, read from TOML with sections `[experiment]`,
//! `[datagen]`, `[train]` and an optional `[sweep]`.

use std::path::Path;

use lmc::synthdata::DataGenConfig;
use lmc::training::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::{BenchError, Result};

/// Whether `t_train_s` holds wall-clock seconds or is zeroed so that
/// output files are reproducible byte for byte.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    #[default]
    Wall,
    None,
}

/// Test outputs that `err_l1` and `q95_l1` are measured against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorTarget {
    #[default]
    Noisy,
    Noiseless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub variants: Vec<Variant>,
    pub n_rep: usize,
    pub timing: Timing,
    pub error_target: ErrorTarget,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            variants: vec![Variant::DiagProj],
            n_rep: 1,
            timing: Timing::Wall,
            error_target: ErrorTarget::Noisy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub datagen: DataGenConfig,
    pub train: TrainConfig,
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let config: Self = toml::from_str(s)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            BenchError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.n_rep == 0 {
            return Err(BenchError::Config("n_rep must be at least 1".into()));
        }
        if self.experiment.variants.is_empty() {
            return Err(BenchError::Config("at least one variant is required".into()));
        }
        self.datagen.validate()?;
        self.train.validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(BenchError::Config("sweep needs at least one value".into()));
            }
            for &v in &sweep.values {
                let mut d = self.datagen.clone();
                d.set_field(&sweep.parameter, v)?;
                d.validate()?;
            }
        }
        Ok(())
    }

    /// Data configurations, one per sweep value (a single entry without a
    /// sweep).
    pub fn datagen_points(&self) -> Result<Vec<(Option<f64>, DataGenConfig)>> {
        match &self.sweep {
            None => Ok(vec![(None, self.datagen.clone())]),
            Some(s) => s
                .values
                .iter()
                .map(|&v| {
                    let mut d = self.datagen.clone();
                    d.set_field(&s.parameter, v)?;
                    Ok((Some(v), d))
                })
                .collect(),
        }
    }
}
