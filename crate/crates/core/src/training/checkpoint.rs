//! Versioned JSON checkpoints of fitted models.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

use super::model::{LmcModel, Variant};
use super::{FitReport, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "lmc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Row-major matrix for human-readable storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl StoredMatrix {
    pub fn from_matrix<T: Scalar>(m: &DMatrix<T>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(m[(i, j)].to_f64_lossy());
            }
        }
        Self { rows, cols, data }
    }

    pub fn to_matrix<T: Scalar>(&self) -> Result<DMatrix<T>> {
        if self.data.len() != self.rows * self.cols {
            return invalid("stored matrix has the wrong number of entries");
        }
        Ok(DMatrix::from_fn(self.rows, self.cols, |i, j| {
            T::lit(self.data[i * self.cols + j])
        }))
    }
}

/// Everything needed to restore a fitted model, plus decoded parameters
/// for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub n_tasks: usize,
    pub n_latent: usize,
    pub output_scales: Vec<f64>,
    pub basis: StoredMatrix,
    pub theta: Vec<f64>,
    pub config: TrainConfig,
    pub report: Option<FitReport>,
    pub h: StoredMatrix,
    pub sigma: StoredMatrix,
    pub lengthscales: Vec<f64>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(
        model: &LmcModel<T>,
        config: &TrainConfig,
        report: Option<&FitReport>,
    ) -> Result<Self> {
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            variant: model.variant(),
            n_tasks: model.n_tasks(),
            n_latent: model.n_latent(),
            output_scales: model.output_scales().iter().map(|v| v.to_f64_lossy()).collect(),
            basis: StoredMatrix::from_matrix(model.basis()),
            theta: model.theta().iter().map(|v| v.to_f64_lossy()).collect(),
            config: config.clone(),
            report: report.cloned(),
            h: StoredMatrix::from_matrix(&model.h()?),
            sigma: StoredMatrix::from_matrix(&model.sigma()?),
            lengthscales: model
                .kernels()?
                .iter()
                .map(|k| k.lengthscale().to_f64_lossy())
                .collect(),
        })
    }

    pub fn model<T: Scalar>(&self) -> Result<LmcModel<T>> {
        if self.format != CHECKPOINT_FORMAT {
            return invalid(format!("not a checkpoint (format '{}')", self.format));
        }
        if self.version != CHECKPOINT_VERSION {
            return invalid(format!("unsupported checkpoint version {}", self.version));
        }
        LmcModel::from_raw(
            self.variant,
            self.n_tasks,
            self.n_latent,
            self.output_scales.iter().map(|&v| T::lit(v)).collect(),
            self.basis.to_matrix()?,
            DVector::from_iterator(self.theta.len(), self.theta.iter().map(|&v| T::lit(v))),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
