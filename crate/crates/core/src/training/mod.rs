//! Maximum-likelihood fitting: AdamW with exponential learning-rate decay,
//! a plateau stopping rule and SVD initialization.

mod checkpoint;
mod gradient;
mod model;

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LmcError, Result};
use crate::inference::Dataset;
use crate::scalar::Scalar;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gradient::{loss_gradient, LossGradient};
pub use model::{init_from_svd, LmcModel, SvdInit, Variant};

/// Optimizer and stopping-rule settings. Losses are `-log p(Y) / (n p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub max_iters: usize,
    pub plateau_delta: f64,
    pub patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-2,
            lr_min: 1e-3,
            max_iters: 5000,
            plateau_delta: 1e-4,
            patience: 300,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return invalid("need lr_max >= lr_min > 0");
        }
        if self.max_iters == 0 || self.patience == 0 {
            return invalid("max_iters and patience must be at least 1");
        }
        if !(self.plateau_delta > 0.0) {
            return invalid("plateau_delta must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return invalid("weight_decay must be nonnegative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return invalid("Adam moment decays must lie in [0, 1)");
        }
        Ok(())
    }

    /// Per-iteration decay factor `(lr_min / lr_max)^(1 / max_iters)`.
    pub fn decay(&self) -> f64 {
        (self.lr_min / self.lr_max).powf(1.0 / self.max_iters as f64)
    }

    /// Learning rate of the step taken at iteration `t` (from 0).
    pub fn learning_rate(&self, t: usize) -> f64 {
        self.lr_max * self.decay().powi(t as i32)
    }
}

/// Summary of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n_iters: usize,
    pub wall_time_s: f64,
    pub initial_loss: f64,
    /// Loss of the returned (best-so-far) parameters.
    pub final_loss: f64,
    /// Loss after each iteration.
    pub loss_trace: Vec<f64>,
    pub stopped_early: bool,
}

const MAX_RETRIES: usize = 5;
const ADAM_EPS: f64 = 1e-8;

fn normalized_loss_gradient<T: Scalar>(
    model: &LmcModel<T>,
    data: &Dataset<T>,
) -> Result<(T, DVector<T>)> {
    let lg = loss_gradient(model, data)?;
    let scale = T::one() / T::count(data.n_points() * data.n_tasks());
    let g = lg.gradient * scale;
    let loss = lg.loss * scale;
    if !loss.finite() || !g.iter().all(|v| v.finite()) {
        return Err(LmcError::NumericalDegeneracy {
            what: "non-finite loss or gradient".into(),
            jitter: 0.0,
        });
    }
    Ok((loss, g))
}

/// Fits `model` in place and leaves it at the best parameters seen.
pub fn fit<T: Scalar>(model: &mut LmcModel<T>, data: &Dataset<T>, config: &TrainConfig) -> Result<FitReport> {
    config.validate()?;
    if data.n_tasks() != model.n_tasks() {
        return Err(LmcError::DimensionMismatch {
            context: "fit: number of tasks".into(),
            expected: model.n_tasks().to_string(),
            actual: data.n_tasks().to_string(),
        });
    }
    let start = Instant::now();
    let mask = model.weight_decay_mask();
    let (mut loss, mut grad) = normalized_loss_gradient(model, data).map_err(|e| {
        LmcError::TrainingAborted {
            iteration: 0,
            reason: format!("loss at initialization: {e}"),
        }
    })?;
    let initial_loss = loss.to_f64_lossy();
    let mut best_loss = loss;
    let mut best_theta = model.theta().clone();
    let k = model.theta().len();
    let mut m1 = DVector::<T>::zeros(k);
    let mut m2 = DVector::<T>::zeros(k);
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let wd = T::lit(config.weight_decay);
    let eps = T::lit(ADAM_EPS);
    let mut trace = Vec::new();
    let mut streak = 0;
    let mut stopped_early = false;

    for t in 0..config.max_iters {
        m1 = &m1 * b1 + &grad * (T::one() - b1);
        m2 = &m2 * b2 + grad.map(|g| g * g) * (T::one() - b2);
        let c1 = T::one() - b1.powi(t as i32 + 1);
        let c2 = T::one() - b2.powi(t as i32 + 1);
        let direction = DVector::from_fn(k, |j, _| (m1[j] / c1) / ((m2[j] / c2).sqrt() + eps));
        let mut lr = T::lit(config.learning_rate(t));
        let theta = model.theta().clone();
        let mut accepted = None;
        let mut last_err = None;
        for attempt in 0..=MAX_RETRIES {
            let next = DVector::from_fn(k, |j, _| {
                let decayed = if mask[j] { theta[j] * (T::one() - lr * wd) } else { theta[j] };
                decayed - lr * direction[j]
            });
            model.set_theta(next)?;
            match normalized_loss_gradient(model, data) {
                Ok(v) => {
                    accepted = Some(v);
                    break;
                }
                Err(e) => {
                    log::debug!("iteration {t}: attempt {attempt} failed ({e}), halving the step");
                    last_err = Some(e);
                    lr *= T::lit(0.5);
                }
            }
        }
        let Some((new_loss, new_grad)) = accepted else {
            model.set_theta(best_theta)?;
            return Err(LmcError::TrainingAborted {
                iteration: t + 1,
                reason: format!(
                    "step failed after {MAX_RETRIES} learning-rate halvings: {}",
                    last_err.map(|e| e.to_string()).unwrap_or_default()
                ),
            });
        };
        let diff = (new_loss - loss).magnitude().to_f64_lossy();
        loss = new_loss;
        grad = new_grad;
        trace.push(loss.to_f64_lossy());
        if loss < best_loss {
            best_loss = loss;
            best_theta = model.theta().clone();
        }
        streak = if diff < config.plateau_delta { streak + 1 } else { 0 };
        if streak >= config.patience {
            stopped_early = true;
            break;
        }
    }
    model.set_theta(best_theta)?;
    Ok(FitReport {
        n_iters: trace.len(),
        wall_time_s: start.elapsed().as_secs_f64(),
        initial_loss,
        final_loss: best_loss.to_f64_lossy(),
        loss_trace: trace,
        stopped_early,
    })
}
