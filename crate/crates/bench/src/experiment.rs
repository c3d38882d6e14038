//! Seeded experiment runner: fits every requested variant on every
//! (sweep value, repetition) pair and tabulates the metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use lmc::inference::CovarianceMode;
use lmc::metrics::{h_corr, l1_metrics, pva, MetricsRecord};
use lmc::synthdata::{generate, SyntheticData};
use lmc::training::{fit, LmcModel, TrainConfig, Variant};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ErrorTarget, ExperimentConfig, Timing};
use crate::{BenchError, Result};

pub const DETAIL_COLUMNS: [&str; 11] = [
    "model", "seed", "sweep_param", "sweep_value", "n_iter", "t_train_s", "err_l1", "q95_l1",
    "pva", "h_corr", "status",
];

pub const AGGREGATE_COLUMNS: [&str; 11] = [
    "model", "sweep_param", "sweep_value", "n_ok", "n_failed", "n_iter", "t_train_s", "err_l1",
    "q95_l1", "pva", "h_corr",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed,
}

/// One fit.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailRow {
    pub model: Variant,
    pub seed: u64,
    pub sweep_param: String,
    pub sweep_value: Option<f64>,
    pub metrics: Option<MetricsRecord>,
    /// Error message of a failed fit.
    pub failure: Option<String>,
}

impl DetailRow {
    pub fn status(&self) -> RowStatus {
        if self.metrics.is_some() {
            RowStatus::Ok
        } else {
            RowStatus::Failed
        }
    }
}

/// Means over the successful fits of one (variant, sweep value) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub model: Variant,
    pub sweep_param: String,
    pub sweep_value: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub n_iter: f64,
    pub t_train_s: f64,
    pub err_l1: f64,
    pub q95_l1: f64,
    pub pva: f64,
    pub h_corr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub details: Vec<DetailRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl ExperimentOutput {
    pub fn all_ok(&self) -> bool {
        self.details.iter().all(|r| r.metrics.is_some())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub workers: usize,
    pub seed_offset: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 1, seed_offset: 0 }
    }
}

/// Fits `variant` on `data.train` and scores it on the test split.
///
/// `err_l1` and `q95_l1` compare the predictive mean with `target`. PVA is
/// always measured against the noisy test outputs, with the predictive
/// variance of a noisy observation.
pub fn evaluate_variant(
    variant: Variant,
    data: &SyntheticData<f64>,
    q: usize,
    train: &TrainConfig,
    target: ErrorTarget,
    timing: Timing,
) -> Result<MetricsRecord> {
    let mut model = LmcModel::initialize(variant, &data.train, q, train.seed)?;
    let start = Instant::now();
    let report = fit(&mut model, &data.train, train)?;
    let elapsed = start.elapsed().as_secs_f64();
    let pred = model.predict(&data.train, &data.test.x, CovarianceMode::Marginal)?;
    score(&model, &pred, data, target).map(|(err_l1, q95_l1, pva, h_corr)| MetricsRecord {
        err_l1,
        q95_l1,
        pva,
        h_corr,
        n_iter: report.n_iters,
        t_train: match timing {
            Timing::Wall => elapsed,
            Timing::None => 0.0,
        },
    })
}

fn score(
    model: &LmcModel<f64>,
    pred: &lmc::inference::PredictionResult<f64>,
    data: &SyntheticData<f64>,
    target: ErrorTarget,
) -> Result<(f64, f64, f64, f64)> {
    let reference = match target {
        ErrorTarget::Noisy => &data.test.y,
        ErrorTarget::Noiseless => &data.test_signal,
    };
    let (err, q95) = l1_metrics(&pred.mean, reference)?;
    let mut var = pred.task_var.clone();
    for (a, mut row) in var.row_iter_mut().enumerate() {
        row.add_scalar_mut(pred.noise_var[a]);
    }
    let p = pva(&pred.mean, &var, &data.test.y)?;
    let hc = h_corr(&model.h()?, &data.truth.h)?;
    Ok((err, q95, p, hc))
}

struct Job {
    point: usize,
    rep: usize,
    variant: Variant,
}

/// Runs the full grid on a pool of `options.workers` threads. Rows come
/// back sorted by (sweep value index, variant order, seed), whatever the
/// scheduling.
pub fn run_experiment(config: &ExperimentConfig, options: RunOptions) -> Result<ExperimentOutput> {
    config.validate()?;
    if options.workers == 0 {
        return Err(BenchError::Config("workers must be at least 1".into()));
    }
    let points = config.datagen_points()?;
    let sweep_param = config
        .sweep
        .as_ref()
        .map(|s| s.parameter.clone())
        .unwrap_or_default();
    let exp = &config.experiment;
    let mut jobs = Vec::new();
    for point in 0..points.len() {
        for &variant in &exp.variants {
            for rep in 0..exp.n_rep {
                jobs.push(Job { point, rep, variant });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| BenchError::Config(format!("cannot start worker pool: {e}")))?;
    let run_job = |job: &Job| -> DetailRow {
        let (value, base) = &points[job.point];
        let seed = base.seed + options.seed_offset + job.rep as u64;
        let mut datagen = base.clone();
        datagen.seed = seed;
        let train = TrainConfig { seed, ..config.train.clone() };
        let outcome = generate::<f64>(&datagen)
            .map_err(BenchError::from)
            .and_then(|data| {
                evaluate_variant(job.variant, &data, datagen.n_lat, &train, exp.error_target, exp.timing)
            });
        if let Err(e) = &outcome {
            log::warn!("{} seed {seed} failed: {e}", job.variant);
        }
        DetailRow {
            model: job.variant,
            seed,
            sweep_param: sweep_param.clone(),
            sweep_value: *value,
            failure: outcome.as_ref().err().map(|e| e.to_string()),
            metrics: outcome.ok(),
        }
    };
    let details: Vec<DetailRow> = pool.install(|| jobs.par_iter().map(run_job).collect());
    let aggregates = aggregate(&details);
    Ok(ExperimentOutput { details, aggregates })
}

/// Arithmetic means of the successful rows of each (variant, sweep value)
/// cell, in first-appearance order.
pub fn aggregate(details: &[DetailRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(Variant, Option<u64>)> = Vec::new();
    let mut cells: BTreeMap<(usize, Option<u64>), Vec<&DetailRow>> = BTreeMap::new();
    for row in details {
        let key = (row.model, row.sweep_value.map(f64::to_bits));
        let idx = match order.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                order.push(key);
                order.len() - 1
            }
        };
        cells.entry((idx, key.1)).or_default().push(row);
    }
    cells
        .into_values()
        .map(|rows| {
            let ok: Vec<&MetricsRecord> = rows.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let mean = |f: fn(&MetricsRecord) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64
                }
            };
            AggregateRow {
                model: rows[0].model,
                sweep_param: rows[0].sweep_param.clone(),
                sweep_value: rows[0].sweep_value,
                n_ok: ok.len(),
                n_failed: rows.len() - ok.len(),
                n_iter: mean(|m| m.n_iter as f64),
                t_train_s: mean(|m| m.t_train),
                err_l1: mean(|m| m.err_l1),
                q95_l1: mean(|m| m.q95_l1),
                pva: mean(|m| m.pva),
                h_corr: mean(|m| m.h_corr),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_detail_csv<W: Write>(rows: &[DetailRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DETAIL_COLUMNS)?;
    for r in rows {
        let (n_iter, t, err, q95, pva, hc) = match &r.metrics {
            Some(m) => (
                m.n_iter.to_string(),
                m.t_train.to_string(),
                m.err_l1.to_string(),
                m.q95_l1.to_string(),
                m.pva.to_string(),
                m.h_corr.to_string(),
            ),
            None => Default::default(),
        };
        let status = match r.status() {
            RowStatus::Ok => "ok",
            RowStatus::Failed => "failed",
        };
        w.write_record([
            r.model.tag().to_string(),
            r.seed.to_string(),
            r.sweep_param.clone(),
            opt(r.sweep_value),
            n_iter,
            t,
            err,
            q95,
            pva,
            hc,
            status.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.model.tag().to_string(),
            r.sweep_param.clone(),
            opt(r.sweep_value),
            r.n_ok.to_string(),
            r.n_failed.to_string(),
            r.n_iter.to_string(),
            r.t_train_s.to_string(),
            r.err_l1.to_string(),
            r.q95_l1.to_string(),
            r.pva.to_string(),
            r.h_corr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn detail_csv_string(rows: &[DetailRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_detail_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

pub fn aggregate_csv_string(rows: &[AggregateRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_aggregate_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}
