use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lmc::inference::{CovarianceMode, Dataset};
use lmc::metrics::{h_corr, l1_metrics, pva, MetricsRecord};
use lmc::synthdata::generate;
use lmc::training::{fit, Checkpoint, LmcModel, Variant};
use lmc::verify::run_identity_suite;
use lmc_bench::config::ExperimentConfig;
use lmc_bench::experiment::{run_experiment, write_aggregate_csv, write_detail_csv, RunOptions};
use lmc_bench::matrix_io::{read_matrix, write_matrix};
use nalgebra::DMatrix;

#[derive(Parser)]
#[command(name = "lmc-bench", version, about = "Synthetic benchmarks for projected LMC models")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Added to every data seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Noisy,
    Noiseless,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one synthetic dataset and dump it as matrix files.
    Generate,
    /// Train one variant on a dumped dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Variant,
        /// Number of latent processes (defaults to the config's n_lat).
        #[arg(long)]
        n_lat: Option<usize>,
    },
    /// Predict at the test inputs of a dumped dataset.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score predictions against a dumped dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Adds h_corr, n_iter and t_train from a fitted checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Target::Noisy)]
        target: Target,
    },
    /// Run a full experiment grid and write detail and aggregate CSVs.
    Sweep,
    /// Check the fast inference paths against the dense reference.
    Verify {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli.out.as_deref().context("--out is required")?;
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(path) => Ok(ExperimentConfig::load(path)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset<f64>> {
    let x = read_matrix(&dir.join(format!("x_{split}.txt")))?;
    let y = read_matrix(&dir.join(format!("y_{split}.txt")))?;
    Ok(Dataset::new(x, y)?)
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_generate(cli: &Cli) -> Result<()> {
    let mut config = load_config(cli)?;
    config.datagen.seed += cli.seed_offset;
    let data = generate::<f64>(&config.datagen)?;
    let dir = out_dir(cli)?;
    write_matrix(&dir.join("x_train.txt"), &data.train.x)?;
    write_matrix(&dir.join("y_train.txt"), &data.train.y)?;
    write_matrix(&dir.join("x_test.txt"), &data.test.x)?;
    write_matrix(&dir.join("y_test.txt"), &data.test.y)?;
    write_matrix(&dir.join("signal_test.txt"), &data.test_signal)?;
    write_matrix(&dir.join("h_true.txt"), &data.truth.h)?;
    std::fs::write(dir.join("config.toml"), config.to_toml()?)?;
    Ok(())
}

fn cmd_fit(cli: &Cli, data_dir: &Path, variant: Variant, n_lat: Option<usize>) -> Result<()> {
    let config = load_config(cli)?;
    let train = load_split(data_dir, "train")?;
    let q = n_lat.unwrap_or(config.datagen.n_lat);
    let mut model = LmcModel::initialize(variant, &train, q, config.train.seed)?;
    let report = fit(&mut model, &train, &config.train)?;
    let dir = out_dir(cli)?;
    Checkpoint::new(&model, &config.train, Some(&report))?.save(&dir.join("checkpoint.json"))?;
    write_json(&dir.join("fit_report.json"), &report)?;
    println!(
        "{variant}: {} iterations, {:.3} s, loss {} -> {}",
        report.n_iters, report.wall_time_s, report.initial_loss, report.final_loss
    );
    Ok(())
}

fn cmd_predict(cli: &Cli, data_dir: &Path, checkpoint: &Path) -> Result<()> {
    let model: LmcModel<f64> = Checkpoint::load(checkpoint)?.model()?;
    let train = load_split(data_dir, "train")?;
    let xtest = read_matrix(&data_dir.join("x_test.txt"))?;
    let pred = model.predict(&train, &xtest, CovarianceMode::Marginal)?;
    let dir = out_dir(cli)?;
    write_matrix(&dir.join("mean.txt"), &pred.mean)?;
    write_matrix(&dir.join("task_var.txt"), &pred.task_var)?;
    write_matrix(&dir.join("noise_var.txt"), &DMatrix::from_column_slice(pred.noise_var.len(), 1, pred.noise_var.as_slice()))?;
    write_matrix(&dir.join("latent_mean.txt"), &pred.latent_mean)?;
    write_matrix(&dir.join("latent_var.txt"), &pred.latent_var)?;
    Ok(())
}

fn cmd_evaluate(
    cli: &Cli,
    data_dir: &Path,
    pred_dir: &Path,
    checkpoint: Option<&Path>,
    target: Target,
) -> Result<()> {
    let y_test = read_matrix(&data_dir.join("y_test.txt"))?;
    let reference = match target {
        Target::Noisy => y_test.clone(),
        Target::Noiseless => read_matrix(&data_dir.join("signal_test.txt"))?,
    };
    let mean = read_matrix(&pred_dir.join("mean.txt"))?;
    let mut var = read_matrix(&pred_dir.join("task_var.txt"))?;
    let noise = read_matrix(&pred_dir.join("noise_var.txt"))?;
    if noise.nrows() != var.nrows() {
        bail!("noise_var has {} rows, task_var has {}", noise.nrows(), var.nrows());
    }
    for (a, mut row) in var.row_iter_mut().enumerate() {
        row.add_scalar_mut(noise[(a, 0)]);
    }
    let (err_l1, q95_l1) = l1_metrics(&mean, &reference)?;
    let mut record = MetricsRecord {
        err_l1,
        q95_l1,
        pva: pva(&mean, &var, &y_test)?,
        h_corr: f64::NAN,
        n_iter: 0,
        t_train: f64::NAN,
    };
    if let Some(path) = checkpoint {
        let ck = Checkpoint::load(path)?;
        let h_true = read_matrix(&data_dir.join("h_true.txt"))?;
        record.h_corr = h_corr(&ck.h.to_matrix::<f64>()?, &h_true)?;
        if let Some(report) = &ck.report {
            record.n_iter = report.n_iters;
            record.t_train = report.wall_time_s;
        }
    }
    write_json(&out_dir(cli)?.join("metrics.json"), &record)?;
    println!("{}", serde_json::to_string(&record)?);
    Ok(())
}

fn cmd_sweep(cli: &Cli) -> Result<bool> {
    let path = cli.config.as_deref().context("sweep needs --config")?;
    let config = ExperimentConfig::load(path)?;
    let output = run_experiment(
        &config,
        RunOptions {
            workers: cli.workers,
            seed_offset: cli.seed_offset,
        },
    )?;
    let dir = out_dir(cli)?;
    let name = &config.experiment.name;
    write_detail_csv(&output.details, std::fs::File::create(dir.join(format!("{name}_detail.csv")))?)?;
    write_aggregate_csv(
        &output.aggregates,
        std::fs::File::create(dir.join(format!("{name}_aggregate.csv")))?,
    )?;
    for row in &output.aggregates {
        println!(
            "{:<9} {:>8} ok={:<3} failed={:<3} err_l1={:.4} pva={:.3} h_corr={:.3} t={:.3}s",
            row.model.tag(),
            row.sweep_value.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            row.n_ok,
            row.n_failed,
            row.err_l1,
            row.pva,
            row.h_corr,
            row.t_train_s
        );
    }
    for row in output.details.iter().filter(|r| r.failure.is_some()) {
        eprintln!("failed: {} seed {}: {}", row.model, row.seed, row.failure.as_deref().unwrap_or(""));
    }
    Ok(output.all_ok())
}

fn cmd_verify(count: usize, seed: u64) -> Result<bool> {
    let checks = run_identity_suite(count, seed)?;
    let mut all = true;
    for c in &checks {
        let ok = c.passed();
        all &= ok;
        println!(
            "{} {:<48} max error {:.3e} (tolerance {:.0e})",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.max_error,
            c.tolerance
        );
    }
    Ok(all)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Generate => cmd_generate(cli).map(|_| true),
        Command::Fit { data, variant, n_lat } => cmd_fit(cli, data, *variant, *n_lat).map(|_| true),
        Command::Predict { data, checkpoint } => cmd_predict(cli, data, checkpoint).map(|_| true),
        Command::Evaluate {
            data,
            predictions,
            checkpoint,
            target,
        } => cmd_evaluate(cli, data, predictions, checkpoint.as_deref(), *target).map(|_| true),
        Command::Sweep => cmd_sweep(cli),
        Command::Verify { count, seed } => cmd_verify(*count, *seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
