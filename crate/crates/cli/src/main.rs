//! `wmagin` — train, evaluate, sweep, gradient-check, and synthesize
//! datasets for the graph-based speech emotion recognizer.
//!
//! Results go to stdout (JSON reports, sweep tables, gradcheck summary);
//! progress chatter goes to stderr. Exit code 0 means success; any handled
//! failure prints `error: ...` to stderr and exits 1.

mod atomic;
mod checkpoint;
mod config;
mod dataset;
mod logfile;
mod sweep;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;
use wmagin_core::gradcheck::{check_model_gradients, tiny_check_setup};
use wmagin_core::synth::{generate_synthetic, SynthError};
use wmagin_core::trainer::{
    evaluate, segment_split, single_split, train_with_observer, TrainError,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::config::{load_config, AppConfig, ConfigError};
use crate::dataset::{load_dataset, save_dataset, DatasetError};
use crate::logfile::{render_report, write_training_log, LogError};
use crate::sweep::{render_table, run_sweep, SweepGrid};

/// Largest finite-difference relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step used by `gradcheck`.
const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Parser)]
#[command(
    name = "wmagin",
    version,
    about = "Graph-based speech emotion recognition: training, evaluation, sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a feature CSV; write a checkpoint and an epoch log.
    Train {
        /// Config file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Feature CSV to train on.
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoint.json and training_log.ndjson.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a feature CSV; print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train across a hyperparameter grid; print a results table.
    Sweep {
        /// Grid to walk.
        #[arg(long, value_enum)]
        grid: GridArg,
        /// Config file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Feature CSV to train on.
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference the whole model; print the worst deviation.
    Gradcheck {
        /// Seed for parameters and check inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic feature CSV.
    GenSynth {
        /// Config file with `synth.*` keys (defaults apply when omitted).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Where to write the CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GridArg {
    /// Ten aggregator-weight blends.
    Aggregators,
    /// Three fully-adjacent layer placements.
    Fa,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("synthesis: {0}")]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("WMAGIN_SEED must be an unsigned integer, found `{value}`")]
    BadSeedEnv { value: String },
    #[error(
        "gradient check failed: max relative error {max:.3e} at {worst} \
         (tolerance {GRADCHECK_TOLERANCE:e})"
    )]
    GradCheckFailed { max: f64, worst: String },
}

fn main() {
    if let Err(error) = run(Cli::parse()) {
        eprintln!("error: {error}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, data, out } => cmd_train(config.as_deref(), &data, &out),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Sweep { grid, config, data } => cmd_sweep(grid, config.as_deref(), &data),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::GenSynth { spec, out } => cmd_gen_synth(spec.as_deref(), &out),
    }
}

fn load_app_config(path: Option<&Path>) -> Result<AppConfig, CliError> {
    Ok(match path {
        Some(p) => load_config(p)?,
        None => AppConfig::default(),
    })
}

/// Writes results to stdout. A closed pipe (`wmagin eval | head`) ends the
/// process quietly with success, like conventional line-oriented tools.
fn print_stdout(text: &str) -> Result<(), CliError> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        Err(source) => Err(CliError::Io {
            path: "stdout".into(),
            source,
        }),
    }
}

/// `WMAGIN_SEED` overrides the configured seed wherever one is used.
fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var("WMAGIN_SEED") {
        Ok(value) => value
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::BadSeedEnv { value }),
        Err(_) => Ok(None),
    }
}

fn cmd_train(config: Option<&Path>, data_path: &Path, out: &Path) -> Result<(), CliError> {
    let mut app = load_app_config(config)?;
    if let Some(seed) = seed_override()? {
        app.train.seed = seed;
    }
    let dataset = load_dataset(data_path, app.model.num_classes)?;
    let split = single_split(&dataset, app.train.split_ratio, app.train.seed)?;
    eprintln!(
        "training on {} utterances ({} train / {} valid / {} test)",
        dataset.len(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    let outcome = train_with_observer(&dataset, &split, &app.model, &app.train, |record| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  valid wa {:.4}  ua {:.4}",
            record.epoch, record.total_loss, record.valid_wa, record.valid_ua
        );
    })?;
    eprintln!(
        "best epoch {} (valid wa {:.4})",
        outcome.best_epoch, outcome.best_valid_wa
    );

    std::fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.display().to_string(),
        source,
    })?;
    save_checkpoint(&out.join("checkpoint.json"), &outcome.params, &app.model)?;
    write_training_log(&out.join("training_log.ndjson"), &outcome.log)?;

    let test_graphs = segment_split(&dataset, &split.test, app.model.graph_len)?;
    let report = evaluate(&test_graphs, &outcome.params, &app.model)?;
    print_stdout(&format!("{}\n", render_report(&report)))
}

fn cmd_eval(checkpoint_path: &Path, data_path: &Path) -> Result<(), CliError> {
    let (params, model) = load_checkpoint(checkpoint_path)?;
    let dataset = load_dataset(data_path, model.num_classes)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let graphs = segment_split(&dataset, &all, model.graph_len)?;
    let report = evaluate(&graphs, &params, &model)?;
    print_stdout(&format!("{}\n", render_report(&report)))
}

fn cmd_sweep(grid: GridArg, config: Option<&Path>, data_path: &Path) -> Result<(), CliError> {
    let mut app = load_app_config(config)?;
    if let Some(seed) = seed_override()? {
        app.train.seed = seed;
    }
    let dataset = load_dataset(data_path, app.model.num_classes)?;
    let grid = match grid {
        GridArg::Aggregators => SweepGrid::Aggregators,
        GridArg::Fa => SweepGrid::FaPlacement,
    };
    let rows = run_sweep(grid, &dataset, &app.model, &app.train, |setting| {
        eprintln!("training {setting}")
    })?;
    print_stdout(&render_table(&rows))
}

fn cmd_gradcheck(seed: u64) -> Result<(), CliError> {
    let (config, graphs) = tiny_check_setup(seed);
    let report = check_model_gradients(&config, &graphs, GRADCHECK_STEP, seed)?;
    print_stdout(&format!(
        "max relative error {:.3e} at {} ({} tensors, {} elements checked)\n",
        report.max_rel_err, report.worst_param, report.params_checked, report.elements_checked
    ))?;
    if report.max_rel_err < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed {
            max: report.max_rel_err,
            worst: report.worst_param,
        })
    }
}

fn cmd_gen_synth(spec_path: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let app = load_app_config(spec_path)?;
    let mut spec = app.synth.unwrap_or_default();
    if let Some(seed) = seed_override()? {
        spec.seed = seed;
    }
    let dataset = generate_synthetic(&spec)?;
    save_dataset(out, &dataset)?;
    eprintln!(
        "wrote {} utterances ({} classes x {}, {} features/frame) to {}",
        dataset.len(),
        spec.num_classes,
        spec.utterances_per_class,
        spec.feature_dim,
        out.display()
    );
    Ok(())
}
