use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semcom::harness::{
    cmd_ablate_adaptation, cmd_params, cmd_plot, cmd_sweep, cmd_train, ExperimentConfig, SweepRequest,
};
use semcom::{Error, TaskId};

#[derive(Parser, Debug)]
#[command(name = "semcom", version, about = "Unified multi-task semantic communication experiments")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `train.iterations=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (train, ablate, plot) or file (sweep, params).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the unified model, or a single-task model with --task.
    Train {
        #[arg(long)]
        task: Option<TaskId>,
    },
    /// Evaluate a checkpoint over an SNR grid.
    Sweep {
        checkpoint: PathBuf,
        #[arg(long = "task")]
        tasks: Vec<TaskId>,
        #[arg(long, allow_hyphen_values = true)]
        snr_min: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        snr_max: Option<f64>,
        #[arg(long)]
        snr_step: Option<f64>,
        /// Also evaluate with the channel bypassed.
        #[arg(long)]
        noiseless: bool,
        /// Also run the separate source/channel coding baseline.
        #[arg(long)]
        conventional: bool,
    },
    /// Train twin models with and without the adaptation loss.
    AblateAdaptation,
    /// Parameter table for a unified checkpoint and optional single-task ones.
    Params { checkpoints: Vec<PathBuf> },
    /// Metric-vs-SNR plots, one SVG per task.
    Plot { csvs: Vec<PathBuf> },
}

fn config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("out_dir={:?}", out.display().to_string()));
    }
    match &cli.config {
        Some(p) => ExperimentConfig::load(p, &overrides),
        None => ExperimentConfig::with_overrides(&ExperimentConfig::default(), &overrides),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Train { task } => {
            let cfg = config(&cli)?;
            let m = cmd_train(&cfg, *task, cli.force)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Sweep {
            checkpoint,
            tasks,
            snr_min,
            snr_max,
            snr_step,
            noiseless,
            conventional,
        } => {
            let defaults = semcom::harness::SweepConfig::default();
            let req = SweepRequest {
                tasks: tasks.clone(),
                snr_min: snr_min.unwrap_or(defaults.snr_min),
                snr_max: snr_max.unwrap_or(defaults.snr_max),
                snr_step: snr_step.unwrap_or(defaults.snr_step),
                noiseless: *noiseless,
                conventional: *conventional,
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("sweep.csv"));
            let rows = cmd_sweep(checkpoint, &req, &out, cli.force)?;
            println!("{} rows written to {}", rows.len(), out.display());
        }
        Command::AblateAdaptation => {
            let cfg = config(&cli)?;
            let (m, rows) = cmd_ablate_adaptation(&cfg, cli.force)?;
            println!("task,metric,without,with,paper_without,paper_with");
            for r in rows {
                println!(
                    "{},{},{:.4},{:.4},{},{}",
                    r.task,
                    r.metric.as_str(),
                    r.without_adaptation,
                    r.with_adaptation,
                    r.paper_without,
                    r.paper_with
                );
            }
            println!("manifest {}", m.artifacts["manifest"].display());
        }
        Command::Params { checkpoints } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("params.csv"));
            for r in cmd_params(checkpoints, &out, cli.force)? {
                println!("{:<24} {:>14.1} {}", r.model, r.parameters, r.unit);
            }
        }
        Command::Plot { csvs } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("plots"));
            for p in cmd_plot(csvs, &out, cli.force)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
