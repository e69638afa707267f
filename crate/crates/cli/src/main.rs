mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::{DataKind, Usage};
use crate::config::{Overrides, RunConfig};

const OUT_ENV: &str = "METADIAG_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "metadiag",
    version,
    about = "Meta-learned cognitive diagnosis experiments",
    after_help = "Environment:\n  METADIAG_OUT  default output root when --out is not given (default: ./runs);\n                each command then writes to <root>/<command>\n  RUST_LOG      log filter, e.g. RUST_LOG=info\n\nExit codes: 0 success, 1 usage or config error, 2 runtime error."
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; unknown keys are rejected
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for data generation and training (overrides the config)
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory [default: $METADIAG_OUT/<command>]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Continue meta-training from the checkpoint in the output directory
    #[arg(long, global = true)]
    resume: bool,
    /// Disable the parameter-protection penalty
    #[arg(long, global = true)]
    no_ppm: bool,
    /// Decode with the knowledge base instead of per-class heads
    #[arg(long, global = true)]
    no_perclass: bool,
    /// Skip meta-training and start from a random initialization
    #[arg(long, global = true)]
    no_meta: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic task units
    GenData {
        #[arg(long, value_enum, default_value = "family")]
        kind: DataKind,
        /// Number of units [default: from the config]
        #[arg(long)]
        count: Option<usize>,
    },
    /// Convert JSON response logs into canonical units
    Ingest {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Meta-train the knowledge base on a pool of units
    MetaTrain {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Unit ids to keep out of the pool (comma separated)
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
    },
    /// Adapt a checkpoint to one unit and fit its heads
    FineTune {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long)]
        unit: String,
    },
    /// Fine-tune and score units on their query sets
    Evaluate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Unit ids (comma separated) [default: all]
        #[arg(long, value_delimiter = ',')]
        units: Vec<String>,
        /// Also score a randomly initialized model trained the same way
        #[arg(long)]
        baseline: bool,
    },
    /// Train through a task sequence and report backward transfer
    Continual {
        /// Starting parameters [default: meta-train on the pool]
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        pool: PathBuf,
        #[arg(long, value_name = "DIR")]
        sequence: PathBuf,
    },
    /// Compare the full pipeline with each module removed
    Ablate {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        pool: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long)]
        unit: String,
    },
    /// Search head hyperparameters (eta, lambda, mu)
    Grid {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long)]
        unit: String,
    },
    /// Summarize metrics.csv files from earlier runs
    Report {
        #[arg(required = true, value_name = "RUN_DIR")]
        runs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Ingest { .. } => "ingest",
            Command::MetaTrain { .. } => "meta-train",
            Command::FineTune { .. } => "fine-tune",
            Command::Evaluate { .. } => "evaluate",
            Command::Continual { .. } => "continual",
            Command::Ablate { .. } => "ablate",
            Command::Grid { .. } => "grid",
            Command::Report { .. } => "report",
        }
    }

    fn inputs(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = Vec::new();
        match self {
            Command::GenData { .. } => {}
            Command::Ingest { inputs } => v.extend(inputs.iter().cloned()),
            Command::MetaTrain { data, .. } => v.push(data.clone()),
            Command::FineTune {
                checkpoint, data, ..
            }
            | Command::Evaluate {
                checkpoint, data, ..
            }
            | Command::Grid {
                checkpoint, data, ..
            } => {
                v.push(checkpoint.clone());
                v.push(data.clone());
            }
            Command::Continual {
                checkpoint,
                pool,
                sequence,
            } => {
                v.extend(checkpoint.iter().cloned());
                v.push(pool.clone());
                v.push(sequence.clone());
            }
            Command::Ablate {
                checkpoint,
                pool,
                data,
                ..
            } => {
                v.extend(checkpoint.iter().cloned());
                v.push(pool.clone());
                v.push(data.clone());
            }
            Command::Report { runs } => {
                v.extend(runs.iter().map(|r| r.join(commands::METRICS_CSV)));
            }
        }
        v
    }
}

fn out_dir(global: &Global, command: &str) -> PathBuf {
    match &global.out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            root.join(command)
        }
    }
}

fn resolve_config(global: &Global) -> anyhow::Result<RunConfig> {
    let base = match &global.config {
        Some(p) => {
            commands::require_file(p, "config file")?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: global.seed,
        no_ppm: global.no_ppm,
        no_perclass: global.no_perclass,
        no_meta: global.no_meta,
    };
    base.resolve(&overrides)
}

fn dispatch(cli: &Cli, config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData { kind, count } => {
            commands::gen_data(config, *kind, *count, out).map(|_| ())
        }
        Command::Ingest { inputs } => commands::ingest(config, inputs, out),
        Command::MetaTrain { data, exclude } => {
            commands::meta_train(config, data, exclude, cli.global.resume, out)
        }
        Command::FineTune {
            checkpoint,
            data,
            unit,
        } => commands::fine_tune(config, checkpoint, data, unit, out),
        Command::Evaluate {
            checkpoint,
            data,
            units,
            baseline,
        } => commands::evaluate(config, checkpoint, data, units, *baseline, out),
        Command::Continual {
            checkpoint,
            pool,
            sequence,
        } => commands::continual(config, checkpoint.as_deref(), pool, sequence, out),
        Command::Ablate {
            checkpoint,
            pool,
            data,
            unit,
        } => commands::ablate(config, checkpoint.as_deref(), pool, data, unit, out),
        Command::Grid {
            checkpoint,
            data,
            unit,
        } => commands::grid(config, checkpoint, data, unit, out),
        Command::Report { runs } => commands::report(runs, out),
    }
}

/// Config problems and bad invocations exit 1, everything else 2.
fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Usage>()
            || e.is::<toml::de::Error>()
            || matches!(
                e.downcast_ref::<metadiag::Error>(),
                Some(metadiag::Error::InvalidArgument(_))
            )
    })
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let config = resolve_config(&cli.global).map_err(|e| match is_usage(&e) {
        true => e,
        false => e.context(Usage("configuration rejected".into())),
    })?;
    let command = cli.command.name();
    let out = out_dir(&cli.global, command);
    manifest::write_config(&out, &config)?;
    dispatch(cli, &config, &out)?;
    manifest::write_manifest(&out, command, &config, &cli.command.inputs())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 1 } else { 2 })
        }
    }
}
