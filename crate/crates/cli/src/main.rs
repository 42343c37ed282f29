//! `puzzlecam`: train, infer, label, evaluate and visualize from the command line.

mod commands;
mod config;
mod visualize;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values. Exit code 1.
    Config(String),
    /// Anything that fails while running. Exit code 2.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "puzzlecam",
    version,
    about = "Puzzle-consistent class activation maps from image-level labels"
)]
struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set run.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set run.deterministic=true`.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Shorthand for `--set run.out=DIR`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier; writes model.ckpt and train_log.jsonl.
    Train,
    /// Multi-scale CAMs for every image of the split, as .pcam files.
    Infer,
    /// Threshold CAM files into indexed PNG label maps.
    Pseudo,
    /// mIoU of label maps against the ground-truth masks.
    Eval,
    /// Train and score the four loss combinations.
    Ablate,
    /// Heatmap overlays of single, tiled and final CAMs.
    Visualize {
        /// Images to render.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// List every config key with its default.
    Keys,
    /// Write the synthetic shapes dataset to the output directory.
    MakeSynthetic,
}

fn resolve(cli: &Cli) -> Result<RunConfig, config::ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("run.seed", &seed.to_string())?;
    }
    if cli.deterministic {
        cfg.set("run.deterministic", "true")?;
    }
    if let Some(out) = &cli.out {
        cfg.set("run.out", &out.to_string_lossy())?;
    }
    Ok(cfg)
}

fn init_workers(cfg: &RunConfig) -> Result<(), CliError> {
    let deterministic: bool = cfg.get("run.deterministic").map_err(|e| CliError::Config(e.0))?;
    let threads =
        match std::env::var("PUZZLECAM_NUM_WORKERS") {
            Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
                CliError::Config(format!("PUZZLECAM_NUM_WORKERS must be a positive integer, got `{v}`"))
            })?,
            Err(_) if deterministic => 1,
            Err(_) => 0,
        };
    // Ignore failure: the pool can only be built once per process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli).map_err(|e| CliError::Config(e.0))?;
    init_workers(&cfg)?;
    match &cli.command {
        Command::Train => commands::train_cmd(&cfg),
        Command::Infer => commands::infer_cmd(&cfg),
        Command::Pseudo => commands::pseudo_cmd(&cfg),
        Command::Eval => commands::eval_cmd(&cfg),
        Command::Ablate => commands::ablate_cmd(&cfg),
        Command::Visualize { images } => commands::visualize_cmd(&cfg, images),
        Command::MakeSynthetic => commands::make_synthetic_cmd(&cfg),
        Command::Keys => {
            for (key, default, doc) in config::KEYS {
                println!(
                    "{key:<28} {:<28} {doc}",
                    if default.is_empty() { "(unset)" } else { default }
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
