//! Experiment runner for flow-matching model merging: pretrain synthetic
//! priors, merge them through density operators with optional reward
//! guidance, validate against the exact grid oracle, and study budget
//! trade-offs. All outputs are plain CSV plus a manifest with content
//! digests; reruns with the same seed reproduce every artifact.

mod commands;
mod config;
mod manifest;
mod presets;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowmerge_core::error::Error;

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "flowmerge", version, about = "Flow model merging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Path to a TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Name of a built-in preset (see `list-presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to runs/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides as dotted key=value pairs, repeatable
    /// (e.g. --override merge.outer_iters=5).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker processes for commands with independent units (kn-study
    /// budgets run as separate processes with disjoint output directories).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the declared priors and write checkpoints plus diagnostics.
    Pretrain(ConfigArgs),
    /// Run the merge (single operator or circuit) and export artifacts.
    Merge(ConfigArgs),
    /// Exact grid-oracle iteration against the closed-form target (d <= 2).
    Oracle(ConfigArgs),
    /// Rerun the merge across (K, N) budgets with a fixed total.
    KnStudy(ConfigArgs),
    /// Print checkpoint metadata.
    Inspect {
        /// Checkpoint path.
        path: PathBuf,
    },
    /// List built-in presets.
    ListPresets,
}

fn effective_config(args: &ConfigArgs) -> Result<(ExperimentConfig, String), Error> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let base_text = match (&args.config, &args.preset) {
        (Some(path), None) => std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?,
        (None, Some(name)) => presets::lookup(name)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown preset {name:?}; available: {}",
                    presets::names().join(", ")
                ))
            })?
            .to_string(),
        _ => {
            return Err(Error::config(
                "exactly one of --config or --preset is required",
            ))
        }
    };
    let cfg = ExperimentConfig::from_toml(&base_text, &overrides)?;
    // The effective text (base plus overrides) feeds the config digest.
    let mut effective = base_text;
    for ov in &overrides {
        effective.push_str(&format!("\n# override: {ov}"));
    }
    Ok((cfg, effective))
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Dimension { .. } | Error::Format(_) => 2,
        Error::NonFinite(_) | Error::TimeOutOfRange { .. } | Error::State(_)
        | Error::Degenerate(_) => 3,
        Error::Unsupported(_) => 4,
        Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(args) => with_config(args, |c, t, o, _| commands::pretrain::run(c, t, o)),
        Command::Merge(args) => with_config(args, |c, t, o, _| commands::merge::run(c, t, o)),
        Command::Oracle(args) => with_config(args, |c, t, o, _| commands::oracle::run(c, t, o)),
        Command::KnStudy(args) => with_config(args, commands::kn::run),
        Command::Inspect { path } => commands::inspect::run(path).map(|_| ()),
        Command::ListPresets => {
            for name in presets::names() {
                println!("{name}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn with_config(
    args: &ConfigArgs,
    f: impl Fn(&ExperimentConfig, &str, &Option<PathBuf>, usize) -> Result<PathBuf, Error>,
) -> Result<(), Error> {
    let (cfg, text) = effective_config(args)?;
    f(&cfg, &text, &args.out, args.jobs).map(|_| ())
}
