//! Command-line front end: configuration, orchestration and artifact I/O.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

use commands::CliError;
use config::ExperimentConfig;

/// Overrides the output directory of every subcommand.
pub const OUTPUT_DIR_ENV: &str = "PROTOCDR_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "protocdr", version, about = "Privacy-preserving federated cross-domain recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file (`key = value` lines, `[domain.<name>]` sections).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set alpha=0.1` or `--set domain.phone.interactions=p.csv`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; takes precedence over the environment and the config file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter, split and sample negatives; writes prepared.json.
    Prepare(Common),
    /// Run federated training; writes the round log and per-round checkpoints.
    Train(Common),
    /// Rank held-out items with the trained checkpoints; writes metrics.json.
    Evaluate(Common),
    /// Train over a parameter grid; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `key=v1,v2,...` with key one of alpha, K, n, epsilon. Repeat for a product grid.
        #[arg(long)]
        grid: Vec<String>,
    },
    /// Train, then fit a reconstruction attack on the uploaded prototypes; writes attack.json.
    Attack(Common),
    /// Retrain with a shrinking overlap registry; writes ablation.csv.
    AblateOverlap {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ratios in (0, 1]; overrides `ratios` from the config.
        #[arg(long)]
        ratios: Option<String>,
    },
}

fn resolve(common: &Common, extra: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut overrides = common.set.clone();
    overrides.extend_from_slice(extra);
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), &overrides)?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    if let Some(dir) = &common.out {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<serde_json::Value, CliError> {
    match cli.command {
        Command::Prepare(c) => commands::prepare(&resolve(&c, &[])?),
        Command::Train(c) => commands::train(&resolve(&c, &[])?),
        Command::Evaluate(c) => commands::evaluate_cmd(&resolve(&c, &[])?),
        Command::Sweep { common, grid } => commands::sweep_cmd(&resolve(&common, &[])?, &grid),
        Command::Attack(c) => commands::attack_cmd(&resolve(&c, &[])?),
        Command::AblateOverlap { common, ratios } => {
            let extra: Vec<String> = ratios.map(|r| format!("ratios={r}")).into_iter().collect();
            commands::ablate_cmd(&resolve(&common, &extra)?)
        }
    }
}

/// Runs the CLI and returns the process exit status. The summary goes to
/// stdout; failures print one JSON error record to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            let err = CliError::Usage(e.kind().to_string());
            eprintln!("{}", err.record());
            return err.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            0
        }
        Err(e) => {
            eprintln!("{}", e.record());
            e.exit_code()
        }
    }
}
