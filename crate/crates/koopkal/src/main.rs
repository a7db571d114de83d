use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use koopkal::commands::{cmd_evaluate, cmd_forecast, cmd_train, CHECKPOINT};
use koopkal::config::{parse_overrides, RunConfig};
use koopkal::selftest::{format_table, run_all, Faults};
use koopkal::{CliError, Result};

#[derive(Parser)]
#[command(name = "koopkal", version, about = "Probabilistic time-series forecasting with Koopman operators and Kalman filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Forecast samples per window.
    #[arg(long)]
    samples: Option<usize>,
    /// Any config field as `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the checkpoint and log.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on every split.
    Evaluate {
        /// Checkpoint stem (default: <out>/checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample one window and write quantiles and sample paths.
    Forecast {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Window index within the forecast split.
        #[arg(long)]
        window: Option<usize>,
        /// Series CSV (implies data = "csv").
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the numerical property checks.
    Selftest {
        #[arg(long, hide = true)]
        inject_joseph_sign_flip: bool,
    },
}

fn config(common: &Common, extra: Vec<(String, String)>) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(s) = common.seed {
        overrides.push(("seed".to_string(), s.to_string()));
    }
    if let Some(o) = &common.out {
        overrides.push(("out".to_string(), format!("{:?}", o.display().to_string())));
    }
    if let Some(s) = common.samples {
        overrides.push(("samples".to_string(), s.to_string()));
    }
    overrides.extend(extra);
    overrides.extend(parse_overrides(&common.overrides)?);
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn quoted(p: &std::path::Path) -> String {
    format!("{:?}", p.display().to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { resume, common } => {
            let cfg = config(&common, Vec::new())?;
            let stem = cmd_train(&cfg, resume.as_deref())?;
            println!("checkpoint written to {}", stem.with_extension("toml").display());
        }
        Command::Evaluate { checkpoint, common } => {
            let cfg = config(&common, Vec::new())?;
            let stem = checkpoint.unwrap_or_else(|| cfg.out.join(CHECKPOINT));
            println!("metrics written to {}", cmd_evaluate(&cfg, &stem)?.display());
        }
        Command::Forecast { checkpoint, window, csv, common } => {
            let mut extra = Vec::new();
            if let Some(w) = window {
                extra.push(("window".to_string(), w.to_string()));
            }
            if let Some(c) = csv {
                extra.push(("data".to_string(), "\"csv\"".to_string()));
                extra.push(("csv_path".to_string(), quoted(&c)));
            }
            let cfg = config(&common, extra)?;
            let stem = checkpoint.unwrap_or_else(|| cfg.out.join(CHECKPOINT));
            println!("forecast written to {}", cmd_forecast(&cfg, &stem)?.display());
        }
        Command::Selftest { inject_joseph_sign_flip } => {
            let checks = run_all(Faults { joseph_sign_flip: inject_joseph_sign_flip });
            print!("{}", format_table(&checks));
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            if !failed.is_empty() {
                return Err(CliError::Runtime(format!("selftest failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
