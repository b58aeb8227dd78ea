mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use log::error;

use advns::ErrorKind;
use commands::Run;
use config::{Config, UsageError};

#[derive(Parser)]
#[command(name = "advns", version, about = "Linear classification with adversarial negative sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.rho=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Working directory holding inputs from earlier stages and all outputs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Load svmlight data, reduce to single labels, split and fit the PCA.
    Preprocess(Common),
    /// Fit the auxiliary label tree on the PCA-reduced training split.
    FitAux(Common),
    /// Train the linear classifier.
    Train(Common),
    /// Evaluate a trained model.
    Eval(Common),
    /// Signal-to-noise diagnostics on explicit probability tables.
    Diagnose(Common),
}

fn run(cli: Cli) -> Result<()> {
    let (name, common, f): (&'static str, Common, fn(&mut Run<'_>) -> Result<()>) = match cli.command {
        Command::Preprocess(c) => ("preprocess", c, commands::preprocess),
        Command::FitAux(c) => ("fit-aux", c, commands::fit_aux),
        Command::Train(c) => ("train", c, commands::train),
        Command::Eval(c) => ("eval", c, commands::eval),
        Command::Diagnose(c) => ("diagnose", c, commands::diagnose),
    };
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if common.threads == 0 {
        return Err(UsageError("--threads must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(common.threads).build_global()?;
    std::fs::create_dir_all(&common.out)?;
    let mut r = Run::new(name, &cfg, &common.out, common.threads);
    f(&mut r)?;
    r.finish()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    if let Some(err) = e.downcast_ref::<advns::Error>() {
        return match err.kind() {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        };
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
