//! Command-line front end.
//!
//! Every command reads a flat `key = value` config (`--config`), applies
//! `--set key=value` overrides in order, and writes under `--out`.
//! Exit status: 0 on success, 1 for configuration errors, 2 for failures
//! at run time.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctkd::config::FlatConfig;
use ctkd::Error;

#[derive(Parser, Debug)]
#[command(name = "ctkd", version, about = "Conformer transducers with multi-stage knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from scratch.
    Train(Common),
    /// Distil a student from a teacher checkpoint.
    Distill(Common),
    /// Run a multi-stage distillation pipeline.
    Pipeline(Common),
    /// Decode and score an evaluation set.
    Eval(Common),
    /// Print hypotheses for a data set.
    Decode(Common),
    /// Print the parameter count of a model config.
    CountParams(Common),
    /// Finite-difference check of every gradient.
    Gradcheck(Common),
    /// Write a synthetic corpus as features plus manifest.
    GenToyData(Common),
}

/// A failure with its exit status.
pub struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 1 } else { 2 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

fn load_config(common: &Common) -> Result<FlatConfig, Failure> {
    let mut cfg = match &common.config {
        // an unreadable config file is a config problem, not a run failure
        Some(p) => FlatConfig::load(p).map_err(|e| Failure {
            code: 1,
            message: e.to_string(),
        })?,
        None => FlatConfig::new(),
    };
    for s in &common.set {
        cfg.set_override(s)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(c) => commands::train(load_config(&c)?, &c.out, false),
        Command::Distill(c) => commands::train(load_config(&c)?, &c.out, true),
        Command::Pipeline(c) => commands::pipeline(load_config(&c)?, &c.out),
        Command::Eval(c) => commands::eval(load_config(&c)?, &c.out),
        Command::Decode(c) => commands::decode(load_config(&c)?, &c.out),
        Command::CountParams(c) => commands::count_params(load_config(&c)?),
        Command::Gradcheck(c) => commands::gradcheck(load_config(&c)?, &c.out),
        Command::GenToyData(c) => commands::gen_toy_data(load_config(&c)?, &c.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
