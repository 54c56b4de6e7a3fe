mod args;
mod config;
mod data;
mod evaluate;
mod gradcheck;
mod manifest;
mod train;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};

/// Exit statuses.
pub const EXIT_IO: u8 = 1;
pub const EXIT_UNDEFINED_METRIC: u8 = 2;
pub const EXIT_GRADCHECK_FAILED: u8 = 3;
pub const EXIT_USAGE: u8 = 64;

/// A problem with how the tool was invoked.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A command that ran to completion but whose result is a failure.
#[derive(Debug)]
pub struct Failed(pub u8);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "failed with status {}", self.0)
    }
}

impl std::error::Error for Failed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failed>() {
        return f.0;
    }
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<intentr::Error>() {
        Some(e) if e.is_undefined_metric() => EXIT_UNDEFINED_METRIC,
        Some(intentr::Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("INTENTR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Usage(format!("INTENTR_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(argv: Vec<String>) -> anyhow::Result<()> {
    let argv = config::merge_config(argv, &Cli::command())?;
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            if code == 0 {
                return Ok(());
            }
            return Err(Failed(code).into());
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Usage(e.to_string()))?;
    init_threads()?;
    let ctx = manifest::Context::new(argv);
    match cli.command {
        Command::Prepare(a) => data::prepare(&ctx, a),
        Command::Synth(a) => data::synth(&ctx, a),
        Command::Train(a) => train::train(&ctx, a),
        Command::Gridsearch(a) => train::gridsearch(&ctx, a),
        Command::Evaluate(a) => evaluate::evaluate(&ctx, a),
        Command::Predict(a) => evaluate::predict(&ctx, a),
        Command::Gradcheck(a) => gradcheck::gradcheck(&ctx, a),
    }
}

/// The error chain joined by `: `, leaving out causes a message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out += ": ";
        }
        out += &msg;
    }
    out
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            if e.downcast_ref::<Failed>().is_none() {
                eprintln!("error: {}", describe(&e));
            }
            ExitCode::from(code)
        }
    }
}
