//! Command-line front end.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data/format/io error,
//! 3 numerical abort, 4 failed self-check. Errors are printed to stderr as
//! one line starting with `error[config]:`, `error[data]:` or
//! `error[numeric]:`.

pub mod commands;
pub mod config;
pub mod selfcheck;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
pub use commands::RunSpec;
pub use config::Config;

#[derive(Debug, Parser)]
#[command(name = "afn", version, about = "Adaptive feature norm domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Debug, Args)]
struct SharedArgs {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (default run/<run.name>).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write synthetic source.csv and target.csv from the shift.* keys.
    GenData,
    /// Train and write checkpoint, metrics and features.
    Train,
    /// Report accuracies of a checkpoint.
    Eval,
    /// Run the three-regime negative-transfer protocol.
    Robustness,
    /// Write per-sample bottleneck features and norms.
    DumpFeatures,
    /// Run the invariant suite.
    Selfcheck,
}

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_SELFCHECK: i32 = 4;

/// Exit code and message prefix for an error.
pub fn classify(e: &Error) -> (i32, &'static str) {
    match e.root() {
        Error::Config(_) => (EXIT_CONFIG, "error[config]"),
        Error::NonFinite { .. } => (EXIT_NUMERIC, "error[numeric]"),
        _ => (EXIT_DATA, "error[data]"),
    }
}

/// Error text without the kind word that the CLI prefix already carries.
pub fn detail(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Data(m) | Error::Format(m) => m.clone(),
        Error::Context { context, source } => format!("{context}: {}", detail(source)),
        other => other.to_string(),
    }
}

fn report(e: &Error) -> i32 {
    let (code, prefix) = classify(e);
    eprintln!("{prefix}: {}", detail(e));
    code
}

fn build_spec(shared: SharedArgs) -> crate::Result<RunSpec> {
    let mut config = Config::default();
    if let Some(p) = &shared.config {
        config.merge_file(p)?;
    }
    for pair in &shared.set {
        config.set_pair(pair)?;
    }
    if let Some(seed) = shared.seed {
        config.set("seed", &seed.to_string())?;
    }
    let out = shared
        .out
        .unwrap_or_else(|| PathBuf::from("run").join(config.run_name()));
    Ok(RunSpec {
        config,
        config_path: shared.config,
        out,
    })
}

/// Runs one command; returns the process exit code.
pub fn execute(command: Command, spec: &RunSpec) -> i32 {
    let result = match command {
        Command::GenData => commands::cmd_gen_data(spec),
        Command::Train => commands::cmd_train(spec),
        Command::Eval => commands::cmd_eval(spec),
        Command::Robustness => commands::cmd_robustness(spec),
        Command::DumpFeatures => commands::cmd_dump_features(spec),
        Command::Selfcheck => match commands::cmd_selfcheck(spec) {
            Ok(true) => Ok(()),
            Ok(false) => return EXIT_SELFCHECK,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

/// Entry point shared by the binary and tests.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let msg = e.to_string();
                let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
                eprintln!("error[config]: {first}");
                return EXIT_CONFIG;
            }
            // --help and --version
            print!("{e}");
            return 0;
        }
    };
    match build_spec(cli.shared) {
        Ok(spec) => execute(cli.command, &spec),
        Err(e) => report(&e),
    }
}
