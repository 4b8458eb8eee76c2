//! `gpnd`: fit, predict, scene, sweep and bench subcommands over `gpnd-core`.
//!
//! Exit status: 0 success, 1 I/O, 2 configuration, 3 ingestion, 4 numerical,
//! 5 training. Failures are also reported as a JSON record on stderr and, when
//! an output directory is known, in `<out>/error.json`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod error;
pub mod model_file;
pub mod settings;

pub use error::{CliError, ErrorKind};
pub use model_file::ModelFile;
pub use settings::{NegativesSource, ReportFormat, RunArgs, Settings};

#[derive(Parser, Debug)]
#[command(name = "gpnd", version, about = "Gaussian-process regression with negative datapairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a CSV file and write a model file and fit report.
    Fit(RunArgs),
    /// Predict at the inputs of a CSV file with a saved model.
    Predict(RunArgs),
    /// Run the trajectory scene: classical against GP-ND.
    Scene(RunArgs),
    /// Train GP-ND on the scene over a (β, σ_neg) grid.
    Sweep(RunArgs),
    /// Time the GP-ND overhead over several negative counts.
    Bench(RunArgs),
}

fn execute(command: Command) -> (Result<(), CliError>, Option<PathBuf>) {
    let (args, action): (RunArgs, fn(&Settings) -> Result<(), CliError>) = match command {
        Command::Fit(a) => (a, commands::fit),
        Command::Predict(a) => (a, commands::predict),
        Command::Scene(a) => (a, commands::scene),
        Command::Sweep(a) => (a, commands::sweep),
        Command::Bench(a) => (a, commands::bench),
    };
    let fallback_out = args.settings.out.clone();
    match args.resolve() {
        Ok(settings) => {
            let out = settings.out.clone();
            (action(&settings), out)
        }
        Err(e) => (Err(e), fallback_out),
    }
}

fn report_failure(err: &CliError, out: Option<PathBuf>) {
    let record = err.record();
    let json = serde_json::to_string(&record).unwrap_or_else(|_| format!("{{\"message\":{:?}}}", record.message));
    eprintln!("{json}");
    if let Some(dir) = out {
        if std::fs::create_dir_all(&dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), format!("{json}\n"));
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { ErrorKind::Config.exit_code() } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        (Ok(()), _) => 0,
        (Err(e), out) => {
            report_failure(&e, out);
            e.kind().exit_code()
        }
    }
}
