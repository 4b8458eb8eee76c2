//! Run settings shared by every subcommand. Each value can come from a flag
//! or from the JSON file given with `--config`; flags win.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use gpnd_core::{Alternation, Backend, Mode};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

macro_rules! settings {
    ($( $(#[$meta:meta])* $name:ident : $ty:ty ),* $(,)?) => {
        #[derive(Args, Clone, Debug, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct Settings {
            $( $(#[$meta])* pub $name: Option<$ty>, )*
        }

        impl Settings {
            /// Fills every unset value from `fallback`.
            pub fn or(self, fallback: Settings) -> Settings {
                Settings { $( $name: self.$name.or(fallback.$name), )* }
            }
        }
    };
}

settings! {
    /// Input CSV (fit, bench) or query CSV (predict).
    #[arg(long)]
    data: PathBuf,
    /// Target column: a name, a 0-based index, or `last`.
    #[arg(long)]
    target: String,
    /// The input CSV has no header row.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_header: bool,
    /// Model file to read (predict).
    #[arg(long)]
    model: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = Backend::from_str)]
    backend: Backend,
    /// `classical` or `gp_nd`; defaults to `gp_nd` when negatives are given.
    #[arg(long, value_parser = Mode::from_str)]
    mode: Mode,
    #[arg(long, value_parser = Alternation::from_str)]
    alternation: Alternation,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    sigma_neg: f64,
    #[arg(long)]
    lr: f64,
    #[arg(long)]
    epochs: usize,
    /// Minibatch size for the sparse backend.
    #[arg(long)]
    batch_size: usize,
    /// Number of inducing points, capped at the training size.
    #[arg(long)]
    inducing: usize,
    /// Keep inducing inputs at their initial placement.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    fix_inducing: bool,
    /// `shuffled:m=N` or `file:<csv>`.
    #[arg(long)]
    negatives: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    jobs: usize,
    #[arg(long)]
    report: ReportFormat,
    /// Train and validation fractions, e.g. `0.8,0.1`; the rest is test.
    #[arg(long, value_delimiter = ',')]
    split: Vec<f64>,
    /// Stop once the objective has converged.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    early_stop: bool,
    /// Record wall-clock timings in reports (otherwise written as zero).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    timings: bool,
    /// Scene: path shape (`two_sines` or `gentle`).
    #[arg(long)]
    shape: String,
    /// Scene: number of trajectory markers.
    #[arg(long)]
    markers: usize,
    /// Scene: number of obstacles.
    #[arg(long)]
    obstacles: usize,
    /// Scene: marker noise standard deviation.
    #[arg(long)]
    noise_std: f64,
    /// Sweep: β grid.
    #[arg(long, value_delimiter = ',')]
    betas: Vec<f64>,
    /// Sweep: σ_neg grid.
    #[arg(long, value_delimiter = ',')]
    sigmas: Vec<f64>,
    /// Bench: negative counts to time.
    #[arg(long, value_delimiter = ',')]
    ms: Vec<usize>,
    /// Bench: repetitions per negative count.
    #[arg(long)]
    runs: usize,
    /// Bench: rows of the synthetic table when no `--data` is given.
    #[arg(long)]
    rows: usize,
}

/// Flags plus the optional config file they override.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// JSON file with any of the settings below (snake_case keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

impl RunArgs {
    pub fn resolve(self) -> Result<Settings, CliError> {
        match &self.config {
            None => Ok(self.settings),
            Some(path) => Ok(self.settings.or(load_config(path)?)),
        }
    }
}

pub fn load_config(path: &Path) -> Result<Settings, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

impl Settings {
    pub fn require_out(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("--out is required".into()))
    }

    pub fn require_data(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Config("--data is required".into()))
    }

    pub fn flag(value: Option<bool>) -> bool {
        value.unwrap_or(false)
    }
}

/// Where negative datapairs come from.
#[derive(Clone, Debug, PartialEq)]
pub enum NegativesSource {
    Shuffled { m: usize },
    File(PathBuf),
}

impl FromStr for NegativesSource {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("--negatives expects shuffled:m=N or file:<csv>, got '{s}'"));
        if let Some(rest) = s.strip_prefix("shuffled:") {
            let m = rest.strip_prefix("m=").ok_or_else(bad)?;
            Ok(NegativesSource::Shuffled {
                m: m.parse().map_err(|_| bad())?,
            })
        } else if let Some(path) = s.strip_prefix("file:") {
            if path.is_empty() {
                return Err(bad());
            }
            Ok(NegativesSource::File(PathBuf::from(path)))
        } else {
            Err(bad())
        }
    }
}
