//! Command-line entry point: `diverse-vit <command> [--config file] [--key value ...]`.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use thiserror::Error;

pub use config::{parse_kv, DatasetKind, RunConfig, DATA_ROOT_ENV};

pub const COMMANDS: [&str; 7] = ["prepare-data", "train", "eval", "select-head", "profile-heads", "report", "reproduce"];

/// Exit code for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running a valid command.
pub const EXIT_FAILURE: i32 = 1;

pub const USAGE: &str = "\
usage: diverse-vit <command> [--config FILE] [--key value ...]

commands:
  prepare-data   build the six splits and save them under <out_dir>/splits
  train          train one configuration (or the lambda x lr grid with --grid true)
  eval           accuracy of --checkpoint on id-test and ood-test, optionally pruned with --keep-heads
  select-head    oracle single-head selection on ood-val
  profile-heads  per-head robust/spurious accuracy on the balanced probe
  report         re-emit the table from <out_dir>/methods/*.json
  reproduce      ERM and Div per seed, both with and without head selection

Any config key is accepted as a flag; dashes and underscores are interchangeable
(--lambda-grid 0.1,1 equals --lambda_grid 0.1,1). Common keys:
  dataset (synthetic | mnist-cifar), mnist_dir, cifar_dir, splits_dir, rho,
  seeds (count or comma list), lambda, learning_rate, lambda_grid, lr_grid,
  epochs, batch_size, heads, dim, precision (f32 | f64), out_dir, checkpoint.
The dataset root may also come from $DIVERSE_VIT_DATA_ROOT.
";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing command")]
    MissingCommand,
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("flag `{0}` needs a value")]
    MissingValue(String),
    #[error("unexpected argument `{0}`")]
    UnexpectedArgument(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("`{0}` is required for this command (set --{0}; dataset paths may also come from ${DATA_ROOT_ENV})")]
    MissingPath(&'static str),
    #[error("`{0}` does not exist: {1}")]
    PathNotFound(&'static str, PathBuf),
    #[error("cannot read config file {path}: {source}")]
    ConfigFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn shows_usage(&self) -> bool {
        matches!(
            self,
            CliError::MissingCommand | CliError::UnknownCommand(_) | CliError::UnknownKey(_) | CliError::MissingValue(_) | CliError::UnexpectedArgument(_)
        )
    }
}

/// Parsed command line before config resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub command: String,
    pub config_file: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

pub fn parse_args(args: &[String]) -> Result<Invocation, CliError> {
    let mut iter = args.iter();
    let command = iter.next().ok_or(CliError::MissingCommand)?.clone();
    if !COMMANDS.contains(&command.as_str()) {
        return Err(CliError::UnknownCommand(command));
    }
    let mut invocation = Invocation {
        command,
        config_file: None,
        overrides: Vec::new(),
    };
    while let Some(arg) = iter.next() {
        let flag = arg.strip_prefix("--").ok_or_else(|| CliError::UnexpectedArgument(arg.clone()))?;
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        let key = key.replace('-', "_");
        let value = match inline {
            Some(v) => v,
            None => iter.next().cloned().ok_or_else(|| CliError::MissingValue(arg.clone()))?,
        };
        if key == "config" {
            invocation.config_file = Some(PathBuf::from(value));
        } else {
            invocation.overrides.push((key, value));
        }
    }
    Ok(invocation)
}

/// Runs the command line (without the program name) and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let args: Vec<String> = args.into_iter().map(|a| a.into().to_string_lossy().into_owned()).collect();
    if args.first().map_or(false, |a| a == "--help" || a == "-h" || a == "help") {
        print!("{USAGE}");
        return 0;
    }
    match execute(&args) {
        Ok(()) => 0,
        Err(err) => match err.downcast_ref::<CliError>() {
            Some(cli) => {
                eprintln!("error: {cli}");
                if cli.shows_usage() {
                    eprint!("\n{USAGE}");
                }
                EXIT_USAGE
            }
            None => {
                eprintln!("error: {err:#}");
                EXIT_FAILURE
            }
        },
    }
}

fn execute(args: &[String]) -> anyhow::Result<()> {
    let invocation = parse_args(args)?;
    let file_text = match &invocation.config_file {
        Some(path) => Some(std::fs::read_to_string(path).map_err(|source| CliError::ConfigFile {
            path: path.clone(),
            source,
        })?),
        None => None,
    };
    let env_root = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    let config = RunConfig::resolve(file_text.as_deref(), env_root.as_deref(), &invocation.overrides)?;
    commands::dispatch(&invocation.command, &config)
}

#[cfg(test)]
mod tests;
