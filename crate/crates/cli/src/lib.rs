//! Batch command surface: `translab <command> --config <path> [--seed N] [--out DIR]`.
//!
//! Exit codes are 0 when every check of the command passes, 2 when a check
//! fails, and 1 on usage, configuration or runtime errors.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use sha2::{Digest, Sha256};

pub use commands::{execute, CliError, Summary};
pub use config::RunConfig;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "TOOL_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Normalize,
    Decay,
    Fclt,
    Breiman,
    Support,
    OracleCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Normalize => "normalize",
            Command::Decay => "decay",
            Command::Fclt => "fclt",
            Command::Breiman => "breiman",
            Command::Support => "support",
            Command::OracleCheck => "oracle-check",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "translab",
    version,
    about = "Transfer-operator limit theorems, checked numerically"
)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `TOOL_SEED` and the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Hex SHA-256 of the raw configuration bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `--seed`, then `TOOL_SEED`, then the configured seed.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, configured: u64) -> Result<u64, String> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("{SEED_ENV} must be an unsigned integer, got {v:?}")),
        None => Ok(configured),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_args(&args) {
        Ok(summary) => {
            for c in &summary.checks {
                eprintln!(
                    "{} {}: {} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.bound
                );
            }
            if summary.accepted() {
                0
            } else {
                2
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run_args(args: &Args) -> Result<Summary, CliError> {
    let bytes = std::fs::read(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| CliError::Config("configuration is not UTF-8".into()))?;
    let cfg = config::parse(text).map_err(CliError::Config)?;
    let env = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(args.seed, env.as_deref(), cfg.seed).map_err(CliError::Config)?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let hash = config_hash(&bytes);
    let start = std::time::Instant::now();
    let summary = with_workers(cfg.workers, || {
        execute(args.command, &cfg, seed, &hash, &out)
    })?;
    eprintln!(
        "{} finished in {:.1?}",
        args.command.name(),
        start.elapsed()
    );
    Ok(summary)
}

/// Runs `f` on a pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| CliError::Config(format!("cannot start {w} workers: {e}")))?
            .install(f),
        None => f(),
    }
}

/// Runs a command from an in-memory configuration, as the binary would.
pub fn execute_text(
    command: Command,
    text: &str,
    seed: Option<u64>,
    out: &Path,
) -> Result<Summary, CliError> {
    let cfg = config::parse(text).map_err(CliError::Config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let hash = config_hash(text.as_bytes());
    with_workers(cfg.workers, || execute(command, &cfg, seed, &hash, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_env_beats_config() {
        assert_eq!(resolve_seed(Some(1), Some("2"), 3), Ok(1));
        assert_eq!(resolve_seed(None, Some(" 2 "), 3), Ok(2));
        assert_eq!(resolve_seed(None, None, 3), Ok(3));
        let e = resolve_seed(None, Some("two"), 3).unwrap_err();
        assert!(e.contains(SEED_ENV), "{e}");
    }

    #[test]
    fn hash_is_hex_sha256_of_the_bytes() {
        assert_eq!(
            config_hash(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_ne!(config_hash(b"seed = 1\n"), config_hash(b"seed = 1 \n"));
    }
}
