//! Configuration, execution and result emission for `keldysh` runs.

// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod output;
pub mod run;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::RunConfig;
pub use error::CliError;
pub use run::{execute, RunOutput};

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "KELDYSH_THREADS";

/// Parses a config, runs it and writes its artifacts. Returns the output
/// directory; a run whose artifacts were written but which failed a
/// numerical check returns that failure after writing.
pub fn run_file(config_path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<(PathBuf, RunOutput), CliError> {
    let text = fs::read_to_string(config_path).map_err(|e| CliError::io(format!("{}: {e}", config_path.display())))?;
    let cfg = RunConfig::from_json(&text)?;
    let dir = match (out, &cfg.output) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => o.clone(),
        (None, None) => return Err(CliError::schema("no output directory: pass --out or set output in the config")),
    };
    let hash = output::config_hash(&text)?;
    let result = execute(&cfg, hash, seed.unwrap_or(cfg.base_seed))?;
    output::write_artifacts(&dir, &result)?;
    Ok((dir, result))
}

/// Thread count from the flag, then the environment, then the default.
pub fn thread_count(flag: Option<usize>, env: Option<&str>) -> Result<Option<usize>, CliError> {
    if let Some(n) = flag {
        return positive(n);
    }
    match env.map(str::trim).filter(|s| !s.is_empty()) {
        None => Ok(None),
        Some(s) => {
            let n = s.parse().map_err(|_| CliError::schema(format!("{THREADS_ENV}={s:?} is not a thread count")))?;
            positive(n)
        }
    }
}

fn positive(n: usize) -> Result<Option<usize>, CliError> {
    if n == 0 {
        return Err(CliError::schema("thread count must be positive"));
    }
    Ok(Some(n))
}
