//! Artifact emission: config hash, `series.csv` and `summary.json`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::run::RunOutput;

/// SHA-256 of the config with keys sorted and whitespace removed, so that
/// formatting changes keep the hash.
pub fn config_hash(text: &str) -> Result<String, CliError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::schema(format!("config: {e}")))?;
    let canonical = serde_json::to_string(&value).expect("parsed JSON re-serializes");
    Ok(format!("{:x}", Sha256::digest(canonical.as_bytes())))
}

/// `time` followed by the run's columns; values in shortest round-trip form.
pub fn series_csv(output: &RunOutput) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("time").chain(output.columns.iter().map(|c| c.name.as_str()));
    w.write_record(header).map_err(|e| CliError::io(e.to_string()))?;
    for (j, t) in output.times.iter().enumerate() {
        let row = std::iter::once(format!("{t:e}")).chain(output.columns.iter().map(|c| format!("{:e}", c.values[j])));
        w.write_record(row).map_err(|e| CliError::io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::io(e.to_string()))
}

pub fn summary_json(output: &RunOutput) -> String {
    let mut s = serde_json::to_string_pretty(&output.summary).expect("summary serializes");
    s.push('\n');
    s
}

/// Writes `series.csv`, `summary.json` and any attachments into `dir`.
pub fn write_artifacts(dir: &Path, output: &RunOutput) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
    };
    write("series.csv", &series_csv(output)?)?;
    write("summary.json", summary_json(output).as_bytes())?;
    for (name, bytes) in &output.attachments {
        write(name, bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_formatting_and_key_order() {
        let a = config_hash(r#"{"a": 1, "b": [1, 2]}"#).unwrap();
        let b = config_hash("{\n  \"b\": [1,2],\n  \"a\": 1\n}").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert_ne!(a, config_hash(r#"{"a": 2, "b": [1, 2]}"#).unwrap());
    }
}
