use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub git_describe: String,
    pub master_seed: Option<u64>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
}

impl RunMeta {
    pub fn new(command: &str, config: &impl Serialize, master_seed: Option<u64>) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(RunMeta {
            tool: "mfeb",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            git_describe: git_describe(),
            master_seed,
            config_hash: config_hash(&serde_json::to_string(&config)?),
            config,
            outputs: Vec::new(),
            summary: None,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::table::ensure_parent(path)?;
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// `git describe --always --dirty`, or `"unknown"` outside a work tree.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Hex SHA-256 of the canonical JSON form.
pub fn config_hash(canonical_json: &str) -> String {
    Sha256::digest(canonical_json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// `dir/stem.meta.json` next to `dir/stem.csv`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("meta.json")
}

/// `dir/stem_suffix.csv` next to `dir/stem.csv`.
pub fn companion_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_and_hash() {
        let out = Path::new("/tmp/run/mse.csv");
        assert_eq!(sidecar_path(out), Path::new("/tmp/run/mse.meta.json"));
        assert_eq!(companion_path(out, "summary"), Path::new("/tmp/run/mse_summary.csv"));
        assert_eq!(config_hash(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
