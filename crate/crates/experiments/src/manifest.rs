//! Run manifest: config echo, provenance and checksums of every output.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// An engine diverged; outputs written before the failure are kept.
    Diverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub git_commit: Option<String>,
    pub command: Vec<String>,
    pub master_seed: Option<u64>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn checksum(dir: &Path, file: &Path) -> CliResult<OutputEntry> {
    let bytes = std::fs::read(file)?;
    let rel = file.strip_prefix(dir).unwrap_or(file);
    Ok(OutputEntry {
        path: rel.display().to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

fn git_commit() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_owned())
        .filter(|s| !s.is_empty())
}

/// Collects outputs during a run and writes the manifest last.
#[derive(Debug)]
pub struct ManifestBuilder {
    started: Instant,
    started_unix: u64,
    command: Vec<String>,
    master_seed: Option<u64>,
    config: serde_json::Value,
}

impl ManifestBuilder {
    pub fn start<C: Serialize>(command: Vec<String>, master_seed: Option<u64>, config: &C) -> Self {
        Self {
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            command,
            master_seed,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
        }
    }

    pub fn finish(self, dir: &Path, outputs: &[PathBuf], status: RunStatus, error: Option<String>) -> CliResult<RunManifest> {
        let outputs = outputs
            .iter()
            .map(|f| checksum(dir, f))
            .collect::<CliResult<Vec<_>>>()?;
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git_commit: git_commit(),
            command: self.command,
            master_seed: self.master_seed,
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            status,
            error,
            config: self.config,
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_NAME), text)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_input() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_checksums_relative_to_output_dir() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.csv");
        std::fs::write(&file, "tau\n0\n").unwrap();
        let m = ManifestBuilder::start(vec!["stelab".into()], Some(3), &serde_json::json!({"k": 1}))
            .finish(dir.path(), &[file], RunStatus::Ok, None)
            .unwrap();
        assert_eq!(m.outputs[0].path, "a.csv");
        assert_eq!(m.outputs[0].sha256, sha256_hex(b"tau\n0\n"));
        let back: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
