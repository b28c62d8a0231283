use std::fs;
use std::path::Path;

use anyhow::Result;
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize)]
pub struct Host {
    pub os: &'static str,
    pub arch: &'static str,
    pub cpus: usize,
    pub hostname: Option<String>,
}

impl Host {
    pub fn current() -> Self {
        let hostname = fs::read_to_string("/etc/hostname")
            .ok()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty());
        Host {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            hostname,
        }
    }
}

/// Provenance attached to every report the CLI writes.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub tool_version: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Content hash of the input model directory, when there is one.
    pub model_hash: Option<String>,
    pub threads: usize,
    pub started: String,
    pub finished: Option<String>,
    pub host: Host,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl ExperimentManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>, threads: usize) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            model_hash: None,
            threads,
            started: now(),
            finished: None,
            host: Host::current(),
        })
    }

    pub fn finish(&mut self) {
        self.finished = Some(now());
    }
}

/// Hash of the files in a model directory: sha256 over one
/// `<sha256 of file>  <file name>\n` line per file, in name order.
pub fn model_hash(dir: &Path) -> Result<String> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut tree = Sha256::new();
    for name in names {
        let digest = Sha256::digest(fs::read(dir.join(&name))?);
        tree.update(format!("{digest:x}  {name}\n"));
    }
    Ok(format!("sha256:{:x}", tree.finalize()))
}
