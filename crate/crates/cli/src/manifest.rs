//! Per-directory run manifest.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use humansense::io;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector of an equivalent invocation.
    pub args: Vec<String>,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    pub summary: serde_json::Value,
}

/// `v{crate version}`, or the value of `HUMANSENSE_GIT_DESCRIBE` at build
/// time when set.
pub fn version() -> String {
    option_env!("HUMANSENSE_GIT_DESCRIBE")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// SHA-256 of the compact JSON encoding, lowercase hex.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configs serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct ManifestBuilder {
    start: Instant,
    pub manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, config_hash: String, seed: Option<u64>) -> Self {
        Self {
            start: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                args: Vec::new(),
                config_hash,
                seed,
                version: version(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                wall_clock_s: 0.0,
                summary: serde_json::Value::Null,
            },
        }
    }

    pub fn arg(&mut self, flag: &str, value: impl ToString) -> &mut Self {
        self.manifest.args.push(flag.to_string());
        self.manifest.args.push(value.to_string());
        self
    }

    pub fn flag(&mut self, flag: &str) -> &mut Self {
        self.manifest.args.push(flag.to_string());
        self
    }

    pub fn input(&mut self, name: &str, path: &Path) -> &mut Self {
        self.manifest.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn output(&mut self, file: impl Into<String>) -> &mut Self {
        self.manifest.outputs.push(file.into());
        self
    }

    pub fn finish(mut self, dir: &Path, summary: serde_json::Value) -> CliResult<RunManifest> {
        self.manifest.outputs.sort();
        self.manifest.outputs.dedup();
        self.manifest.wall_clock_s = self.start.elapsed().as_secs_f64();
        self.manifest.summary = summary;
        io::write_json_pretty(&dir.join(MANIFEST_FILE), &self.manifest)?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(dir: &Path) -> CliResult<RunManifest> {
    Ok(io::read_json(&dir.join(MANIFEST_FILE))?)
}
