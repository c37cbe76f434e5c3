//! Output directory bookkeeping and the JSON run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::errors::invalid;
use crate::Command;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    NotConverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub core_version: String,
    pub command: Command,
    pub config: PipelineConfig,
    pub config_sha256: String,
    pub threads: usize,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timings: Vec<Timing>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("manifest {}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(config: &PipelineConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

/// Tracks what a command wrote, and refuses to overwrite any of its inputs.
pub struct RunLog {
    dir: PathBuf,
    manifest_name: String,
    inputs: Vec<PathBuf>,
    artifacts: Vec<Artifact>,
    timings: Vec<Timing>,
}

impl RunLog {
    pub fn new(dir: &Path, command: &str, inputs: &[&Path]) -> anyhow::Result<Self> {
        for input in inputs {
            if !input.exists() {
                return Err(invalid(format!("input {} does not exist", input.display())));
            }
        }
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let inputs = inputs
            .iter()
            .map(|p| p.canonicalize().unwrap_or_else(|_| p.to_path_buf()))
            .collect();
        let log = Self {
            dir: dir.to_path_buf(),
            manifest_name: format!("manifest-{command}.json"),
            inputs,
            artifacts: Vec::new(),
            timings: Vec::new(),
        };
        log.target(&log.manifest_name)?;
        Ok(log)
    }

    /// Destination for artifact `name`; fails if that would replace an input.
    pub fn target(&self, name: &str) -> anyhow::Result<PathBuf> {
        let path = self.dir.join(name);
        if let Ok(canonical) = path.canonicalize() {
            if self.inputs.contains(&canonical) {
                return Err(invalid(format!("output {} would overwrite an input", path.display())));
            }
        }
        Ok(path)
    }

    /// Writes an artifact through `write` and records its digest.
    pub fn write(&mut self, name: &str, write: impl FnOnce(&Path) -> anyhow::Result<()>) -> anyhow::Result<PathBuf> {
        let path = self.target(name)?;
        write(&path).with_context(|| format!("writing {}", path.display()))?;
        let bytes = std::fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
        self.artifacts.retain(|a| a.path != name);
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(path)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> anyhow::Result<PathBuf> {
        self.write(name, |p| Ok(std::fs::write(p, text)?))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn stage<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> anyhow::Result<T>) -> anyhow::Result<T> {
        let start = Instant::now();
        let out = f(self);
        self.timings.push(Timing {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    /// Writes `manifest-<command>.json`, which is not itself listed as an artifact.
    pub fn finish(
        self,
        command: &Command,
        config: &PipelineConfig,
        status: Status,
        error: Option<String>,
    ) -> anyhow::Result<PathBuf> {
        let manifest = Manifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            core_version: quasispec::VERSION.to_string(),
            command: command.clone(),
            config: config.clone(),
            config_sha256: config_hash(config),
            threads: rayon::current_num_threads(),
            status,
            error,
            timings: self.timings,
            artifacts: self.artifacts,
        };
        let path = self.dir.join(&self.manifest_name);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
