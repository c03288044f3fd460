//! Run manifests: every artifact-producing command writes one JSON manifest
//! alongside its primary output, holding the fully resolved configuration,
//! seeds, generator name, code version, duration, and output paths. A rerun
//! from the manifest's config and seed reproduces the outputs bit-for-bit.

use clab_core::rng::PRNG_NAME;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub prng: &'static str,
    pub code_version: &'static str,
    pub duration_seconds: f64,
    pub outputs: Vec<PathBuf>,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config,
            seeds: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seeds.push(seed);
        self
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `<primary output>.manifest.json`.
    pub fn write(self) -> anyhow::Result<PathBuf> {
        let primary = self
            .outputs
            .first()
            .cloned()
            .ok_or_else(|| anyhow::anyhow!("manifest needs at least one output"))?;
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            seeds: self.seeds,
            prng: PRNG_NAME,
            code_version: env!("CARGO_PKG_VERSION"),
            duration_seconds: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs,
        };
        let mut path = primary.into_os_string();
        path.push(".manifest.json");
        let path = PathBuf::from(path);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }
}
