//! Run directories and manifests.

use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const OUT_ENV: &str = "CRSIM_OUT";

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(InputFile {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub verb: String,
    pub argv: Vec<String>,
    pub device: Option<InputFile>,
    pub pulse: Option<InputFile>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub started: String,
    pub outputs: Vec<String>,
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<root>/<verb>-<timestamp>-<suffix>`.
    pub fn create(root: &Path, verb: &str) -> anyhow::Result<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
        let suffix: u32 = rand::rng().random();
        let path = root.join(format!("{verb}-{stamp}-{suffix:08x}"));
        std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> anyhow::Result<()> {
        let path = self.file("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let path = self.file(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn manifest(
    verb: &str,
    device: Option<&Path>,
    pulse: Option<&Path>,
    config: serde_json::Value,
    seeds: Vec<u64>,
    outputs: &[&str],
) -> anyhow::Result<RunManifest> {
    Ok(RunManifest {
        tool: "crsim",
        version: env!("CARGO_PKG_VERSION"),
        verb: verb.to_string(),
        argv: std::env::args().collect(),
        device: device.map(InputFile::hash).transpose()?,
        pulse: pulse.map(InputFile::hash).transpose()?,
        config,
        seeds,
        started: chrono::Utc::now().to_rfc3339(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    })
}
