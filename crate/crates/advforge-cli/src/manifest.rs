//! Run manifests: every command records what it did — resolved config,
//! seeds, input digests, outputs, version, wall-clock — so any run can be
//! reproduced from the manifest alone.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    config: serde_json::Value,
    seeds: serde_json::Value,
    input_digests: BTreeMap<String, String>,
    outputs: Vec<String>,
    duration_seconds: f64,
    blas: String,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seeds: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::Value::Null,
            seeds: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn config(mut self, c: impl Serialize) -> Self {
        self.config = serde_json::to_value(c).expect("config serializes");
        self
    }

    pub fn seeds(mut self, s: impl Serialize) -> Self {
        self.seeds = serde_json::to_value(s).expect("seeds serialize");
        self
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.to_path_buf());
        self
    }

    /// Digests inputs, stamps the duration, and writes the manifest
    /// atomically (temp file + rename in the destination directory).
    pub fn write(self, path: &Path) -> Result<()> {
        let mut input_digests = BTreeMap::new();
        for p in &self.inputs {
            input_digests.insert(p.display().to_string(), sha256_file(p)?);
        }
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            seeds: self.seeds,
            input_digests,
            outputs: self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
            blas: advforge_core::blas::config_banner(),
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
        let tmp = match dir {
            Some(d) => d.join(format!(
                ".{}.tmp",
                path.file_name().unwrap_or_default().to_string_lossy()
            )),
            None => PathBuf::from(format!(
                ".{}.tmp",
                path.file_name().unwrap_or_default().to_string_lossy()
            )),
        };
        std::fs::write(&tmp, json).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path)
            .with_context(|| format!("renaming manifest into place at {}", path.display()))?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)
        .with_context(|| format!("digesting input {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
