use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use mmckd_core::datamodel::{blob_file, Modality, MANIFEST_FILE};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Content hash per input dataset directory.
    pub datasets: Vec<DatasetRef>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

#[derive(Debug, Serialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// SHA-256 over git-style `blob <len>\0<bytes>` records of the dataset files.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let files = std::iter::once(MANIFEST_FILE).chain(Modality::ALL.map(blob_file));
    for name in files {
        let path = dir.join(name);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(&bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

pub fn dataset_ref(dir: &Path) -> Result<DatasetRef> {
    Ok(DatasetRef {
        path: dir.to_path_buf(),
        sha256: dataset_hash(dir)?,
    })
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seeds: Vec<u64>, started: f64) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            config,
            seeds,
            datasets: Vec::new(),
            outputs: Vec::new(),
            started_unix: started,
            finished_unix: 0.0,
        }
    }

    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = now();
        let path = dir.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
