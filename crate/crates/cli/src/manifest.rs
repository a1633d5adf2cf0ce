//! Run manifests and input hashing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};
use vnnet_core::training::write_atomic;
use vnnet_ingest::dataset::{CALIBRATION_FILE, CSV_FILE, META_FILE, NPY_FILE, TILE_DIR, VISION_DIR};
use walkdir::WalkDir;

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Command line that repeats the run from the saved config, which holds
    /// everything except the run directory.
    pub rerun: Vec<String>,
    pub seed: u64,
    pub config: RunConfig,
    /// SHA-256 over every input file, in path order.
    pub input_hash: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started: String,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

/// Collects stage timings and outputs while a subcommand runs.
pub struct Recorder {
    command: String,
    argv: Vec<String>,
    started: chrono::DateTime<chrono::Utc>,
    clock: Instant,
    stage: Instant,
    timings: BTreeMap<String, f64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            argv,
            started: chrono::Utc::now(),
            clock: Instant::now(),
            stage: Instant::now(),
            timings: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Closes the current stage under `name`.
    pub fn lap(&mut self, name: &str) {
        self.timings.insert(name.to_string(), self.stage.elapsed().as_secs_f64());
        self.stage = Instant::now();
    }

    pub fn input(&mut self, files: impl IntoIterator<Item = PathBuf>) {
        self.inputs.extend(files);
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// Saves the resolved config next to the outputs and writes the manifest
    /// last, so a complete manifest marks a complete run.
    pub fn finish(mut self, out: &Path, config: &RunConfig) -> Result<RunManifest, CliError> {
        let config_path = out.join(CONFIG_FILE);
        let saved = RunConfig {
            out: None,
            ..config.clone()
        };
        write_atomic(&config_path, saved.to_toml()?.as_bytes())?;
        self.timings.insert("total".into(), self.clock.elapsed().as_secs_f64());
        self.inputs.sort();
        self.inputs.dedup();
        let manifest = RunManifest {
            rerun: vec![
                "vnnet".into(),
                self.command.clone(),
                "--config".into(),
                config_path.display().to_string(),
                "--out".into(),
                out.display().to_string(),
            ],
            command: self.command,
            argv: self.argv,
            seed: config.seed,
            config: config.clone(),
            input_hash: hash_files(&self.inputs)?,
            inputs: self.inputs,
            outputs: self.outputs,
            started: self.started.to_rfc3339(),
            timings: self.timings,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Input(e.to_string()))?;
        text.push('\n');
        write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(manifest)
    }
}

/// Dataset files the loaders read, in sorted order; run artifacts that may
/// share the directory are left out.
pub fn dataset_files(root: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = [META_FILE, CSV_FILE, NPY_FILE, CALIBRATION_FILE]
        .iter()
        .map(|f| root.join(f))
        .filter(|p| p.is_file())
        .collect();
    for dir in [TILE_DIR, VISION_DIR] {
        let walk = WalkDir::new(root.join(dir)).sort_by_file_name();
        files.extend(walk.into_iter().filter_map(|e| e.ok()).filter(|e| e.file_type().is_file()).map(|e| e.into_path()));
    }
    files
}

pub fn hash_files(files: &[PathBuf]) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for f in files {
        let bytes = fs::read(f).map_err(|e| CliError::Input(format!("cannot read {}: {e}", f.display())))?;
        h.update(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
