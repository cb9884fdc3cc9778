//! Per-command run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use patchfield::attack::EpochRecord;
use patchfield::io;

use crate::config::RunConfig;

pub const TOOL: &str = "patchfield";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    /// SHA-256 digests of every file or directory read.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// Per-epoch objective values of a crafting run.
    pub objectives: Vec<EpochRecord>,
    pub results: serde_json::Value,
    pub wall_time_seconds: f64,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            objectives: Vec::new(),
            results: serde_json::json!({}),
            wall_time_seconds: 0.0,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = digest_path(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Path the manifest of `command` is written to.
    pub fn path_for(cfg: &RunConfig, command: &str) -> std::path::PathBuf {
        cfg.out_dir.join(format!("{command}.manifest.json"))
    }

    pub fn finish(&mut self, cfg: &RunConfig, started: Instant) -> Result<()> {
        self.wall_time_seconds = started.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(self)?;
        io::write_file(&Self::path_for(cfg, &self.command), format!("{json}\n").as_bytes())?;
        Ok(())
    }
}

/// SHA-256 of a file, or of a directory's sorted `(relative path, file
/// digest)` listing.
pub fn digest_path(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).with_context(|| format!("reading {}", path.display()))?;
    if meta.is_file() {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(hex::encode(Sha256::digest(&bytes)));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let digest = digest_path(&path.join(&rel))?;
        hasher.update(rel.as_bytes());
        hasher.update([0]);
        hasher.update(digest.as_bytes());
        hasher.update(b"\n");
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("entry under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

pub fn objective_csv(epochs: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,objective,tv,loss\n");
    for e in epochs {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.objective, e.tv, e.loss));
    }
    out
}
