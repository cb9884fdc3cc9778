//! Patch directories: a static set `patch_<slot>.*`, or a dynamic plan
//! `plan.json` with per-bin sets `bin<i>_patch_<slot>.*`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use patchfield::attack::{LossKind, SplitPlan};
use patchfield::eval::PatchSource;
use patchfield::io::{self, PatchMeta};
use patchfield::placement::Patch;

use crate::config::RunConfig;

pub const PLAN_FILE: &str = "plan.json";

/// `plan.json`: a [`SplitPlan`] with patch file stems in place of pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub loss_kind: LossKind,
    pub boundaries: Vec<f64>,
    pub bin_rates: Vec<Option<f64>>,
    pub rate: f64,
    pub history: Vec<(usize, f64)>,
    pub patch_sets: Vec<Vec<String>>,
}

fn stem(prefix: &str, slot: usize) -> String {
    format!("{prefix}patch_{slot}")
}

fn save_set(dir: &Path, prefix: &str, patches: &[Patch], range: [f64; 2], cfg: &RunConfig) -> Result<(Vec<String>, Vec<PathBuf>)> {
    let mut stems = Vec::new();
    let mut paths = Vec::new();
    for p in patches {
        let s = stem(prefix, p.slot);
        let meta = PatchMeta {
            slot: p.slot,
            angle_subset: range,
            loss_kind: cfg.loss_kind,
            seed: cfg.seed,
            iterations: cfg.epochs,
        };
        paths.extend(io::save_patch(dir, &s, p, &meta)?);
        stems.push(s);
    }
    Ok((stems, paths))
}

/// Writes a static patch set, dropping any plan left in `dir`.
pub fn save_patch_set(dir: &Path, patches: &[Patch], range: [f64; 2], cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let plan = dir.join(PLAN_FILE);
    if plan.exists() {
        fs::remove_file(&plan).with_context(|| format!("removing {}", plan.display()))?;
    }
    Ok(save_set(dir, "", patches, range, cfg)?.1)
}

pub fn save_plan(dir: &Path, plan: &SplitPlan, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    let mut patch_sets = Vec::new();
    for (i, set) in plan.patch_sets.iter().enumerate() {
        let range = [plan.boundaries[i], plan.boundaries[i + 1]];
        let (stems, written) = save_set(dir, &format!("bin{i}_"), set, range, cfg)?;
        patch_sets.push(stems);
        paths.extend(written);
    }
    let file = PlanFile {
        loss_kind: cfg.loss_kind,
        boundaries: plan.boundaries.clone(),
        bin_rates: plan.bin_rates.clone(),
        rate: plan.rate,
        history: plan.history.clone(),
        patch_sets,
    };
    let path = dir.join(PLAN_FILE);
    io::write_file(&path, format!("{}\n", serde_json::to_string_pretty(&file)?).as_bytes())?;
    paths.push(path);
    Ok(paths)
}

#[derive(Debug)]
pub enum LoadedPatches {
    None,
    Static { patches: Vec<Patch>, loss_kind: Option<LossKind> },
    Plan { plan: SplitPlan, loss_kind: LossKind },
}

impl LoadedPatches {
    pub fn source(&self) -> PatchSource<'_> {
        match self {
            Self::None => PatchSource::None,
            Self::Static { patches, .. } => PatchSource::Static(patches),
            Self::Plan { plan, .. } => PatchSource::Plan(plan),
        }
    }

    pub fn loss_kind(&self) -> Option<LossKind> {
        match self {
            Self::None => None,
            Self::Static { loss_kind, .. } => *loss_kind,
            Self::Plan { loss_kind, .. } => Some(*loss_kind),
        }
    }
}

fn load_one(dir: &Path, stem: &str) -> Result<Patch> {
    let [exact, ppm, _] = io::patch_paths(dir, stem);
    if !exact.exists() && !ppm.exists() {
        return Err(anyhow!("missing patch {}", exact.display()));
    }
    Ok(io::load_patch(dir, stem)?)
}

/// Loads the plan in `dir` if there is one, else `n_screens` static patches.
pub fn load(dir: &Path, n_screens: usize) -> Result<LoadedPatches> {
    if !dir.is_dir() {
        return Err(anyhow!("missing patch directory {}", dir.display()));
    }
    let plan_path = dir.join(PLAN_FILE);
    if plan_path.exists() {
        let text = fs::read_to_string(&plan_path).with_context(|| format!("reading {}", plan_path.display()))?;
        let file: PlanFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", plan_path.display()))?;
        let patch_sets = file
            .patch_sets
            .iter()
            .map(|set| set.iter().map(|s| load_one(dir, s)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let plan = SplitPlan {
            boundaries: file.boundaries,
            patch_sets,
            bin_rates: file.bin_rates,
            rate: file.rate,
            history: file.history,
        };
        return Ok(LoadedPatches::Plan {
            plan,
            loss_kind: file.loss_kind,
        });
    }
    let patches = (0..n_screens)
        .map(|slot| load_one(dir, &stem("", slot)))
        .collect::<Result<Vec<_>>>()?;
    let meta_path = io::patch_paths(dir, &stem("", 0))[2].clone();
    let loss_kind = fs::read_to_string(meta_path)
        .ok()
        .and_then(|t| serde_json::from_str::<PatchMeta>(&t).ok())
        .map(|m| m.loss_kind);
    Ok(LoadedPatches::Static { patches, loss_kind })
}
