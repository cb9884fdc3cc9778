//! The `patchfield` command-line driver.

// Negated comparisons like `!(x > 0.0)` are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod manifest;
pub mod store;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};

use patchfield::attack::{self, LossKind};
use patchfield::detector::Detector;
use patchfield::eval::{self, EvalReport};
use patchfield::io;
use patchfield::scenegen::{generate_corpus, Split};

pub use config::RunConfig;
use manifest::Manifest;
use store::LoadedPatches;

/// Marks errors caused by the invocation rather than the run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

#[derive(Debug, Parser)]
#[command(name = "patchfield", version, about = "Dynamic adversarial patch laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the train and test frame sets
    GenDataset(Common),
    /// Train the grid detector on a rendered corpus
    TrainDetector(Common),
    /// Craft one patch per screen over the whole angle range
    Craft(Common),
    /// Search for the best angle split and craft a patch set per bin
    Dynamic(Common),
    /// Measure attack success on the test split
    Eval(EvalArgs),
    /// Write objectness and class maps for one test frame
    Heatmap(HeatmapArgs),
    /// Success rate against back-screen size
    Sweep(Common),
    /// Evaluate patches against a second detector
    Transfer(TransferArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frames_per_degree: Option<f64>,
    #[arg(long)]
    pub loss_kind: Option<LossKind>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub patch_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory with crafted patches or a dynamic plan; omit for a clean baseline
    #[arg(long)]
    pub patches: Option<PathBuf>,
    /// Count any of the configured semantic classes as a detection
    #[arg(long)]
    pub semantic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub patches: Option<PathBuf>,
    /// Test frame index in angle order; defaults to the middle frame
    #[arg(long)]
    pub frame: Option<usize>,
    /// Output pixels per grid cell
    #[arg(long, default_value_t = 16)]
    pub scale: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub patches: PathBuf,
    /// Weights of the detector the patches are transferred to
    #[arg(long)]
    pub other_weights: PathBuf,
}

impl Common {
    /// Config file, then `PF_SEED`, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| usage(format!("{}: {e}", path.display())))?;
                RunConfig::from_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.apply_env().map_err(usage)?;
        cfg = cfg.with_overrides(&self.set).map_err(usage)?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.frames_per_degree {
            cfg.frames_per_degree = v;
        }
        if let Some(v) = self.loss_kind {
            cfg.loss_kind = v;
        }
        for (flag, slot) in [
            (&self.data_dir, &mut cfg.data_dir),
            (&self.weights, &mut cfg.weights),
            (&self.patch_dir, &mut cfg.patch_dir),
            (&self.out_dir, &mut cfg.out_dir),
        ] {
            if let Some(v) = flag {
                *slot = v.clone();
            }
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::GenDataset(c) => gen_dataset(&c.resolve()?),
        Command::TrainDetector(c) => train_detector(&c.resolve()?),
        Command::Craft(c) => craft(&c.resolve()?),
        Command::Dynamic(c) => dynamic(&c.resolve()?),
        Command::Eval(a) => evaluate(&a.common.resolve()?, a.patches.as_deref(), a.semantic),
        Command::Heatmap(a) => heatmap(&a.common.resolve()?, a.patches.as_deref(), a.frame, a.scale),
        Command::Sweep(c) => sweep(&c.resolve()?),
        Command::Transfer(a) => transfer(&a.common.resolve()?, &a.patches, &a.other_weights),
    }
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<patchfield::frame::Frame>> {
    let index = cfg.data_dir.join(split.name()).join(io::INDEX_FILE);
    if !index.exists() {
        return Err(anyhow!("missing dataset index {}", index.display()));
    }
    Ok(io::read_split(&cfg.data_dir, split)?)
}

fn load_weights(path: &Path) -> Result<Detector> {
    if !path.exists() {
        return Err(anyhow!("missing detector weights {}", path.display()));
    }
    Ok(io::load_detector(path)?)
}

pub fn gen_dataset(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let scene = cfg.scene();
    let mut m = Manifest::new("gen-dataset", cfg);
    let mut total = 0;
    for split in [Split::Train, Split::Test] {
        let frames = scene.generate_dataset(split, cfg.seed)?;
        total += frames.len();
        let root = io::write_split(&cfg.data_dir, split, &frames)?;
        m.output(&root);
        m.results[split.name()] = frames.len().into();
    }
    m.finish(cfg, started)?;
    println!("wrote {total} frames to {}", cfg.data_dir.display());
    Ok(())
}

pub fn train_detector(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let scene = cfg.scene();
    let corpus = cfg.corpus();
    let train = generate_corpus(&scene, &corpus, Split::Train, cfg.seed)?;
    let holdout_spec = patchfield::scenegen::CorpusSpec {
        frames: cfg.corpus_holdout_frames,
        ..corpus
    };
    let holdout = generate_corpus(&scene, &holdout_spec, Split::Test, cfg.seed)?;
    let mut det = Detector::random(cfg.detector()?, cfg.seed)?;
    let report = det.train(&train, &holdout, &cfg.train_options())?;
    io::save_detector(&cfg.weights, &det)?;

    let mut log = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        log.push_str(&format!("{},{l}\n", i + 1));
    }
    let log_path = cfg.out_dir.join("train_log.csv");
    io::write_file(&log_path, log.as_bytes())?;

    let mut m = Manifest::new("train-detector", cfg);
    m.output(&cfg.weights);
    m.output(&log_path);
    m.results["holdout_rate"] = report.holdout_rate.into();
    m.results["epoch_losses"] = serde_json::to_value(&report.epoch_losses)?;
    m.finish(cfg, started)?;
    println!(
        "trained detector: holdout detection rate {:.1}%, weights {}",
        100.0 * report.holdout_rate,
        cfg.weights.display()
    );
    Ok(())
}

pub fn craft(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let det = load_weights(&cfg.weights)?;
    let train = load_split(cfg, Split::Train)?;
    let attack_cfg = cfg.attack();
    let result = attack::craft_patches(&train, cfg.screen_count(), &attack_cfg, &det)?;
    for w in &result.log.warnings {
        eprintln!("warning: {w}");
    }

    let mut m = Manifest::new("craft", cfg);
    m.input(&cfg.weights)?;
    m.input(&cfg.data_dir.join(Split::Train.name()))?;
    let range = [cfg.angle_min, cfg.angle_max];
    for path in store::save_patch_set(&cfg.patch_dir, &result.patches, range, cfg)? {
        m.output(&path);
    }
    let log_path = cfg.out_dir.join("craft_objective.csv");
    io::write_file(&log_path, manifest::objective_csv(&result.log.epochs).as_bytes())?;
    m.output(&log_path);
    m.objectives = result.log.epochs.clone();
    m.results["initial_objective"] = result.log.initial_objective.into();
    m.results["final_objective"] = result.log.final_objective.into();
    m.results["warnings"] = serde_json::to_value(&result.log.warnings)?;
    m.finish(cfg, started)?;
    println!(
        "crafted {} patch(es): objective {:.4} -> {:.4}",
        result.patches.len(),
        result.log.initial_objective,
        result.log.final_objective
    );
    Ok(())
}

pub fn dynamic(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let det = load_weights(&cfg.weights)?;
    let train = load_split(cfg, Split::Train)?;
    let test = load_split(cfg, Split::Test)?;
    let plan = attack::dynamic_split_search(
        &train,
        &test,
        (cfg.angle_min, cfg.angle_max),
        cfg.screen_count(),
        &cfg.attack(),
        &det,
    )?;

    let mut m = Manifest::new("dynamic", cfg);
    m.input(&cfg.weights)?;
    m.input(&cfg.data_dir.join(Split::Train.name()))?;
    m.input(&cfg.data_dir.join(Split::Test.name()))?;
    for path in store::save_plan(&cfg.patch_dir, &plan, cfg)? {
        m.output(&path);
    }
    m.results["subset_count"] = plan.subset_count().into();
    m.results["rate"] = plan.rate.into();
    m.results["boundaries"] = serde_json::to_value(&plan.boundaries)?;
    m.results["bin_rates"] = serde_json::to_value(&plan.bin_rates)?;
    m.results["rates_by_k"] = serde_json::to_value(
        plan.history
            .iter()
            .map(|&(k, rate)| serde_json::json!({ "k": k, "rate": rate }))
            .collect::<Vec<_>>(),
    )?;
    m.finish(cfg, started)?;
    println!(
        "chose {} subset(s), success rate {:.1}% (tried {:?})",
        plan.subset_count(),
        plan.rate,
        plan.history
    );
    Ok(())
}

fn write_report(cfg: &RunConfig, m: &mut Manifest, stem: &str, report: &EvalReport) -> Result<()> {
    let csv = cfg.out_dir.join(format!("{stem}.csv"));
    let json = cfg.out_dir.join(format!("{stem}.json"));
    io::write_file(&csv, report.to_csv().as_bytes())?;
    io::write_file(&json, format!("{}\n", serde_json::to_string_pretty(report)?).as_bytes())?;
    m.output(&csv);
    m.output(&json);
    m.results["success_rate"] = report.success_rate.into();
    m.results["bin_rates"] = serde_json::to_value(&report.bin_rates)?;
    Ok(())
}

fn load_patches(cfg: &RunConfig, dir: Option<&Path>, m: &mut Manifest) -> Result<LoadedPatches> {
    match dir {
        None => Ok(LoadedPatches::None),
        Some(dir) => {
            m.input(dir)?;
            store::load(dir, cfg.screen_count())
        }
    }
}

pub fn evaluate(cfg: &RunConfig, patches: Option<&Path>, semantic: bool) -> Result<()> {
    let started = Instant::now();
    let mut m = Manifest::new("eval", cfg);
    let det = load_weights(&cfg.weights)?;
    let test = load_split(cfg, Split::Test)?;
    m.input(&cfg.weights)?;
    m.input(&cfg.data_dir.join(Split::Test.name()))?;
    let loaded = load_patches(cfg, patches, &mut m)?;
    let classes = if semantic {
        cfg.semantic_classes.clone()
    } else {
        vec![cfg.target_class]
    };
    let mut report = eval::success_rate(&test, &loaded.source(), &det, &classes)?;
    report.label = if semantic { "semantic" } else { "plain" }.into();
    report.loss_kind = loaded.loss_kind();
    write_report(cfg, &mut m, "eval_report", &report)?;
    m.finish(cfg, started)?;
    println!(
        "{} success rate {:.1}% over {} frames ({})",
        report.label,
        report.success_rate,
        test.len(),
        if patches.is_some() { "patched" } else { "clean baseline" }
    );
    Ok(())
}

pub fn heatmap(cfg: &RunConfig, patches: Option<&Path>, frame: Option<usize>, scale: usize) -> Result<()> {
    let started = Instant::now();
    let mut m = Manifest::new("heatmap", cfg);
    let det = load_weights(&cfg.weights)?;
    let test = load_split(cfg, Split::Test)?;
    m.input(&cfg.weights)?;
    m.input(&cfg.data_dir.join(Split::Test.name()))?;
    let loaded = load_patches(cfg, patches, &mut m)?;
    let index = frame.unwrap_or(test.len() / 2);
    let f = test
        .get(index)
        .ok_or_else(|| usage(format!("frame {index} out of range for {} test frames", test.len())))?;
    let mut images = vec![("clean", f.image.clone())];
    if !matches!(loaded, LoadedPatches::None) {
        images.push(("patched", eval::patched_image(f, &loaded.source())?.0));
    }
    for (name, image) in &images {
        let raw = det.predict(image)?;
        for (kind, map) in [("objectness", eval::objectness_map(&raw)), ("class", eval::class_map_of(&raw))] {
            let stem = cfg.out_dir.join(format!("heatmap_{name}_{kind}"));
            let csv = stem.with_extension("csv");
            let ppm = stem.with_extension("ppm");
            io::write_file(&csv, map.to_csv().as_bytes())?;
            io::write_ppm(&ppm, &map.to_image(scale.max(1)))?;
            m.output(&csv);
            m.output(&ppm);
            m.results[format!("{name}_{kind}_total")] = map.total().into();
        }
        let frame_path = cfg.out_dir.join(format!("heatmap_{name}_frame.ppm"));
        io::write_ppm(&frame_path, image)?;
        m.output(&frame_path);
    }
    m.results["frame"] = index.into();
    m.results["angle"] = f.angle.into();
    m.finish(cfg, started)?;
    println!("wrote heat maps for test frame {index} (angle {:.2})", f.angle);
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let det = load_weights(&cfg.weights)?;
    let rows = eval::screen_size_sweep(&cfg.scene(), &cfg.sweep_ratios, &cfg.attack(), &det, cfg.seed)?;
    let path = cfg.out_dir.join("sweep.csv");
    io::write_file(&path, eval::sweep_csv(&rows).as_bytes())?;
    let mut m = Manifest::new("sweep", cfg);
    m.input(&cfg.weights)?;
    m.output(&path);
    m.results["rows"] = serde_json::to_value(&rows)?;
    m.finish(cfg, started)?;
    for r in &rows {
        println!("ratio {:>5.2}: {:.1}%", r.ratio, r.success_rate);
    }
    Ok(())
}

pub fn transfer(cfg: &RunConfig, patches: &Path, other: &Path) -> Result<()> {
    let started = Instant::now();
    let mut m = Manifest::new("transfer", cfg);
    let det = load_weights(other)?;
    let test = load_split(cfg, Split::Test)?;
    m.input(other)?;
    m.input(&cfg.data_dir.join(Split::Test.name()))?;
    let loaded = load_patches(cfg, Some(patches), &mut m)?;
    let mut report = eval::cross_model_eval(&test, &loaded.source(), &det, cfg.target_class)?;
    report.loss_kind = loaded.loss_kind();
    write_report(cfg, &mut m, "transfer_report", &report)?;
    m.finish(cfg, started)?;
    println!("transfer success rate {:.1}% against {}", report.success_rate, other.display());
    Ok(())
}

