//! Flat run configuration. Every key maps onto a field of one of the core
//! option types; detector-training keys carry a `train_` prefix and corpus
//! keys a `corpus_` prefix where they would otherwise collide.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use patchfield::attack::{AttackConfig, LossKind};
use patchfield::detector::{DetectorConfig, LayerSpec, TrainOptions};
use patchfield::placement::TransformRanges;
use patchfield::scenegen::{default_classes, CorpusSpec, SceneSpec};

pub const SEED_ENV: &str = "PF_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // paths
    pub data_dir: PathBuf,
    pub weights: PathBuf,
    pub patch_dir: PathBuf,
    pub out_dir: PathBuf,

    // scene
    pub image_size: usize,
    pub target_class: usize,
    pub angle_min: f64,
    pub angle_max: f64,
    pub frames_per_degree: f64,
    pub angle_jitter: f64,
    pub brightness_jitter: f64,
    pub background_jitter: f64,
    /// Area fraction of the centered back-face screen; 0 leaves it off.
    pub back_screen_ratio: f64,
    /// Area fraction of the centered left-face screen; 0 leaves it off.
    pub left_screen_ratio: f64,

    // detector
    pub grid_size: usize,
    pub boxes_per_cell: usize,
    /// `channels:stride` pairs separated by commas.
    pub layers: String,
    pub detection_threshold: f64,
    pub nms_iou_threshold: f64,

    // detector training
    pub corpus_frames: usize,
    pub corpus_holdout_frames: usize,
    pub corpus_angle_min: f64,
    pub corpus_angle_max: f64,
    pub random_screen_prob: f64,
    pub screen_drop_prob: f64,
    pub target_prob: f64,
    pub train_epochs: usize,
    pub train_learning_rate: f64,
    pub train_batch_size: usize,
    pub required_rate: f64,
    pub coord_weight: f64,
    pub noobj_weight: f64,
    pub background_class_weight: f64,
    pub label_smoothing: f64,

    // attack
    pub loss_kind: LossKind,
    pub semantic_classes: Vec<usize>,
    pub semantic_base: LossKind,
    pub tv_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub init_low: f64,
    pub init_high: f64,
    pub brightness: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub noise: f64,
    /// Cap on the dynamic search's subset count; 0 means no cap.
    pub max_subsets: usize,

    // sweep
    pub sweep_ratios: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        let det = DetectorConfig::default();
        let train = TrainOptions::default();
        let corpus = CorpusSpec::default();
        let attack = AttackConfig::default();
        Self {
            seed: 1,
            data_dir: "data".into(),
            weights: "detector.pfdet".into(),
            patch_dir: "patches".into(),
            out_dir: "out".into(),
            image_size: scene.image_size,
            target_class: scene.target_class,
            angle_min: scene.angle_min,
            angle_max: scene.angle_max,
            frames_per_degree: scene.frames_per_degree,
            angle_jitter: scene.angle_jitter,
            brightness_jitter: scene.brightness_jitter,
            background_jitter: scene.background_jitter,
            back_screen_ratio: scene.screens[0].area_ratio(),
            left_screen_ratio: scene.screens[1].area_ratio(),
            grid_size: det.grid_size,
            boxes_per_cell: det.boxes_per_cell,
            layers: format_layers(&det.layers),
            detection_threshold: det.detection_threshold,
            nms_iou_threshold: det.nms_iou_threshold,
            corpus_frames: corpus.frames,
            corpus_holdout_frames: 200,
            corpus_angle_min: corpus.angle_min,
            corpus_angle_max: corpus.angle_max,
            random_screen_prob: corpus.random_screen_prob,
            screen_drop_prob: corpus.screen_drop_prob,
            target_prob: corpus.target_prob,
            train_epochs: train.epochs,
            train_learning_rate: train.learning_rate,
            train_batch_size: train.batch_size,
            required_rate: train.required_rate,
            coord_weight: train.coord_weight,
            noobj_weight: train.noobj_weight,
            background_class_weight: train.background_class_weight,
            label_smoothing: train.label_smoothing,
            loss_kind: attack.loss_kind,
            semantic_classes: attack.semantic_classes,
            semantic_base: attack.semantic_base,
            tv_weight: attack.tv_weight,
            learning_rate: attack.learning_rate,
            epochs: attack.epochs,
            batch_size: attack.batch_size,
            patch_height: attack.patch_height,
            patch_width: attack.patch_width,
            init_low: attack.init_low,
            init_high: attack.init_high,
            brightness: attack.transforms.brightness,
            contrast_min: attack.transforms.contrast_min,
            contrast_max: attack.transforms.contrast_max,
            noise: attack.transforms.noise,
            max_subsets: 0,
            sweep_ratios: vec![0.05, 0.10, 0.15, 0.25],
        }
    }
}

pub fn format_layers(layers: &[LayerSpec]) -> String {
    layers
        .iter()
        .map(|l| format!("{}:{}", l.channels, l.stride))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
    text.split(',')
        .map(|spec| {
            let (c, s) = spec
                .trim()
                .split_once(':')
                .ok_or_else(|| anyhow!("layer {spec:?} should be channels:stride"))?;
            Ok(LayerSpec {
                channels: c.parse().with_context(|| format!("layer {spec:?}"))?,
                stride: s.parse().with_context(|| format!("layer {spec:?}"))?,
            })
        })
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies `key=value` overrides; values use TOML syntax, with bare
    /// words taken as strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml())?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("override {item:?} should be key=value"))?;
            let key = key.trim();
            if !table.contains_key(key) {
                bail!("unknown config key {key:?}");
            }
            let raw = raw.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        toml::Table::try_into(table).map_err(|e| anyhow!("bad override: {e}"))
    }

    /// Replaces the seed with `PF_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn scene(&self) -> SceneSpec {
        let mut screens = Vec::new();
        if self.back_screen_ratio > 0.0 {
            screens.push(SceneSpec::back_screen(self.back_screen_ratio));
        }
        if self.left_screen_ratio > 0.0 {
            screens.push(SceneSpec::left_screen(self.left_screen_ratio));
        }
        SceneSpec {
            image_size: self.image_size,
            classes: default_classes(),
            target_class: self.target_class,
            screens,
            angle_min: self.angle_min,
            angle_max: self.angle_max,
            frames_per_degree: self.frames_per_degree,
            angle_jitter: self.angle_jitter,
            brightness_jitter: self.brightness_jitter,
            background_jitter: self.background_jitter,
            ..SceneSpec::default()
        }
    }

    pub fn screen_count(&self) -> usize {
        self.scene().screens.len()
    }

    pub fn detector(&self) -> Result<DetectorConfig> {
        Ok(DetectorConfig {
            grid_size: self.grid_size,
            boxes_per_cell: self.boxes_per_cell,
            num_classes: default_classes().len(),
            input_size: self.image_size,
            layers: parse_layers(&self.layers)?,
            detection_threshold: self.detection_threshold,
            nms_iou_threshold: self.nms_iou_threshold,
        })
    }

    pub fn corpus(&self) -> CorpusSpec {
        CorpusSpec {
            frames: self.corpus_frames,
            angle_min: self.corpus_angle_min,
            angle_max: self.corpus_angle_max,
            random_screen_prob: self.random_screen_prob,
            screen_drop_prob: self.screen_drop_prob,
            target_prob: self.target_prob,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.train_epochs,
            learning_rate: self.train_learning_rate,
            batch_size: self.train_batch_size,
            seed: self.seed,
            required_rate: self.required_rate,
            coord_weight: self.coord_weight,
            noobj_weight: self.noobj_weight,
            background_class_weight: self.background_class_weight,
            label_smoothing: self.label_smoothing,
        }
    }

    pub fn attack(&self) -> AttackConfig {
        AttackConfig {
            loss_kind: self.loss_kind,
            target_class: self.target_class,
            semantic_classes: self.semantic_classes.clone(),
            semantic_base: self.semantic_base,
            tv_weight: self.tv_weight,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            patch_height: self.patch_height,
            patch_width: self.patch_width,
            init_low: self.init_low,
            init_high: self.init_high,
            transforms: TransformRanges {
                brightness: self.brightness,
                contrast_min: self.contrast_min,
                contrast_max: self.contrast_max,
                noise: self.noise,
            },
            max_subsets: (self.max_subsets > 0).then_some(self.max_subsets),
        }
    }

    /// Checks everything that can be rejected before doing any work.
    pub fn validate(&self) -> Result<()> {
        if !(self.frames_per_degree > 0.0) || !self.frames_per_degree.is_finite() {
            bail!("frames_per_degree must be positive, got {}", self.frames_per_degree);
        }
        for (name, r) in [("back_screen_ratio", self.back_screen_ratio), ("left_screen_ratio", self.left_screen_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                bail!("{name} must lie in [0, 1], got {r}");
            }
        }
        if !(self.corpus_angle_min < self.corpus_angle_max) {
            bail!("corpus angle range is empty");
        }
        if self.corpus_frames == 0 {
            bail!("corpus_frames must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            bail!("label_smoothing must lie in [0, 1)");
        }
        self.scene().validate().map_err(|e| anyhow!("{e}"))?;
        let det = self.detector()?;
        det.validate().map_err(|e| anyhow!("{e}"))?;
        self.attack().validate(det.num_classes).map_err(|e| anyhow!("{e}"))?;
        if let Some(r) = self.sweep_ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            bail!("sweep ratio {r} outside [0, 1]");
        }
        Ok(())
    }
}
