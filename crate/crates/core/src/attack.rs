//! Attack objectives, patch crafting and the dynamic split search.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{Detector, DetectorError, GridTensor};
use crate::eval::{self, EvalError, PatchSource};
use crate::frame::Frame;
use crate::optim::{Adam, AdamConfig};
use crate::placement::{
    apply_random_transform, composite_map, composite_with_map, Patch, PlacementError, SlotTensor,
    TransformParams, TransformRanges,
};
use crate::tensor::{GatherMap, Graph, Tensor, TensorError, UnaryKind};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("frame at angle {0} has no visible screen")]
    NoVisibleScreen(f64),
    #[error("no frames to attack")]
    NoFrames,
    #[error("angle bin {bin} [{lo}, {hi}) holds no {split} frames")]
    EmptyBin {
        bin: usize,
        lo: f64,
        hi: f64,
        split: &'static str,
    },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] Box<EvalError>),
}

impl From<EvalError> for AttackError {
    fn from(e: EvalError) -> Self {
        AttackError::Eval(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// Epsilon inside the total-variation square root (gradient only).
pub const TV_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cls,
    Obj,
    ObjCls,
    Semantic,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cls => "cls",
            LossKind::Obj => "obj",
            LossKind::ObjCls => "obj_cls",
            LossKind::Semantic => "semantic",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cls" => Ok(LossKind::Cls),
            "obj" => Ok(LossKind::Obj),
            "obj_cls" => Ok(LossKind::ObjCls),
            "semantic" => Ok(LossKind::Semantic),
            other => Err(format!(
                "unknown loss kind {other:?} (expected cls, obj, obj_cls or semantic)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub loss_kind: LossKind,
    pub target_class: usize,
    pub semantic_classes: Vec<usize>,
    /// Per-class loss summed by the semantic objective.
    pub semantic_base: LossKind,
    pub tv_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patch_height: usize,
    pub patch_width: usize,
    pub init_low: f64,
    pub init_high: f64,
    pub transforms: TransformRanges,
    /// Upper bound on the subset count tried by the split search.
    pub max_subsets: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::ObjCls,
            target_class: 0,
            semantic_classes: vec![0, 1, 2],
            semantic_base: LossKind::ObjCls,
            tv_weight: 1e-4,
            learning_rate: 0.03,
            epochs: 40,
            batch_size: 8,
            seed: 0,
            patch_height: 16,
            patch_width: 16,
            init_low: 0.3,
            init_high: 0.7,
            transforms: TransformRanges::default(),
            max_subsets: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |m: String| Err(AttackError::Config(m));
        if !(self.tv_weight >= 0.0) {
            return bad(format!("tv weight must be non-negative, got {}", self.tv_weight));
        }
        if self.target_class >= num_classes {
            return bad(format!(
                "target class {} out of range for {num_classes} classes",
                self.target_class
            ));
        }
        if self.loss_kind == LossKind::Semantic {
            if self.semantic_classes.is_empty() || !self.semantic_classes.contains(&self.target_class) {
                return bad("semantic class set must be non-empty and contain the target class".into());
            }
            if let Some(c) = self.semantic_classes.iter().find(|&&c| c >= num_classes) {
                return bad(format!("semantic class {c} out of range"));
            }
            if !matches!(self.semantic_base, LossKind::Cls | LossKind::ObjCls) {
                return bad(format!(
                    "semantic base loss must be cls or obj_cls, got {}",
                    self.semantic_base.name()
                ));
            }
        }
        if self.patch_height == 0 || self.patch_width == 0 {
            return bad("patch size must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.init_low) || !(self.init_low..=1.0).contains(&self.init_high) {
            return bad("initialization range must lie within [0, 1]".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        Ok(())
    }

    /// Classes whose detection counts against the attack.
    pub fn success_classes(&self) -> Vec<usize> {
        if self.loss_kind == LossKind::Semantic {
            self.semantic_classes.clone()
        } else {
            vec![self.target_class]
        }
    }
}

fn class_probability(g: &mut Graph, grid: &GridTensor, class: usize) -> Result<Tensor> {
    let c = grid.layout.num_classes;
    let logits = g.narrow(grid.tensor, 3, 5, c)?;
    let probs = g.softmax(logits, 3)?;
    Ok(g.narrow(probs, 3, class, 1)?)
}

fn objectness(g: &mut Graph, grid: &GridTensor) -> Result<Tensor> {
    let raw = g.narrow(grid.tensor, 3, 4, 1)?;
    Ok(g.sigmoid(raw))
}

/// Largest class-`y` probability over all slots.
pub fn cls_loss(g: &mut Graph, grid: &GridTensor, y: usize) -> Result<Tensor> {
    let p = class_probability(g, grid, y)?;
    Ok(g.max(p)?)
}

/// Largest objectness over all slots.
pub fn obj_loss(g: &mut Graph, grid: &GridTensor) -> Result<Tensor> {
    let o = objectness(g, grid)?;
    Ok(g.max(o)?)
}

/// Largest per-slot product of objectness and class-`y` probability.
pub fn obj_cls_loss(g: &mut Graph, grid: &GridTensor, y: usize) -> Result<Tensor> {
    let o = objectness(g, grid)?;
    let p = class_probability(g, grid, y)?;
    let prod = g.mul(o, p)?;
    Ok(g.max(prod)?)
}

/// Sum over classes of the base loss, each class with its own maximum.
pub fn semantic_loss(g: &mut Graph, grid: &GridTensor, classes: &[usize], base: LossKind) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for &c in classes {
        let term = match base {
            LossKind::Cls => cls_loss(g, grid, c)?,
            LossKind::ObjCls => obj_cls_loss(g, grid, c)?,
            other => {
                return Err(AttackError::Config(format!(
                    "semantic base loss must be cls or obj_cls, got {}",
                    other.name()
                )))
            }
        };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| AttackError::Config("empty semantic class set".into()))
}

/// The configured detector loss on one forward pass.
pub fn detector_loss(g: &mut Graph, grid: &GridTensor, cfg: &AttackConfig) -> Result<Tensor> {
    match cfg.loss_kind {
        LossKind::Cls => cls_loss(g, grid, cfg.target_class),
        LossKind::Obj => obj_loss(g, grid),
        LossKind::ObjCls => obj_cls_loss(g, grid, cfg.target_class),
        LossKind::Semantic => semantic_loss(g, grid, &cfg.semantic_classes, cfg.semantic_base),
    }
}

/// Sum over channels and interior positions of
/// `sqrt((p[i,j] - p[i+1,j])^2 + (p[i,j] - p[i,j+1])^2)` for a `[c, h, w]` patch.
pub fn total_variation(g: &mut Graph, patch: Tensor) -> Result<Tensor> {
    let shape = g.shape(patch).to_vec();
    let [_, h, w] = shape[..] else {
        return Err(TensorError::ShapeMismatch {
            op: "total_variation",
            lhs: shape,
            rhs: vec![3],
        }
        .into());
    };
    if h < 2 || w < 2 {
        return Ok(g.scalar(0.0));
    }
    let top = g.narrow(patch, 1, 0, h - 1)?;
    let corner = g.narrow(top, 2, 0, w - 1)?;
    let below = g.narrow(patch, 1, 1, h - 1)?;
    let below = g.narrow(below, 2, 0, w - 1)?;
    let right = g.narrow(top, 2, 1, w - 1)?;
    let dv = g.sub(corner, below)?;
    let dh = g.sub(corner, right)?;
    let dv2 = g.mul(dv, dv)?;
    let dh2 = g.mul(dh, dh)?;
    let sq = g.add(dv2, dh2)?;
    let root = g.unary(UnaryKind::SqrtEps(TV_EPSILON), sq);
    Ok(g.sum(root)?)
}

/// Scalar handles of the objective and its two terms.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub total: Tensor,
    pub tv: Tensor,
    pub loss: Tensor,
}

/// `tv_weight * sum of TV + mean over frames of the detector loss`, with the
/// patches optionally transformed (one draw per patch) before placement.
pub fn objective(
    g: &mut Graph,
    detector: &Detector,
    cfg: &AttackConfig,
    patches: &[SlotTensor],
    frames: &[&Frame],
    transforms: Option<&[TransformParams]>,
) -> Result<ObjectiveTerms> {
    if frames.is_empty() {
        return Err(AttackError::NoFrames);
    }
    let tv = tv_term(g, patches)?;
    let placed = transformed(g, patches, transforms)?;
    let mut loss_sum: Option<Tensor> = None;
    for f in frames {
        let maps = frame_maps(f, &placed_dims(g, &placed), detector)?;
        let l = frame_loss(g, detector, cfg, f, &placed, &maps)?;
        loss_sum = Some(match loss_sum {
            Some(s) => g.add(s, l)?,
            None => l,
        });
    }
    let loss = g.mul_scalar(loss_sum.expect("non-empty batch"), 1.0 / frames.len() as f64);
    let weighted = g.mul_scalar(tv, cfg.tv_weight);
    let total = g.add(weighted, loss)?;
    Ok(ObjectiveTerms { total, tv, loss })
}

fn tv_term(g: &mut Graph, patches: &[SlotTensor]) -> Result<Tensor> {
    let mut tv = g.scalar(0.0);
    for p in patches {
        let t = total_variation(g, p.tensor)?;
        tv = g.add(tv, t)?;
    }
    Ok(tv)
}

fn transformed(g: &mut Graph, patches: &[SlotTensor], transforms: Option<&[TransformParams]>) -> Result<Vec<SlotTensor>> {
    match transforms {
        None => Ok(patches.to_vec()),
        Some(ts) => {
            if ts.len() != patches.len() {
                return Err(AttackError::Config(format!(
                    "{} transforms for {} patches",
                    ts.len(),
                    patches.len()
                )));
            }
            patches
                .iter()
                .zip(ts)
                .map(|(p, t)| {
                    Ok(SlotTensor {
                        slot: p.slot,
                        tensor: apply_random_transform(g, p.tensor, t)?,
                    })
                })
                .collect()
        }
    }
}

fn placed_dims(g: &Graph, patches: &[SlotTensor]) -> Vec<(usize, usize, usize)> {
    patches
        .iter()
        .map(|p| {
            let s = g.shape(p.tensor);
            (p.slot, s[1], s[2])
        })
        .collect()
}

type FrameMaps = Vec<Option<Arc<GatherMap>>>;

/// Compositing maps for each patch (by position) on one frame; `None` for
/// patches whose screen is not visible.
fn frame_maps(frame: &Frame, dims: &[(usize, usize, usize)], detector: &Detector) -> Result<FrameMaps> {
    let n = detector.config().input_size;
    dims.iter()
        .map(|&(slot, h, w)| {
            frame
                .screen(slot)
                .map(|q| composite_map(&q.corners, h, w, n, n).map(Arc::new))
                .transpose()
                .map_err(AttackError::from)
        })
        .collect()
}

fn frame_loss(
    g: &mut Graph,
    detector: &Detector,
    cfg: &AttackConfig,
    frame: &Frame,
    patches: &[SlotTensor],
    maps: &FrameMaps,
) -> Result<Tensor> {
    let mut image = g.constant(frame.image.data.clone(), &frame.image.shape())?;
    for (p, map) in patches.iter().zip(maps) {
        if let Some(map) = map {
            image = composite_with_map(g, image, p.tensor, map.clone())?;
        }
    }
    let grid = detector.forward(g, image)?;
    detector_loss(g, &grid, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub tv: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftLog {
    pub epochs: Vec<EpochRecord>,
    /// Objective over the whole subset without transforms, before and after.
    pub initial_objective: f64,
    pub final_objective: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CraftResult {
    pub patches: Vec<Patch>,
    pub log: CraftLog,
}

/// Seeded initial patches for slots `0..n_screens`.
pub fn initial_patches(n_screens: usize, cfg: &AttackConfig) -> Vec<Patch> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..n_screens)
        .map(|slot| Patch::random(slot, cfg.patch_height, cfg.patch_width, cfg.init_low, cfg.init_high, &mut rng))
        .collect()
}

/// Optimizes one patch per screen slot against `frames` with Adam, random
/// appearance transforms (one draw per patch per batch) and clamping.
pub fn craft_patches(frames: &[Frame], n_screens: usize, cfg: &AttackConfig, detector: &Detector) -> Result<CraftResult> {
    cfg.validate(detector.config().num_classes)?;
    if frames.is_empty() {
        return Err(AttackError::NoFrames);
    }
    if n_screens == 0 {
        return Err(AttackError::Config("at least one screen is required".into()));
    }
    if let Some(f) = frames.iter().find(|f| f.screens.iter().all(|q| q.slot >= n_screens)) {
        return Err(AttackError::NoVisibleScreen(f.angle));
    }
    let mut patches = initial_patches(n_screens, cfg);
    let dims: Vec<(usize, usize, usize)> = patches.iter().map(|p| (p.slot, p.height, p.width)).collect();
    let maps: Vec<FrameMaps> = frames
        .iter()
        .map(|f| frame_maps(f, &dims, detector))
        .collect::<Result<_>>()?;

    let mut warnings = Vec::new();
    let clean = clean_rate(detector, frames, &cfg.success_classes())?;
    if clean < 0.95 {
        warnings.push(format!(
            "detector finds the target in only {:.1}% of clean frames; it may be untrained",
            100.0 * clean
        ));
    }

    let initial_objective = evaluate_objective(detector, cfg, &patches, frames, &maps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05EE_D0FA_77AC);
    let mut adam = Adam::new(
        AdamConfig::with_learning_rate(cfg.learning_rate),
        patches.iter().map(Patch::len),
    );
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let transforms: Vec<TransformParams> = patches
                .iter()
                .map(|p| TransformParams::sample(&cfg.transforms, p.len(), &mut rng))
                .collect();
            let (terms, grads) = batch_gradient(detector, cfg, &patches, frames, &maps, chunk, &transforms)?;
            sums.0 += terms.0;
            sums.1 += terms.1;
            sums.2 += terms.2;
            batches += 1;
            let mut buffers: Vec<Vec<f64>> = patches.iter_mut().map(|p| std::mem::take(&mut p.pixels)).collect();
            adam.step(&mut buffers, &grads);
            for (p, b) in patches.iter_mut().zip(buffers) {
                p.pixels = b;
                p.clamp_pixels();
            }
        }
        let n = batches as f64;
        epochs.push(EpochRecord {
            epoch,
            objective: sums.0 / n,
            tv: sums.1 / n,
            loss: sums.2 / n,
        });
    }
    let final_objective = evaluate_objective(detector, cfg, &patches, frames, &maps)?;
    Ok(CraftResult {
        patches,
        log: CraftLog {
            epochs,
            initial_objective,
            final_objective,
            warnings,
        },
    })
}

fn clean_rate(detector: &Detector, frames: &[Frame], classes: &[usize]) -> Result<f64> {
    let mut hits = 0;
    for f in frames {
        if detector.detect(&f.image)?.iter().any(|d| classes.contains(&d.class_id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / frames.len() as f64)
}

/// `(objective, tv, loss)` of one batch.
type BatchTerms = (f64, f64, f64);

/// Objective value and patch gradients for one batch, built one frame graph
/// at a time: `(objective, tv, loss)` and per-patch gradients.
fn batch_gradient(
    detector: &Detector,
    cfg: &AttackConfig,
    patches: &[Patch],
    frames: &[Frame],
    maps: &[FrameMaps],
    batch: &[usize],
    transforms: &[TransformParams],
) -> Result<(BatchTerms, Vec<Vec<f64>>)> {
    let mut grads: Vec<Vec<f64>> = patches.iter().map(|p| vec![0.0; p.len()]).collect();

    let mut g = Graph::new();
    let handles = patch_params(&mut g, patches)?;
    let tv = tv_term(&mut g, &handles)?;
    let weighted = g.mul_scalar(tv, cfg.tv_weight);
    g.backward(weighted)?;
    collect_grads(&g, &handles, &mut grads);
    let tv_value = g.item(tv);

    let scale = 1.0 / batch.len() as f64;
    let mut loss_value = 0.0;
    for &i in batch {
        let mut g = Graph::new();
        let handles = patch_params(&mut g, patches)?;
        let placed = transformed(&mut g, &handles, Some(transforms))?;
        let l = frame_loss(&mut g, detector, cfg, &frames[i], &placed, &maps[i])?;
        let scaled = g.mul_scalar(l, scale);
        g.backward(scaled)?;
        collect_grads(&g, &handles, &mut grads);
        loss_value += g.item(scaled);
    }
    let total = cfg.tv_weight * tv_value + loss_value;
    Ok(((total, tv_value, loss_value), grads))
}

fn patch_params(g: &mut Graph, patches: &[Patch]) -> Result<Vec<SlotTensor>> {
    patches
        .iter()
        .map(|p| {
            Ok(SlotTensor {
                slot: p.slot,
                tensor: g.param(p.pixels.clone(), &p.shape())?,
            })
        })
        .collect()
}

fn collect_grads(g: &Graph, handles: &[SlotTensor], grads: &mut [Vec<f64>]) {
    for (acc, h) in grads.iter_mut().zip(handles) {
        if let Some(grad) = g.grad(h.tensor) {
            for (a, v) in acc.iter_mut().zip(grad) {
                *a += v;
            }
        }
    }
}

fn evaluate_objective(
    detector: &Detector,
    cfg: &AttackConfig,
    patches: &[Patch],
    frames: &[Frame],
    maps: &[FrameMaps],
) -> Result<f64> {
    let mut g = Graph::new();
    let handles = patch_params(&mut g, patches)?;
    let tv = tv_term(&mut g, &handles)?;
    let mut loss = 0.0;
    for (f, m) in frames.iter().zip(maps) {
        let mut g = Graph::new();
        let handles = patch_params(&mut g, patches)?;
        let l = frame_loss(&mut g, detector, cfg, f, &handles, m)?;
        loss += g.item(l);
    }
    Ok(cfg.tv_weight * g.item(tv) + loss / frames.len() as f64)
}

/// `(k, rate)` pairs in evaluation order.
pub type SearchHistory = Vec<(usize, f64)>;

/// Patch sets switched by contiguous equal-width angle bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// `k + 1` strictly increasing angles.
    pub boundaries: Vec<f64>,
    pub patch_sets: Vec<Vec<Patch>>,
    /// Per-bin success rate in percent; `None` for bins without test frames.
    pub bin_rates: Vec<Option<f64>>,
    /// Overall success rate in percent.
    pub rate: f64,
    /// `(k, rate)` for every subset count evaluated by the search.
    pub history: Vec<(usize, f64)>,
}

impl SplitPlan {
    pub fn subset_count(&self) -> usize {
        self.patch_sets.len()
    }

    /// Bin holding `angle`; bins are half-open except the last, which
    /// includes the upper boundary.
    pub fn bin_of(&self, angle: f64) -> Option<usize> {
        bin_index(&self.boundaries, angle)
    }
}

pub fn equal_width_boundaries(min: f64, max: f64, k: usize) -> Vec<f64> {
    let width = (max - min) / k as f64;
    (0..=k)
        .map(|i| if i == k { max } else { min + width * i as f64 })
        .collect()
}

pub fn bin_index(boundaries: &[f64], angle: f64) -> Option<usize> {
    let k = boundaries.len().checked_sub(1)?;
    if k == 0 || angle < boundaries[0] || angle > boundaries[k] {
        return None;
    }
    let i = boundaries[1..].partition_point(|&b| b <= angle);
    Some(i.min(k - 1))
}

/// Splits angle-sorted frames into the bins given by `boundaries`.
pub fn split_by_angle<'a>(frames: &'a [Frame], boundaries: &[f64], split: &'static str) -> Result<Vec<Vec<&'a Frame>>> {
    let k = boundaries.len() - 1;
    let mut bins: Vec<Vec<&Frame>> = vec![Vec::new(); k];
    for f in frames {
        if let Some(i) = bin_index(boundaries, f.angle) {
            bins[i].push(f);
        }
    }
    if let Some(bin) = bins.iter().position(Vec::is_empty) {
        return Err(AttackError::EmptyBin {
            bin,
            lo: boundaries[bin],
            hi: boundaries[bin + 1],
            split,
        });
    }
    Ok(bins)
}

/// The split-search loop: evaluates `k = 1, 2, ...` and stops as soon as a
/// new rate fails to strictly exceed the former one, returning the former
/// result. `limit` caps `k`.
pub fn split_search<T, F>(limit: Option<usize>, mut evaluate: F) -> Result<(usize, T, SearchHistory)>
where
    F: FnMut(usize) -> Result<(f64, T)>,
{
    let (mut former_rate, mut former) = evaluate(1)?;
    let mut history = vec![(1, former_rate)];
    let mut k = 1;
    while limit.is_none_or(|l| k < l) {
        let (rate, candidate) = evaluate(k + 1)?;
        history.push((k + 1, rate));
        if rate <= former_rate {
            break;
        }
        k += 1;
        former_rate = rate;
        former = candidate;
    }
    Ok((k, former, history))
}

/// Crafts one patch set per equal-width angle bin for increasing bin
/// counts, evaluating the switched patches on the test set, until the
/// success rate stops improving.
pub fn dynamic_split_search(
    train: &[Frame],
    test: &[Frame],
    range: (f64, f64),
    n_screens: usize,
    cfg: &AttackConfig,
    detector: &Detector,
) -> Result<SplitPlan> {
    cfg.validate(detector.config().num_classes)?;
    if !(range.0 < range.1) {
        return Err(AttackError::Config(format!("empty angle range {range:?}")));
    }
    let classes = cfg.success_classes();
    let (_, mut plan, history) = split_search(cfg.max_subsets, |k| {
        let boundaries = equal_width_boundaries(range.0, range.1, k);
        let train_bins = split_by_angle(train, &boundaries, "train")?;
        split_by_angle(test, &boundaries, "test")?;
        let mut patch_sets = Vec::with_capacity(k);
        for bin in train_bins {
            let subset: Vec<Frame> = bin.into_iter().cloned().collect();
            patch_sets.push(craft_patches(&subset, n_screens, cfg, detector)?.patches);
        }
        let mut plan = SplitPlan {
            boundaries,
            patch_sets,
            bin_rates: Vec::new(),
            rate: 0.0,
            history: Vec::new(),
        };
        let report = eval::success_rate(test, &PatchSource::Plan(&plan), detector, &classes)?;
        plan.rate = report.success_rate;
        plan.bin_rates = report.bin_rates.clone().unwrap_or_default();
        Ok((plan.rate, plan))
    })?;
    plan.history = history;
    Ok(plan)
}
