//! Attack success metrics, grid heat maps, the screen-size sweep and
//! cross-detector evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{self, AttackConfig, AttackError, LossKind, SplitPlan};
use crate::detector::{sigmoid, softmax, Detection, Detector, DetectorError, RawGridOutput};
use crate::frame::{Frame, Image};
use crate::placement::{apply_patches, Patch, PlacementError};
use crate::scenegen::{SceneError, SceneSpec, Split};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("frame angle {angle} lies outside the plan range [{min}, {max}]")]
    AngleOutsidePlan { angle: f64, min: f64, max: f64 },
    #[error("the class set is empty")]
    EmptyClassSet,
    #[error("screen ratio {0} must lie in [0, 1]")]
    BadRatio(f64),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Attack(Box<AttackError>),
}

impl From<AttackError> for EvalError {
    fn from(e: AttackError) -> Self {
        EvalError::Attack(Box::new(e))
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Which patches are placed on the evaluated frames.
#[derive(Debug, Clone, Copy)]
pub enum PatchSource<'a> {
    None,
    Static(&'a [Patch]),
    /// Patch set chosen per frame by the frame's angle bin.
    Plan(&'a SplitPlan),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub angle: f64,
    pub detections: Vec<Detection>,
    pub success: bool,
    pub bin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub loss_kind: Option<LossKind>,
    /// Classes whose detection makes a frame a failure.
    pub classes: Vec<usize>,
    pub records: Vec<FrameRecord>,
    /// Percentage of successful frames.
    pub success_rate: f64,
    /// Per-bin percentages when a plan was evaluated; `None` for bins
    /// without frames.
    pub bin_rates: Option<Vec<Option<f64>>>,
}

impl EvalReport {
    pub fn successes(&self) -> usize {
        self.records.iter().filter(|r| r.success).count()
    }

    /// Per-frame table: `angle,bin,success,detections,classes`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("angle,bin,success,detections,classes\n");
        for r in &self.records {
            let classes: Vec<String> = r.detections.iter().map(|d| d.class_id.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.angle,
                r.bin.map(|b| b.to_string()).unwrap_or_default(),
                u8::from(r.success),
                r.detections.len(),
                classes.join(" ")
            ));
        }
        out
    }
}

/// A frame succeeds when no surviving detection has a class in `classes`.
pub fn frame_succeeds(detections: &[Detection], classes: &[usize]) -> bool {
    !detections.iter().any(|d| classes.contains(&d.class_id))
}

pub fn percentage(successes: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * successes as f64 / total as f64
    }
}

/// Composites the source's patches onto the frame without transforms.
pub fn patched_image(frame: &Frame, source: &PatchSource) -> Result<(Image, Option<usize>)> {
    match source {
        PatchSource::None => Ok((frame.image.clone(), None)),
        PatchSource::Static(patches) => Ok((apply_patches(frame, patches)?, None)),
        PatchSource::Plan(plan) => {
            let bin = plan.bin_of(frame.angle).ok_or(EvalError::AngleOutsidePlan {
                angle: frame.angle,
                min: plan.boundaries[0],
                max: *plan.boundaries.last().expect("plan has boundaries"),
            })?;
            Ok((apply_patches(frame, &plan.patch_sets[bin])?, Some(bin)))
        }
    }
}

/// Success rate against an arbitrary class set.
pub fn success_rate(frames: &[Frame], source: &PatchSource, detector: &Detector, classes: &[usize]) -> Result<EvalReport> {
    if classes.is_empty() {
        return Err(EvalError::EmptyClassSet);
    }
    let mut records = Vec::with_capacity(frames.len());
    for f in frames {
        let (image, bin) = patched_image(f, source)?;
        let detections = detector.detect(&image)?;
        let success = frame_succeeds(&detections, classes);
        records.push(FrameRecord {
            angle: f.angle,
            detections,
            success,
            bin,
        });
    }
    let bin_rates = match source {
        PatchSource::Plan(plan) => Some(
            (0..plan.subset_count())
                .map(|b| {
                    let in_bin: Vec<&FrameRecord> = records.iter().filter(|r| r.bin == Some(b)).collect();
                    (!in_bin.is_empty())
                        .then(|| percentage(in_bin.iter().filter(|r| r.success).count(), in_bin.len()))
                })
                .collect(),
        ),
        _ => None,
    };
    let successes = records.iter().filter(|r| r.success).count();
    Ok(EvalReport {
        label: "white_box".into(),
        loss_kind: None,
        classes: classes.to_vec(),
        success_rate: percentage(successes, records.len()),
        records,
        bin_rates,
    })
}

/// Percentage of frames in which `target` is not detected.
pub fn attack_success_rate(frames: &[Frame], source: &PatchSource, detector: &Detector, target: usize) -> Result<EvalReport> {
    success_rate(frames, source, detector, &[target])
}

/// Percentage of frames in which no class of `classes` is detected.
pub fn semantic_success_rate(frames: &[Frame], source: &PatchSource, detector: &Detector, classes: &[usize]) -> Result<EvalReport> {
    let mut report = success_rate(frames, source, detector, classes)?;
    report.label = "semantic".into();
    Ok(report)
}

/// Success rate of patches crafted elsewhere against another detector.
pub fn cross_model_eval(frames: &[Frame], source: &PatchSource, other: &Detector, target: usize) -> Result<EvalReport> {
    let mut report = attack_success_rate(frames, source, other, target)?;
    report.label = "transfer".into();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatMapKind {
    ObjectnessSum,
    ClassArgmax,
}

/// `size x size` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    pub kind: HeatMapKind,
    pub size: usize,
    pub values: Vec<f64>,
    /// Upper end of the value range (B for objectness sums, C - 1 for classes).
    pub max_value: f64,
}

impl HeatMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.size) {
            let cells: Vec<String> = row
                .iter()
                .map(|v| match self.kind {
                    HeatMapKind::ObjectnessSum => format!("{v:.6}"),
                    HeatMapKind::ClassArgmax => format!("{}", *v as usize),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Gray image with `[0, max_value]` mapped linearly to `[0, 1]`, each cell
    /// drawn as a `scale x scale` block.
    pub fn to_image(&self, scale: usize) -> Image {
        let n = self.size * scale.max(1);
        let mut img = Image::filled(n, n, [0.0; 3]);
        for row in 0..n {
            for col in 0..n {
                let v = self.get(row / scale.max(1), col / scale.max(1));
                let t = if self.max_value > 0.0 { (v / self.max_value).clamp(0.0, 1.0) } else { 0.0 };
                img.set_pixel(row, col, [t; 3]);
            }
        }
        img
    }
}

pub fn objectness_map(raw: &RawGridOutput) -> HeatMap {
    let l = raw.layout;
    let s = l.grid_size;
    let mut values = vec![0.0; s * s];
    for row in 0..s {
        for col in 0..s {
            values[row * s + col] = (0..l.boxes_per_cell)
                .map(|b| sigmoid(raw.slot(l.slot_index(row, col, b))[4]))
                .sum();
        }
    }
    HeatMap {
        kind: HeatMapKind::ObjectnessSum,
        size: s,
        values,
        max_value: l.boxes_per_cell as f64,
    }
}

/// Per cell: the argmax class of the slot whose best class probability is
/// highest (ties to the lower slot, then to the lower class id).
pub fn class_map_of(raw: &RawGridOutput) -> HeatMap {
    let l = raw.layout;
    let s = l.grid_size;
    let mut values = vec![0.0; s * s];
    for row in 0..s {
        for col in 0..s {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for b in 0..l.boxes_per_cell {
                let probs = softmax(&raw.slot(l.slot_index(row, col, b))[5..]);
                let (class, p) = probs
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
                if p > best.0 {
                    best = (p, class);
                }
            }
            values[row * s + col] = best.1 as f64;
        }
    }
    HeatMap {
        kind: HeatMapKind::ClassArgmax,
        size: s,
        values,
        max_value: l.num_classes.saturating_sub(1) as f64,
    }
}

pub fn objectness_heatmap(detector: &Detector, image: &Image) -> Result<HeatMap> {
    Ok(objectness_map(&detector.predict(image)?))
}

pub fn class_map(detector: &Detector, image: &Image) -> Result<HeatMap> {
    Ok(class_map_of(&detector.predict(image)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub success_rate: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ratio,success_rate\n");
    for r in rows {
        out.push_str(&format!("{},{:.4}\n", r.ratio, r.success_rate));
    }
    out
}

/// For each ratio, re-renders the datasets with a centered back screen of that
/// area fraction, crafts one patch with the obj_cls loss on the train split
/// and evaluates it on the test split. Ratio 0 means no screen.
pub fn screen_size_sweep(
    spec: &SceneSpec,
    ratios: &[f64],
    cfg: &AttackConfig,
    detector: &Detector,
    data_seed: u64,
) -> Result<Vec<SweepRow>> {
    if let Some(&r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(EvalError::BadRatio(r));
    }
    let cfg = AttackConfig {
        loss_kind: LossKind::ObjCls,
        ..cfg.clone()
    };
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut scene = spec.clone();
        scene.screens = if ratio > 0.0 {
            vec![SceneSpec::back_screen(ratio)]
        } else {
            Vec::new()
        };
        let test = scene.generate_dataset(Split::Test, data_seed)?;
        let report = if ratio > 0.0 {
            let train = scene.generate_dataset(Split::Train, data_seed)?;
            let crafted = attack::craft_patches(&train, 1, &cfg, detector)?;
            attack_success_rate(&test, &PatchSource::Static(&crafted.patches), detector, cfg.target_class)?
        } else {
            attack_success_rate(&test, &PatchSource::None, detector, cfg.target_class)?
        };
        rows.push(SweepRow {
            ratio,
            success_rate: report.success_rate,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorConfig, GridLayout};
    use proptest::prelude::*;

    fn det(class_id: usize) -> Detection {
        Detection {
            cx: 0.5,
            cy: 0.5,
            w: 0.2,
            h: 0.2,
            objectness: 0.9,
            class_probs: vec![],
            class_id,
            slot: 0,
        }
    }

    #[test]
    fn success_predicates() {
        assert!(!frame_succeeds(&[det(0)], &[0]));
        assert!(frame_succeeds(&[det(1)], &[0]));
        assert!(!frame_succeeds(&[det(1)], &[0, 1, 2]));
        assert!(frame_succeeds(&[], &[0, 1, 2]));
        assert!((percentage(2, 3) - 66.666_666_666_666_67).abs() < 1e-9);
        assert_eq!(percentage(3, 3), 100.0);
    }

    proptest! {
        #[test]
        fn semantic_predicate_matches_set_intersection(
            classes in proptest::collection::vec(0usize..8, 0..6),
            set in proptest::collection::btree_set(0usize..8, 1..4),
        ) {
            let dets: Vec<Detection> = classes.iter().map(|&c| det(c)).collect();
            let set: Vec<usize> = set.into_iter().collect();
            let oracle = classes.iter().all(|c| !set.contains(c));
            prop_assert_eq!(frame_succeeds(&dets, &set), oracle);
            // a superset of classes can only turn successes into failures
            if frame_succeeds(&dets, &set) {
                prop_assert!(frame_succeeds(&dets, &set[..1]));
            }
        }
    }

    #[test]
    fn zero_detector_maps() {
        let d = Detector::zeros(DetectorConfig::default()).unwrap();
        let img = Image::filled(144, 144, [0.3, 0.4, 0.5]);
        let m = objectness_heatmap(&d, &img).unwrap();
        assert_eq!(m.size, 9);
        assert!(m.values.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let c = class_map(&d, &img).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_map_picks_most_confident_slot() {
        let l = GridLayout {
            grid_size: 2,
            boxes_per_cell: 2,
            num_classes: 3,
        };
        let mut raw = RawGridOutput::zeros(l);
        raw.slot_mut(l.slot_index(0, 1, 0))[5 + 1] = 2.0;
        raw.slot_mut(l.slot_index(0, 1, 1))[5 + 2] = 3.0;
        raw.slot_mut(l.slot_index(1, 0, 1))[5 + 1] = 1.0;
        let m = class_map_of(&raw);
        assert_eq!(m.values, vec![0.0, 2.0, 1.0, 0.0]);
        assert!(m.values.iter().all(|&v| v < 3.0));
        assert_eq!(m.to_csv(), "0,2\n1,0\n");
    }

    #[test]
    fn heatmap_image_scales_to_gray() {
        let m = HeatMap {
            kind: HeatMapKind::ObjectnessSum,
            size: 2,
            values: vec![0.0, 5.0, 2.5, 1.0],
            max_value: 5.0,
        };
        let img = m.to_image(3);
        assert_eq!(img.height, 6);
        assert_eq!(img.pixel(0, 5), [1.0; 3]);
        assert_eq!(img.pixel(4, 1), [0.5; 3]);
    }

    #[test]
    fn sweep_rejects_large_ratio() {
        let d = Detector::zeros(DetectorConfig::default()).unwrap();
        let err = screen_size_sweep(&SceneSpec::default(), &[0.5, 1.5], &AttackConfig::default(), &d, 0);
        assert!(matches!(err, Err(EvalError::BadRatio(r)) if r == 1.5));
    }

    #[test]
    fn plan_requires_angles_in_range() {
        let plan = SplitPlan {
            boundaries: vec![0.0, 10.0],
            patch_sets: vec![vec![]],
            bin_rates: vec![],
            rate: 0.0,
            history: vec![],
        };
        let frame = Frame {
            image: Image::filled(144, 144, [0.5; 3]),
            angle: 12.0,
            screens: vec![],
            truths: vec![],
        };
        let d = Detector::zeros(DetectorConfig::default()).unwrap();
        assert!(matches!(
            success_rate(std::slice::from_ref(&frame), &PatchSource::Plan(&plan), &d, &[0]),
            Err(EvalError::AngleOutsidePlan { .. })
        ));
        let ok = Frame { angle: 10.0, ..frame };
        let r = success_rate(&[ok], &PatchSource::Plan(&plan), &d, &[0]).unwrap();
        assert_eq!(r.bin_rates, Some(vec![Some(r.success_rate)]));
    }
}
