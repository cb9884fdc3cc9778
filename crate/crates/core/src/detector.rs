//! Miniature single-stage grid detector.
//!
//! The network is a stack of 3x3 convolutions (leaky-relu) followed by a 1x1
//! head producing, for every one of the `S x S` cells and `B` boxes per cell,
//! `[tx, ty, tw, th, to, class logits...]`. Decoding squashes the box terms
//! and objectness with a sigmoid and the class logits with a softmax, so a
//! box never needs anchor priors.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, Image, TruthBox};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("image is {got:?}, detector expects [3, {expected}, {expected}]")]
    ImageSize { got: [usize; 3], expected: usize },
    #[error("class id {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error(
        "training failed: clean detection rate {:.3} on held-out frames, need {:.3}",
        .report.holdout_rate, .required
    )]
    TrainingFailed {
        required: f64,
        report: Box<TrainReport>,
    },
}

pub type Result<T> = std::result::Result<T, DetectorError>;

/// One 3x3 convolution of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub grid_size: usize,
    pub boxes_per_cell: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
    pub detection_threshold: f64,
    pub nms_iou_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let layer = |channels, stride| LayerSpec { channels, stride };
        Self {
            grid_size: 9,
            boxes_per_cell: 5,
            num_classes: 8,
            input_size: 144,
            layers: vec![
                layer(8, 2),
                layer(16, 2),
                layer(24, 2),
                layer(32, 2),
                layer(32, 1),
            ],
            detection_threshold: 0.5,
            nms_iou_threshold: 0.4,
        }
    }
}

impl DetectorConfig {
    pub fn slot_len(&self) -> usize {
        5 + self.num_classes
    }

    pub fn layout(&self) -> GridLayout {
        GridLayout {
            grid_size: self.grid_size,
            boxes_per_cell: self.boxes_per_cell,
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DetectorError::Config(msg));
        if self.grid_size == 0 || self.boxes_per_cell == 0 || self.num_classes == 0 {
            return bad("grid size, boxes per cell and class count must be positive".into());
        }
        if self.layers.is_empty() {
            return bad("at least one convolution layer is required".into());
        }
        if let Some(l) = self.layers.iter().find(|l| l.channels == 0 || !(1..=2).contains(&l.stride)) {
            return bad(format!("unsupported layer {l:?}"));
        }
        let downsample = self
            .layers
            .iter()
            .filter(|l| l.stride == 2)
            .fold(1usize, |acc, _| acc * 2);
        if !self.input_size.is_multiple_of(downsample) || self.input_size / downsample != self.grid_size {
            return bad(format!(
                "input size {} with {} stride-2 layers does not yield a {}x{} grid",
                self.input_size,
                downsample.trailing_zeros(),
                self.grid_size,
                self.grid_size
            ));
        }
        for (name, v) in [
            ("detection threshold", self.detection_threshold),
            ("nms iou threshold", self.nms_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Shapes of every weight tensor in declared order: per layer the kernel
    /// `[out, in, 3, 3]` then the bias `[out]`, finally the 1x1 head.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(2 * self.layers.len() + 2);
        let mut cin = 3;
        for l in &self.layers {
            shapes.push(vec![l.channels, cin, 3, 3]);
            shapes.push(vec![l.channels]);
            cin = l.channels;
        }
        let head = self.boxes_per_cell * self.slot_len();
        shapes.push(vec![head, cin, 1, 1]);
        shapes.push(vec![head]);
        shapes
    }
}

/// Extents of a raw grid output `[S, S, B, 5 + C]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub grid_size: usize,
    pub boxes_per_cell: usize,
    pub num_classes: usize,
}

impl GridLayout {
    pub fn slot_len(&self) -> usize {
        5 + self.num_classes
    }

    pub fn slots(&self) -> usize {
        self.grid_size * self.grid_size * self.boxes_per_cell
    }

    pub fn shape(&self) -> [usize; 4] {
        [
            self.grid_size,
            self.grid_size,
            self.boxes_per_cell,
            self.slot_len(),
        ]
    }

    /// Flat slot index of cell `(row, col)`, box `b`.
    pub fn slot_index(&self, row: usize, col: usize, b: usize) -> usize {
        (row * self.grid_size + col) * self.boxes_per_cell + b
    }
}

/// Raw detector output living in a graph; losses attach here.
#[derive(Debug, Clone, Copy)]
pub struct GridTensor {
    pub tensor: Tensor,
    pub layout: GridLayout,
}

impl GridTensor {
    pub fn to_output(&self, g: &Graph) -> RawGridOutput {
        RawGridOutput {
            layout: self.layout,
            values: g.value(self.tensor).to_vec(),
        }
    }
}

/// Owned raw output values `[S, S, B, 5 + C]`: per slot
/// `[tx, ty, tw, th, to, class logits...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGridOutput {
    pub layout: GridLayout,
    pub values: Vec<f64>,
}

impl RawGridOutput {
    pub fn new(layout: GridLayout, values: Vec<f64>) -> Option<Self> {
        (values.len() == layout.slots() * layout.slot_len()).then_some(Self { layout, values })
    }

    pub fn zeros(layout: GridLayout) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.slots() * layout.slot_len()],
        }
    }

    pub fn slot(&self, index: usize) -> &[f64] {
        let n = self.layout.slot_len();
        &self.values[index * n..(index + 1) * n]
    }

    pub fn slot_mut(&mut self, index: usize) -> &mut [f64] {
        let n = self.layout.slot_len();
        &mut self.values[index * n..(index + 1) * n]
    }

    pub fn objectness(&self, index: usize) -> f64 {
        sigmoid(self.slot(index)[4])
    }

    pub fn class_probs(&self, index: usize) -> Vec<f64> {
        softmax(&self.slot(index)[5..])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
    pub class_id: usize,
    /// Flat slot index the detection was decoded from.
    pub slot: usize,
}

impl Detection {
    fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Intersection over union of two center-format boxes.
pub fn iou(a: &Detection, b: &Detection) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Every slot whose objectness reaches `threshold`, mapped from cell-relative
/// to image-normalized coordinates.
pub fn decode(raw: &RawGridOutput, threshold: f64) -> Vec<Detection> {
    let layout = raw.layout;
    let s = layout.grid_size as f64;
    let mut out = Vec::new();
    for row in 0..layout.grid_size {
        for col in 0..layout.grid_size {
            for b in 0..layout.boxes_per_cell {
                let index = layout.slot_index(row, col, b);
                let v = raw.slot(index);
                let objectness = sigmoid(v[4]);
                if objectness < threshold {
                    continue;
                }
                let class_probs = softmax(&v[5..]);
                out.push(Detection {
                    cx: (col as f64 + sigmoid(v[0])) / s,
                    cy: (row as f64 + sigmoid(v[1])) / s,
                    w: sigmoid(v[2]),
                    h: sigmoid(v[3]),
                    objectness,
                    class_id: argmax(&class_probs),
                    class_probs,
                    slot: index,
                });
            }
        }
    }
    out
}

/// Greedy class-wise non-maximum suppression.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| {
        b.objectness
            .total_cmp(&a.objectness)
            .then(a.slot.cmp(&b.slot))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(k, d) > iou_threshold);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    params: Vec<Vec<f64>>,
}

impl Detector {
    /// A detector with every weight zero: all logits are zero for any input.
    pub fn zeros(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        Ok(Self { config, params })
    }

    /// Seeded uniform fan-in initialization. The objectness bias starts
    /// negative so untrained slots begin well below the threshold.
    pub fn random(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.param_shapes();
        let head_kernel = shapes.len() - 2;
        let slot_len = config.slot_len();
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                if shape.len() == 1 {
                    if i == shapes.len() - 1 {
                        (0..n)
                            .map(|k| if k % slot_len == 4 { -4.0 } else { 0.0 })
                            .collect()
                    } else {
                        vec![0.0; n]
                    }
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if i == head_kernel { 1.0 } else { 6.0 };
                    let bound = (gain / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: DetectorConfig, params: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len()
            || shapes
                .iter()
                .zip(&params)
                .any(|(s, p)| s.iter().product::<usize>() != p.len())
        {
            return Err(DetectorError::Config(
                "weight buffers do not match the configured layer shapes".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn layout(&self) -> GridLayout {
        self.config.layout()
    }

    fn check_image_shape(&self, shape: &[usize]) -> Result<()> {
        let n = self.config.input_size;
        if shape != [3, n, n] {
            let mut got = [0; 3];
            for (g, s) in got.iter_mut().zip(shape) {
                *g = *s;
            }
            return Err(DetectorError::ImageSize { got, expected: n });
        }
        Ok(())
    }

    /// Differentiable forward pass with the weights as graph constants.
    pub fn forward(&self, g: &mut Graph, image: Tensor) -> Result<GridTensor> {
        Ok(self.forward_with(g, image, false)?.0)
    }

    fn forward_with(
        &self,
        g: &mut Graph,
        image: Tensor,
        trainable: bool,
    ) -> Result<(GridTensor, Vec<Tensor>)> {
        self.check_image_shape(g.shape(image))?;
        let shapes = self.config.param_shapes();
        let mut handles = Vec::with_capacity(shapes.len());
        for (values, shape) in self.params.iter().zip(&shapes) {
            let t = if trainable {
                g.param(values.clone(), shape)?
            } else {
                g.constant(values.clone(), shape)?
            };
            handles.push(t);
        }
        let mut x = image;
        for (l, pair) in self.config.layers.iter().zip(handles.chunks(2)) {
            x = g.conv2d(x, pair[0], l.stride, 1)?;
            x = g.bias_add(x, pair[1])?;
            x = g.leaky_relu(x);
        }
        let n = handles.len();
        x = g.conv2d(x, handles[n - 2], 1, 0)?;
        x = g.bias_add(x, handles[n - 1])?;
        let layout = self.layout();
        let s = layout.grid_size;
        // [B*(5+C), S, S] -> [B, 5+C, S, S] -> [S, S, B, 5+C]
        x = g.reshape(x, &[layout.boxes_per_cell, layout.slot_len(), s, s])?;
        x = g.permute(x, &[2, 3, 0, 1])?;
        Ok((GridTensor { tensor: x, layout }, handles))
    }

    pub fn predict(&self, image: &Image) -> Result<RawGridOutput> {
        self.check_image_shape(&image.shape())?;
        let mut g = Graph::new();
        let x = g.constant(image.data.clone(), &image.shape())?;
        let grid = self.forward(&mut g, x)?;
        Ok(grid.to_output(&g))
    }

    /// Thresholded and suppressed detections for one image.
    pub fn detect(&self, image: &Image) -> Result<Vec<Detection>> {
        let raw = self.predict(image)?;
        Ok(self.postprocess(&raw))
    }

    pub fn postprocess(&self, raw: &RawGridOutput) -> Vec<Detection> {
        nms(
            &decode(raw, self.config.detection_threshold),
            self.config.nms_iou_threshold,
        )
    }

    /// Fraction of frames in which the frame's annotated class survives
    /// postprocessing.
    pub fn clean_detection_rate(&self, frames: &[Frame]) -> Result<f64> {
        if frames.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for f in frames {
            let class = f.truth().class_id;
            if self.detect(&f.image)?.iter().any(|d| d.class_id == class) {
                hits += 1;
            }
        }
        Ok(hits as f64 / frames.len() as f64)
    }

    /// Grid loss of one annotated frame: squared error on the responsible
    /// slot's box and objectness, squared error towards zero objectness on
    /// every other slot, cross-entropy on the responsible slot's class, and a
    /// weak pull of the other slots' class vectors towards uniform.
    fn frame_loss(
        &self,
        g: &mut Graph,
        frame: &Frame,
        opts: &TrainOptions,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let layout = self.layout();
        let truth = frame.truth();
        if truth.class_id >= layout.num_classes {
            return Err(DetectorError::ClassOutOfRange {
                class: truth.class_id,
                classes: layout.num_classes,
            });
        }
        let targets = GridTargets::new(layout, truth, opts);
        let image = g.constant(frame.image.data.clone(), &frame.image.shape())?;
        let (grid, params) = self.forward_with(g, image, true)?;
        let [s, _, b, _] = layout.shape();
        let c = layout.num_classes;

        let boxes = g.narrow(grid.tensor, 3, 0, 4)?;
        let boxes = g.sigmoid(boxes);
        let box_target = g.constant(targets.boxes, &[s, s, b, 4])?;
        let box_diff = g.sub(boxes, box_target)?;
        let box_sq = g.mul(box_diff, box_diff)?;
        let box_weight = g.constant(targets.box_weight, &[s, s, b, 4])?;
        let box_loss = g.mul(box_sq, box_weight)?;
        let box_loss = g.sum(box_loss)?;

        let obj = g.narrow(grid.tensor, 3, 4, 1)?;
        let obj = g.sigmoid(obj);
        let obj_target = g.constant(targets.objectness, &[s, s, b, 1])?;
        let obj_diff = g.sub(obj, obj_target)?;
        let obj_sq = g.mul(obj_diff, obj_diff)?;
        let obj_weight = g.constant(targets.objectness_weight, &[s, s, b, 1])?;
        let obj_loss = g.mul(obj_sq, obj_weight)?;
        let obj_loss = g.sum(obj_loss)?;

        let logits = g.narrow(grid.tensor, 3, 5, c)?;
        let log_probs = g.log_softmax(logits, 3)?;
        let class_weight = g.constant(targets.class_weight, &[s, s, b, c])?;
        let class_loss = g.mul(log_probs, class_weight)?;
        let class_loss = g.sum(class_loss)?;

        let total = g.add(box_loss, obj_loss)?;
        let total = g.add(total, class_loss)?;
        Ok((total, params))
    }

    /// Supervised training with Adam; fails if the held-out clean detection
    /// rate stays below `opts.required_rate`.
    pub fn train(
        &mut self,
        train: &[Frame],
        holdout: &[Frame],
        opts: &TrainOptions,
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(DetectorError::EmptyDataset);
        }
        let mut adam = Adam::new(
            AdamConfig::with_learning_rate(opts.learning_rate),
            self.params.iter().map(Vec::len),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epoch_losses = Vec::with_capacity(opts.epochs);
        let batch = opts.batch_size.max(1);
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            let mut epoch_total = 0.0;
            for chunk in order.chunks(batch) {
                let mut grads: Vec<Vec<f64>> =
                    self.params.iter().map(|p| vec![0.0; p.len()]).collect();
                for &i in chunk {
                    let mut g = Graph::new();
                    let (loss, handles) = self.frame_loss(&mut g, &train[i], opts)?;
                    g.backward(loss)?;
                    epoch_total += g.item(loss);
                    for (acc, h) in grads.iter_mut().zip(&handles) {
                        let grad = g.grad(*h).expect("parameter gradient");
                        for (a, v) in acc.iter_mut().zip(grad) {
                            *a += v / chunk.len() as f64;
                        }
                    }
                }
                adam.step(&mut self.params, &grads);
            }
            epoch_losses.push(epoch_total / train.len() as f64);
        }
        let holdout_rate = self.clean_detection_rate(holdout)?;
        let report = TrainReport {
            epoch_losses,
            holdout_rate,
        };
        if holdout_rate < opts.required_rate {
            return Err(DetectorError::TrainingFailed {
                required: opts.required_rate,
                report: Box::new(report),
            });
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub required_rate: f64,
    pub coord_weight: f64,
    pub noobj_weight: f64,
    /// Weight of the uniform-class pull on slots without an object.
    pub background_class_weight: f64,
    /// Probability mass spread uniformly over all classes in the
    /// responsible slot's class target.
    pub label_smoothing: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 7,
            required_rate: 0.95,
            coord_weight: 5.0,
            noobj_weight: 0.5,
            background_class_weight: 0.02,
            label_smoothing: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-frame loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub holdout_rate: f64,
}

/// Dense per-slot targets and weights for [`Detector::frame_loss`].
struct GridTargets {
    boxes: Vec<f64>,
    box_weight: Vec<f64>,
    objectness: Vec<f64>,
    objectness_weight: Vec<f64>,
    class_weight: Vec<f64>,
}

impl GridTargets {
    fn new(layout: GridLayout, truth: &TruthBox, opts: &TrainOptions) -> Self {
        let s = layout.grid_size;
        let slots = layout.slots();
        let c = layout.num_classes;
        let (row, col) = responsible_cell(layout, truth);
        let responsible = layout.slot_index(row, col, 0);

        let mut boxes = vec![0.0; slots * 4];
        let mut box_weight = vec![0.0; slots * 4];
        boxes[responsible * 4..responsible * 4 + 4].copy_from_slice(&[
            truth.cx * s as f64 - col as f64,
            truth.cy * s as f64 - row as f64,
            truth.w,
            truth.h,
        ]);
        box_weight[responsible * 4..responsible * 4 + 4].fill(opts.coord_weight);

        let mut objectness = vec![0.0; slots];
        let mut objectness_weight = vec![opts.noobj_weight; slots];
        objectness[responsible] = 1.0;
        objectness_weight[responsible] = 1.0;

        // weights multiply log-probabilities, so cross-entropy terms are negative weights
        let mut class_weight = vec![-opts.background_class_weight / c as f64; slots * c];
        let own = &mut class_weight[responsible * c..(responsible + 1) * c];
        own.fill(-opts.label_smoothing / c as f64);
        own[truth.class_id] -= 1.0 - opts.label_smoothing;

        Self {
            boxes,
            box_weight,
            objectness,
            objectness_weight,
            class_weight,
        }
    }
}

/// Cell containing the box center.
pub fn responsible_cell(layout: GridLayout, truth: &TruthBox) -> (usize, usize) {
    let s = layout.grid_size;
    let cell = |v: f64| ((v * s as f64).floor().max(0.0) as usize).min(s - 1);
    (cell(truth.cy), cell(truth.cx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_config() -> DetectorConfig {
        DetectorConfig {
            grid_size: 3,
            boxes_per_cell: 2,
            num_classes: 3,
            input_size: 12,
            layers: vec![
                LayerSpec {
                    channels: 4,
                    stride: 2,
                },
                LayerSpec {
                    channels: 4,
                    stride: 2,
                },
            ],
            ..DetectorConfig::default()
        }
    }

    fn det(cx: f64, cy: f64, w: f64, h: f64, obj: f64, class_id: usize, slot: usize) -> Detection {
        Detection {
            cx,
            cy,
            w,
            h,
            objectness: obj,
            class_probs: vec![],
            class_id,
            slot,
        }
    }

    #[test]
    fn default_config_is_valid() {
        let c = DetectorConfig::default();
        c.validate().unwrap();
        assert_eq!(c.layout().shape(), [9, 9, 5, 13]);
        let mut bad = c.clone();
        bad.input_size = 150;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.detection_threshold = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_detector_outputs_half_objectness() {
        let d = Detector::zeros(DetectorConfig::default()).unwrap();
        let img = Image::filled(144, 144, [0.3, 0.6, 0.9]);
        let raw = d.predict(&img).unwrap();
        assert_eq!(raw.values.len(), 9 * 9 * 5 * 13);
        assert!(raw.values.iter().all(|&v| v == 0.0));
        for slot in 0..raw.layout.slots() {
            assert_eq!(raw.objectness(slot), 0.5);
        }
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let d = Detector::zeros(small_config()).unwrap();
        let img = Image::filled(10, 12, [0.0; 3]);
        assert!(matches!(
            d.predict(&img),
            Err(DetectorError::ImageSize { .. })
        ));
    }

    #[test]
    fn forward_is_deterministic_and_differentiable() {
        let d = Detector::random(small_config(), 3).unwrap();
        let pixels: Vec<f64> = (0..3 * 144).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let img = Image::from_data(12, 12, pixels.clone()).unwrap();
        let a = d.predict(&img).unwrap();
        let b = d.predict(&img).unwrap();
        assert!(a
            .values
            .iter()
            .zip(&b.values)
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        let total = |data: &[f64]| {
            let mut g = Graph::new();
            let x = g.constant(data.to_vec(), &[3, 12, 12]).unwrap();
            let out = d.forward(&mut g, x).unwrap();
            let s = g.sum(out.tensor).unwrap();
            g.item(s)
        };
        let mut g = Graph::new();
        let x = g.param(pixels.clone(), &[3, 12, 12]).unwrap();
        let out = d.forward(&mut g, x).unwrap();
        let s = g.sum(out.tensor).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        for &i in &[0usize, 17, 200, 431] {
            let h = 1e-5;
            let mut up = pixels.clone();
            up[i] += h;
            let mut down = pixels.clone();
            down[i] -= h;
            let numeric = (total(&up) - total(&down)) / (2.0 * h);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-12);
            assert!(rel < 1e-4, "pixel {i}: {} vs {numeric}", grad[i]);
        }
    }

    #[test]
    fn decode_threshold_and_cell_offset() {
        let layout = small_config().layout();
        let mut raw = RawGridOutput::zeros(layout);
        let below = -(1.0f64 / 0.4 - 1.0).ln(); // sigmoid = 0.4
        for slot in 0..layout.slots() {
            raw.slot_mut(slot)[4] = below;
        }
        assert!(decode(&raw, 0.5).is_empty());

        let target = layout.slot_index(0, 0, 0);
        raw.slot_mut(target)[4] = (0.9f64 / 0.1).ln();
        let dets = decode(&raw, 0.5);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].cx - 0.5 / 3.0).abs() < 1e-12);
        assert!((dets[0].cy - 0.5 / 3.0).abs() < 1e-12);
        assert!((dets[0].objectness - 0.9).abs() < 1e-12);
    }

    #[test]
    fn decode_returns_exactly_surviving_slots() {
        let layout = small_config().layout();
        let mut raw = RawGridOutput::zeros(layout);
        for slot in 0..layout.slots() {
            raw.slot_mut(slot)[4] = -2.0;
        }
        let survivors = [1usize, 8, 17];
        for &s in &survivors {
            raw.slot_mut(s)[4] = 1.0 + s as f64 * 0.01;
        }
        // brute-force enumeration of every slot
        let expected: Vec<usize> = (0..layout.slots())
            .filter(|&s| sigmoid(raw.slot(s)[4]) >= 0.5)
            .collect();
        assert_eq!(expected, survivors);
        let got: Vec<usize> = decode(&raw, 0.5).iter().map(|d| d.slot).collect();
        assert_eq!(got, survivors);
    }

    #[test]
    fn nms_examples() {
        let a = det(0.5, 0.5, 0.2, 0.2, 0.9, 1, 0);
        let b = det(0.5, 0.5, 0.2, 0.2, 0.8, 1, 1);
        let kept = nms(&[b.clone(), a.clone()], 0.4);
        assert_eq!(kept, vec![a.clone()]);
        let far = det(0.1, 0.1, 0.1, 0.1, 0.8, 1, 2);
        assert_eq!(nms(&[a.clone(), far.clone()], 0.4).len(), 2);
        // different classes never suppress each other
        let other = det(0.5, 0.5, 0.2, 0.2, 0.8, 2, 3);
        assert_eq!(nms(&[a, other], 0.4).len(), 2);
    }

    /// Straightforward greedy oracle over all pairs.
    fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&i, &j| {
            dets[j]
                .objectness
                .partial_cmp(&dets[i].objectness)
                .unwrap()
                .then(dets[i].slot.cmp(&dets[j].slot))
        });
        let mut keep: Vec<usize> = Vec::new();
        for i in idx {
            let mut ok = true;
            for &k in &keep {
                if dets[k].class_id != dets[i].class_id {
                    continue;
                }
                let ix = ((dets[i].cx + dets[i].w / 2.0).min(dets[k].cx + dets[k].w / 2.0)
                    - (dets[i].cx - dets[i].w / 2.0).max(dets[k].cx - dets[k].w / 2.0))
                    .max(0.0);
                let iy = ((dets[i].cy + dets[i].h / 2.0).min(dets[k].cy + dets[k].h / 2.0)
                    - (dets[i].cy - dets[i].h / 2.0).max(dets[k].cy - dets[k].h / 2.0))
                    .max(0.0);
                let inter = ix * iy;
                let u = dets[i].w * dets[i].h + dets[k].w * dets[k].h - inter;
                if inter / u > thr {
                    ok = false;
                }
            }
            if ok {
                keep.push(i);
            }
        }
        keep
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0.3f64..0.7, 0.3f64..0.7, 0.1f64..0.4, 0.1f64..0.4, 0.5f64..1.0, 0usize..2),
            1..8,
        )
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (cx, cy, w, h, o, c))| det(cx, cy, w, h, o, c, i))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_matches_greedy_oracle(dets in arb_dets()) {
            let kept: Vec<usize> = nms(&dets, 0.4).iter().map(|d| d.slot).collect();
            prop_assert_eq!(kept, nms_oracle(&dets, 0.4));
        }

        #[test]
        fn nms_is_an_idempotent_subset(dets in arb_dets()) {
            let once = nms(&dets, 0.4);
            prop_assert!(once.iter().all(|d| dets.contains(d)));
            prop_assert_eq!(nms(&once, 0.4), once);
        }

        #[test]
        fn decoded_slots_are_valid(values in prop::collection::vec(-6.0f64..6.0, 3 * 3 * 2 * 8)) {
            let raw = RawGridOutput::new(small_config().layout(), values).unwrap();
            let dets = decode(&raw, 0.0);
            prop_assert!(dets.len() <= raw.layout.slots());
            for d in dets {
                let total: f64 = d.class_probs.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(&d.objectness));
                prop_assert!(d.class_id < 3);
            }
        }
    }
}
