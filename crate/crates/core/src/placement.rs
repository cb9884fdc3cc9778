//! Differentiable patch placement: homography warp onto a screen quad,
//! full-replacement compositing and randomized appearance transforms.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, Image, Point};
use crate::geometry::{bounds, has_collinear_corners, is_strictly_convex, quad_contains};
use crate::tensor::{GatherEntry, GatherMap, Graph, Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum PlacementError {
    #[error("quad has collinear corners")]
    Collinear,
    #[error("quad is not convex")]
    NotConvex,
    #[error("homography is singular")]
    Singular,
    #[error("quad extends outside the {width}x{height} image")]
    OutsideImage { width: usize, height: usize },
    #[error("screen slot {0} is assigned more than one patch")]
    DuplicateSlot(usize),
    #[error("patch pixel count {got} does not match 3x{height}x{width}")]
    BadPatch { got: usize, height: usize, width: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, PlacementError>;

/// Optimizable image assigned to one screen slot; pixels are channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub slot: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Patch {
    pub fn new(slot: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != 3 * height * width || height == 0 || width == 0 {
            return Err(PlacementError::BadPatch {
                got: pixels.len(),
                height,
                width,
            });
        }
        Ok(Self {
            slot,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(slot: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            slot,
            height,
            width,
            pixels: vec![value; 3 * height * width],
        }
    }

    /// Pixels drawn uniformly from `[lo, hi]`.
    pub fn random<R: Rng + ?Sized>(slot: usize, height: usize, width: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self {
            slot,
            height,
            width,
            pixels: (0..3 * height * width).map(|_| rng.random_range(lo..=hi)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        [3, self.height, self.width]
    }

    pub fn clamp_pixels(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn to_image(&self) -> Image {
        Image::from_data(self.height, self.width, self.pixels.clone()).expect("patch shape is consistent")
    }
}

/// Projective map from the unit square to image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub matrix: Matrix3<f64>,
}

impl Homography {
    pub fn apply(&self, p: Point) -> Option<Point> {
        let v = self.matrix * Vector3::new(p.x, p.y, 1.0);
        (v.z.abs() > 1e-300).then(|| Point::new(v.x / v.z, v.y / v.z))
    }

    pub fn inverse(&self) -> Result<Homography> {
        let inv = self.matrix.try_inverse().ok_or(PlacementError::Singular)?;
        Ok(Homography {
            matrix: inv / inv[(2, 2)],
        })
    }
}

const UNIT_SQUARE: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];

/// Direct linear transform mapping the unit-square corners (0,0), (1,0),
/// (1,1), (0,1) onto `quad` in order.
pub fn solve_homography(quad: &[Point; 4]) -> Result<Homography> {
    if has_collinear_corners(quad) {
        return Err(PlacementError::Collinear);
    }
    if !is_strictly_convex(quad) {
        return Err(PlacementError::NotConvex);
    }
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (&(x, y), q)) in UNIT_SQUARE.iter().zip(quad).enumerate() {
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -x * q.x, -y * q.x]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -x * q.y, -y * q.y]);
        b[r] = q.x;
        b[r + 1] = q.y;
    }
    let h = a.lu().solve(&b).ok_or(PlacementError::Singular)?;
    let matrix = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    if matrix.determinant().abs() <= 1e-12 {
        return Err(PlacementError::Singular);
    }
    Ok(Homography { matrix })
}

/// Bilinear taps into a `height x width` plane at continuous pixel
/// coordinates, with coordinates clamped to the plane (edge extension).
/// Coordinates within this distance of a texel center sample it exactly, so
/// axis-aligned copies reproduce the patch bit for bit.
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    if (v - v.round()).abs() < SNAP {
        v.round()
    } else {
        v
    }
}

fn bilinear_taps(sx: f64, sy: f64, height: usize, width: usize) -> [(usize, f64); 4] {
    let sx = snap(sx).clamp(0.0, (width - 1) as f64);
    let sy = snap(sy).clamp(0.0, (height - 1) as f64);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

/// Resampling map that replaces every image pixel whose center lies inside
/// `quad` by the bilinearly sampled patch pixel under the inverse homography.
pub fn composite_map(
    quad: &[Point; 4],
    patch_height: usize,
    patch_width: usize,
    image_height: usize,
    image_width: usize,
) -> Result<GatherMap> {
    let h = solve_homography(quad)?;
    let inv = h.inverse()?;
    let (x0, y0, x1, y1) = bounds(quad);
    if x0 < 0.0 || y0 < 0.0 || x1 > image_width as f64 || y1 > image_height as f64 {
        return Err(PlacementError::OutsideImage {
            width: image_width,
            height: image_height,
        });
    }
    let plane = image_height * image_width;
    let patch_plane = patch_height * patch_width;
    let col_range = (x0.floor() as usize)..(x1.ceil() as usize).min(image_width);
    let row_range = (y0.floor() as usize)..(y1.ceil() as usize).min(image_height);
    let mut pixels = Vec::new();
    for row in row_range {
        for col in col_range.clone() {
            let p = Point::new(col as f64 + 0.5, row as f64 + 0.5);
            if !quad_contains(quad, p) {
                continue;
            }
            let uv = inv.apply(p).ok_or(PlacementError::Singular)?;
            let sx = uv.x * patch_width as f64 - 0.5;
            let sy = uv.y * patch_height as f64 - 0.5;
            pixels.push((row * image_width + col, bilinear_taps(sx, sy, patch_height, patch_width)));
        }
    }
    let mut entries = Vec::with_capacity(3 * pixels.len());
    for c in 0..Image::CHANNELS {
        for (dest, taps) in &pixels {
            entries.push(GatherEntry {
                dest: c * plane + dest,
                taps: taps.map(|(s, w)| (c * patch_plane + s, w)),
            });
        }
    }
    Ok(GatherMap { entries })
}

/// Composites a patch tensor of shape `[3, h, w]` onto an image tensor.
pub fn composite_patch(g: &mut Graph, image: Tensor, patch: Tensor, quad: &[Point; 4]) -> Result<Tensor> {
    let (ih, iw) = image_dims(g, image)?;
    let (ph, pw) = image_dims(g, patch)?;
    let map = composite_map(quad, ph, pw, ih, iw)?;
    composite_with_map(g, image, patch, Arc::new(map))
}

/// Composites with a precomputed map.
pub fn composite_with_map(g: &mut Graph, image: Tensor, patch: Tensor, map: Arc<GatherMap>) -> Result<Tensor> {
    Ok(g.replace_gather(image, patch, map, Some((0.0, 1.0)))?)
}

fn image_dims(g: &Graph, t: Tensor) -> Result<(usize, usize)> {
    match g.shape(t) {
        [3, h, w] => Ok((*h, *w)),
        other => Err(TensorError::ShapeMismatch {
            op: "composite",
            lhs: other.to_vec(),
            rhs: vec![3],
        }
        .into()),
    }
}

/// A patch living in a graph, tagged with its screen slot.
#[derive(Debug, Clone, Copy)]
pub struct SlotTensor {
    pub slot: usize,
    pub tensor: Tensor,
}

/// Composites every patch whose slot is visible in `frame`, in order.
pub fn place_all(g: &mut Graph, frame: &Frame, image: Tensor, patches: &[SlotTensor]) -> Result<Tensor> {
    check_unique(patches.iter().map(|p| p.slot))?;
    let mut out = image;
    for p in patches {
        if let Some(q) = frame.screen(p.slot) {
            out = composite_patch(g, out, p.tensor, &q.corners)?;
        }
    }
    Ok(out)
}

fn check_unique(slots: impl Iterator<Item = usize>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in slots {
        if !seen.insert(s) {
            return Err(PlacementError::DuplicateSlot(s));
        }
    }
    Ok(())
}

/// Non-differentiable placement for evaluation: returns the patched image.
pub fn apply_patches(frame: &Frame, patches: &[Patch]) -> Result<Image> {
    check_unique(patches.iter().map(|p| p.slot))?;
    let mut image = frame.image.clone();
    for p in patches {
        let Some(q) = frame.screen(p.slot) else {
            continue;
        };
        let map = composite_map(&q.corners, p.height, p.width, image.height, image.width)?;
        for e in &map.entries {
            let v: f64 = e.taps.iter().map(|&(s, w)| w * p.pixels[s]).sum();
            image.data[e.dest] = v.clamp(0.0, 1.0);
        }
    }
    Ok(image)
}

/// Ranges for the random appearance transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformRanges {
    pub brightness: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub noise: f64,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            brightness: 0.15,
            contrast_min: 0.8,
            contrast_max: 1.2,
            noise: 0.05,
        }
    }
}

impl TransformRanges {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast_min: 1.0,
            contrast_max: 1.0,
            noise: 0.0,
        }
    }
}

/// One draw of the appearance transform for a patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub brightness: f64,
    pub contrast: f64,
    pub noise: Vec<f64>,
}

impl TransformParams {
    pub fn identity(len: usize) -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            noise: vec![0.0; len],
        }
    }

    pub fn sample<R: Rng + ?Sized>(ranges: &TransformRanges, len: usize, rng: &mut R) -> Self {
        let sym = |r: f64, rng: &mut R| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let brightness = sym(ranges.brightness, rng);
        let contrast = if ranges.contrast_max > ranges.contrast_min {
            rng.random_range(ranges.contrast_min..=ranges.contrast_max)
        } else {
            ranges.contrast_min
        };
        let noise = (0..len).map(|_| sym(ranges.noise, rng)).collect();
        Self {
            brightness,
            contrast,
            noise,
        }
    }
}

/// `clamp(contrast * p + brightness + noise, 0, 1)`.
pub fn apply_random_transform(g: &mut Graph, patch: Tensor, params: &TransformParams) -> Result<Tensor> {
    let shape = g.shape(patch).to_vec();
    let scaled = g.mul_scalar(patch, params.contrast);
    let shifted = g.add_scalar(scaled, params.brightness);
    let noise = g.constant(params.noise.clone(), &shape)?;
    let noisy = g.add(shifted, noise)?;
    Ok(g.clamp(noisy, 0.0, 1.0))
}
