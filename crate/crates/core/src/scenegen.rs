//! Deterministic synthetic renderer.
//!
//! Objects are unions of axis-aligned boxes standing on the ground plane. A
//! pinhole camera orbits the object at a fixed distance and elevation; the
//! azimuth `angle` is measured in degrees, `0` looking at the object's back
//! (`+z` face) and `+90` at its left side (`-x` face). Screens are rectangles
//! on faces of the object's first box.

use nalgebra::Vector3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{Frame, Image, Point, ScreenQuad, TruthBox};
use crate::geometry::quad_contains;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("angle {angle} outside scene range [{min}, {max}]")]
    AngleOutOfRange { angle: f64, min: f64, max: f64 },
    #[error("degenerate projection: a vertex lies behind the camera at angle {0}")]
    BehindCamera(f64),
    #[error("screen {slot} projects outside the image at angle {angle}")]
    ScreenOutOfView { slot: usize, angle: f64 },
    #[error("empty dataset: angle range [{min}, {max}] at {density} frames per degree")]
    EmptyRange { min: f64, max: f64, density: f64 },
    #[error("class {0} is not in the scene palette")]
    UnknownClass(usize),
}

pub type Result<T> = std::result::Result<T, SceneError>;

type Vec3 = Vector3<f64>;

/// Screen placeholder color.
pub const PLACEHOLDER_GRAY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    Back,
    Front,
    Left,
    Right,
    Top,
}

impl Face {
    pub fn normal(self) -> Vec3 {
        match self {
            Face::Back => Vec3::new(0.0, 0.0, 1.0),
            Face::Front => Vec3::new(0.0, 0.0, -1.0),
            Face::Left => Vec3::new(-1.0, 0.0, 0.0),
            Face::Right => Vec3::new(1.0, 0.0, 0.0),
            Face::Top => Vec3::new(0.0, 1.0, 0.0),
        }
    }

    const ALL: [Face; 5] = [Face::Back, Face::Front, Face::Left, Face::Right, Face::Top];
}

/// Axis-aligned box: `size = [width (x), height (y), length (z)]`, resting at
/// `base_y`, centered on `x = 0` and `z = z_offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPart {
    pub size: [f64; 3],
    pub base_y: f64,
    pub z_offset: f64,
}

impl BoxPart {
    pub const fn new(size: [f64; 3], base_y: f64, z_offset: f64) -> Self {
        Self {
            size,
            base_y,
            z_offset,
        }
    }

    fn center(&self) -> Vec3 {
        Vec3::new(0.0, self.base_y + self.size[1] / 2.0, self.z_offset)
    }

    /// Face rectangle as `(center, right, up, half_width, half_height)` in the
    /// frame of a viewer looking at the face from outside.
    fn face_frame(&self, face: Face) -> (Vec3, Vec3, Vec3, f64, f64) {
        let n = face.normal();
        let c = self.center();
        let [w, h, l] = self.size;
        let half = Vec3::new(w / 2.0, h / 2.0, l / 2.0);
        let center = c + n.component_mul(&half);
        if face == Face::Top {
            // viewed from above with the back of the object at the bottom edge
            let right = Vec3::new(1.0, 0.0, 0.0);
            let up = Vec3::new(0.0, 0.0, -1.0);
            return (center, right, up, w / 2.0, l / 2.0);
        }
        let world_up = Vec3::new(0.0, 1.0, 0.0);
        let right = (-n).cross(&world_up);
        let half_width = if right.x.abs() > 0.5 { w / 2.0 } else { l / 2.0 };
        (center, right, world_up, half_width, h / 2.0)
    }

    /// Corners top-left, top-right, bottom-right, bottom-left of a face.
    fn face_corners(&self, face: Face) -> [Vec3; 4] {
        let (c, r, u, hw, hh) = self.face_frame(face);
        [
            c - r * hw + u * hh,
            c + r * hw + u * hh,
            c + r * hw - u * hh,
            c - r * hw - u * hh,
        ]
    }

    fn vertices(&self) -> [Vec3; 8] {
        let c = self.center();
        let [w, h, l] = self.size;
        let mut out = [Vec3::zeros(); 8];
        for (i, v) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -0.5 } else { 0.5 };
            let sy = if i & 2 == 0 { -0.5 } else { 0.5 };
            let sz = if i & 4 == 0 { -0.5 } else { 0.5 };
            *v = c + Vec3::new(sx * w, sy * h, sz * l);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectShape {
    pub name: String,
    pub parts: Vec<BoxPart>,
    pub color: [f64; 3],
    /// Whether the configured screens are mounted on this object.
    pub carries_screens: bool,
}

/// A rectangle on a face of the object's first box, in face fractions
/// measured from the face's top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenSlot {
    pub face: Face,
    pub offset: [f64; 2],
    pub size: [f64; 2],
}

impl ScreenSlot {
    /// A centered screen covering `ratio` of the face area with the face's
    /// aspect ratio.
    pub fn centered(face: Face, ratio: f64) -> Self {
        let side = ratio.max(0.0).sqrt();
        Self {
            face,
            offset: [(1.0 - side) / 2.0, (1.0 - side) / 2.0],
            size: [side, side],
        }
    }

    pub fn area_ratio(&self) -> f64 {
        self.size[0] * self.size[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Background {
    Flat { color: [f64; 3] },
    Gradient { top: [f64; 3], bottom: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub distance: f64,
    pub elevation_deg: f64,
    pub focal_px: f64,
    pub target_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub classes: Vec<ObjectShape>,
    pub target_class: usize,
    pub screens: Vec<ScreenSlot>,
    pub background: Background,
    pub camera: CameraSpec,
    pub angle_min: f64,
    pub angle_max: f64,
    pub frames_per_degree: f64,
    /// Angle jitter as a fraction of the frame spacing.
    pub angle_jitter: f64,
    /// Maximum relative brightness change per frame.
    pub brightness_jitter: f64,
    /// Maximum per-channel background color shift per frame.
    pub background_jitter: f64,
}

/// The stock palette: three vehicle-like classes followed by simple shapes.
pub fn default_classes() -> Vec<ObjectShape> {
    let shape = |name: &str, parts: Vec<BoxPart>, color, carries_screens| ObjectShape {
        name: name.to_string(),
        parts,
        color,
        carries_screens,
    };
    vec![
        shape(
            "car",
            vec![
                BoxPart::new([1.8, 1.1, 4.2], 0.15, 0.0),
                BoxPart::new([1.6, 0.55, 2.1], 1.25, -0.2),
            ],
            [0.80, 0.12, 0.12],
            true,
        ),
        shape(
            "bus",
            vec![BoxPart::new([2.1, 1.9, 5.0], 0.2, 0.0)],
            [0.92, 0.76, 0.12],
            true,
        ),
        shape(
            "truck",
            vec![
                BoxPart::new([2.0, 1.5, 3.2], 0.3, 0.8),
                BoxPart::new([1.9, 1.2, 1.3], 0.3, -1.6),
            ],
            [0.15, 0.32, 0.82],
            true,
        ),
        shape(
            "person",
            vec![BoxPart::new([0.6, 1.75, 0.45], 0.0, 0.0)],
            [0.95, 0.78, 0.62],
            false,
        ),
        shape(
            "cone",
            vec![BoxPart::new([0.6, 0.9, 0.6], 0.0, 0.0)],
            [1.0, 0.50, 0.05],
            false,
        ),
        shape(
            "bench",
            vec![BoxPart::new([1.7, 0.5, 0.6], 0.0, 0.0)],
            [0.45, 0.28, 0.12],
            false,
        ),
        shape(
            "crate",
            vec![BoxPart::new([1.4, 1.4, 1.4], 0.0, 0.0)],
            [0.20, 0.62, 0.25],
            false,
        ),
        shape(
            "sign",
            vec![BoxPart::new([1.3, 1.1, 0.15], 0.8, 0.0)],
            [0.62, 0.30, 0.72],
            false,
        ),
    ]
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 144,
            classes: default_classes(),
            target_class: 0,
            screens: vec![Self::back_screen(0.65), Self::left_screen(0.45)],
            background: Background::Gradient {
                top: [0.62, 0.70, 0.78],
                bottom: [0.38, 0.38, 0.36],
            },
            camera: CameraSpec {
                distance: 9.0,
                elevation_deg: 15.0,
                focal_px: 200.0,
                target_height: 0.8,
            },
            angle_min: -45.0,
            angle_max: 45.0,
            frames_per_degree: 1.0,
            angle_jitter: 0.4,
            brightness_jitter: 0.08,
            background_jitter: 0.06,
        }
    }
}

/// Dataset split; the split selects an independent jitter stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// What a visible screen shows when rendered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScreenContent {
    Placeholder,
    /// Seeded blocky random pattern with pixel noise.
    Random(u64),
}

/// Per-frame appearance parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub brightness: f64,
    pub background_shift: [f64; 3],
    pub screen: ScreenContent,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            brightness: 1.0,
            background_shift: [0.0; 3],
            screen: ScreenContent::Placeholder,
        }
    }
}

/// Pinhole camera on the orbit at one azimuth.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub position: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub focal: f64,
    pub center: Point,
}

const NEAR: f64 = 0.1;

impl Camera {
    /// Image-space projection, `None` when the point is behind the near plane.
    pub fn project(&self, x: &Vec3) -> Option<Point> {
        let d = x - self.position;
        let depth = d.dot(&self.forward);
        if depth <= NEAR {
            return None;
        }
        Some(Point::new(
            self.center.x + self.focal * d.dot(&self.right) / depth,
            self.center.y - self.focal * d.dot(&self.up) / depth,
        ))
    }

    /// Direction of the ray through an image point (not normalized).
    pub fn ray(&self, p: Point) -> Vec3 {
        self.forward + self.right * ((p.x - self.center.x) / self.focal)
            - self.up * ((p.y - self.center.y) / self.focal)
    }

    /// Intersects the ray through `p` with a plane; returns the ray
    /// parameter and the hit point.
    pub fn unproject_onto_plane(&self, p: Point, on_plane: &Vec3, normal: &Vec3) -> Option<(f64, Vec3)> {
        let dir = self.ray(p);
        let denom = normal.dot(&dir);
        if denom.abs() < 1e-15 {
            return None;
        }
        let t = normal.dot(&(on_plane - self.position)) / denom;
        Some((t, self.position + dir * t))
    }
}

/// Minimum cosine between a face normal and the direction to the camera for
/// a screen on that face to count as visible.
const SCREEN_MIN_COS: f64 = 0.15;

struct FacePoly {
    part: usize,
    face: Face,
    normal: Vec3,
    anchor: Vec3,
    corners: [Point; 4],
    shade: f64,
}

struct ScreenPoly {
    slot: usize,
    face: Face,
    corners3d: [Vec3; 4],
    quad: [Point; 4],
}

impl SceneSpec {
    pub fn back_screen(ratio: f64) -> ScreenSlot {
        ScreenSlot::centered(Face::Back, ratio)
    }

    pub fn left_screen(ratio: f64) -> ScreenSlot {
        ScreenSlot::centered(Face::Left, ratio)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SceneError::Spec(m));
        if self.image_size == 0 {
            return bad("image size must be positive".into());
        }
        if self.classes.is_empty() || self.classes.iter().any(|c| c.parts.is_empty()) {
            return bad("every class needs at least one box".into());
        }
        if self.target_class >= self.classes.len() {
            return Err(SceneError::UnknownClass(self.target_class));
        }
        for (i, s) in self.screens.iter().enumerate() {
            let inside = s.offset.iter().chain(&s.size).all(|v| (0.0..=1.0).contains(v))
                && s.offset[0] + s.size[0] <= 1.0 + 1e-12
                && s.offset[1] + s.size[1] <= 1.0 + 1e-12;
            if !inside || s.size[0] <= 0.0 || s.size[1] <= 0.0 {
                return bad(format!("screen {i} does not lie within its face"));
            }
        }
        if !(self.angle_min < self.angle_max) {
            return bad(format!(
                "angle range [{}, {}] is empty",
                self.angle_min, self.angle_max
            ));
        }
        if !(self.frames_per_degree > 0.0) {
            return bad("frames per degree must be positive".into());
        }
        if self.camera.distance <= 0.0 || self.camera.focal_px <= 0.0 {
            return bad("camera distance and focal length must be positive".into());
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        ((self.angle_max - self.angle_min) * self.frames_per_degree).round() as usize
    }

    pub fn camera_at(&self, angle: f64) -> Camera {
        let th = angle.to_radians();
        let el = self.camera.elevation_deg.to_radians();
        let d = self.camera.distance;
        let target = Vec3::new(0.0, self.camera.target_height, 0.0);
        let position = target + Vec3::new(-d * th.sin() * el.cos(), d * el.sin(), d * th.cos() * el.cos());
        let forward = (target - position).normalize();
        let right = forward.cross(&Vec3::new(0.0, 1.0, 0.0)).normalize();
        let up = right.cross(&forward);
        let half = self.image_size as f64 / 2.0;
        Camera {
            position,
            forward,
            right,
            up,
            focal: self.camera.focal_px,
            center: Point::new(half, half),
        }
    }

    /// World-space corners (top-left, top-right, bottom-right, bottom-left)
    /// of a screen slot mounted on `class`.
    pub fn screen_corners_3d(&self, class: usize, slot: usize) -> Result<[Vec3; 4]> {
        let shape = self.classes.get(class).ok_or(SceneError::UnknownClass(class))?;
        let s = self
            .screens
            .get(slot)
            .ok_or_else(|| SceneError::Spec(format!("no screen slot {slot}")))?;
        let (c, r, u, hw, hh) = shape.parts[0].face_frame(s.face);
        let top_left = c - r * hw + u * hh;
        let (w, h) = (2.0 * hw, 2.0 * hh);
        let tl = top_left + r * (s.offset[0] * w) - u * (s.offset[1] * h);
        let tr = tl + r * (s.size[0] * w);
        let bl = tl - u * (s.size[1] * h);
        let br = tr - u * (s.size[1] * h);
        Ok([tl, tr, br, bl])
    }

    pub fn render_frame(&self, angle: f64, class: usize) -> Result<Frame> {
        self.render_with(angle, class, &Appearance::default())
    }

    /// Renders the object of `class` seen from `angle` degrees.
    pub fn render_with(&self, angle: f64, class: usize, look: &Appearance) -> Result<Frame> {
        self.validate()?;
        if angle < self.angle_min || angle > self.angle_max {
            return Err(SceneError::AngleOutOfRange {
                angle,
                min: self.angle_min,
                max: self.angle_max,
            });
        }
        self.render_unchecked(angle, class, look)
    }

    /// Rendering without the range check, for corpora spanning other angles.
    pub fn render_unchecked(&self, angle: f64, class: usize, look: &Appearance) -> Result<Frame> {
        let shape = self.classes.get(class).ok_or(SceneError::UnknownClass(class))?;
        let cam = self.camera_at(angle);
        let n = self.image_size;
        let light = Vec3::new(0.35, 1.0, 0.55).normalize();

        let mut faces = Vec::new();
        let mut truth_bounds = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (pi, part) in shape.parts.iter().enumerate() {
            for v in part.vertices() {
                let p = cam.project(&v).ok_or(SceneError::BehindCamera(angle))?;
                truth_bounds = (
                    truth_bounds.0.min(p.x),
                    truth_bounds.1.min(p.y),
                    truth_bounds.2.max(p.x),
                    truth_bounds.3.max(p.y),
                );
            }
            for face in Face::ALL {
                let normal = face.normal();
                let corners3d = part.face_corners(face);
                let anchor = corners3d[0];
                if normal.dot(&(cam.position - anchor)) <= 0.0 {
                    continue;
                }
                let mut corners = [Point::new(0.0, 0.0); 4];
                for (c, v) in corners.iter_mut().zip(&corners3d) {
                    *c = cam.project(v).ok_or(SceneError::BehindCamera(angle))?;
                }
                let shade = 0.45 + 0.55 * normal.dot(&light).max(0.0);
                faces.push(FacePoly {
                    part: pi,
                    face,
                    normal,
                    anchor,
                    corners,
                    shade,
                });
            }
        }

        let mut screens = Vec::new();
        if shape.carries_screens {
            for (slot, s) in self.screens.iter().enumerate() {
                let corners3d = self.screen_corners_3d(class, slot)?;
                let normal = s.face.normal();
                let center = corners3d.iter().sum::<Vec3>() / 4.0;
                let to_cam = (cam.position - center).normalize();
                if normal.dot(&to_cam) < SCREEN_MIN_COS {
                    continue;
                }
                let mut quad = [Point::new(0.0, 0.0); 4];
                for (q, v) in quad.iter_mut().zip(&corners3d) {
                    *q = cam.project(v).ok_or(SceneError::BehindCamera(angle))?;
                }
                if quad
                    .iter()
                    .any(|p| p.x < 0.0 || p.y < 0.0 || p.x > n as f64 || p.y > n as f64)
                {
                    return Err(SceneError::ScreenOutOfView { slot, angle });
                }
                screens.push(ScreenPoly {
                    slot,
                    face: s.face,
                    corners3d,
                    quad,
                });
            }
        }

        let mut image = Image::filled(n, n, [0.0; 3]);
        let pattern = match look.screen {
            ScreenContent::Placeholder => None,
            ScreenContent::Random(seed) => Some(RandomPattern::new(seed)),
        };
        for row in 0..n {
            let bg = self.background_color(row, look);
            for col in 0..n {
                let p = Point::new(col as f64 + 0.5, row as f64 + 0.5);
                let mut best: Option<(f64, &FacePoly)> = None;
                for f in &faces {
                    if !quad_contains(&f.corners, p) {
                        continue;
                    }
                    if let Some((t, _)) = cam.unproject_onto_plane(p, &f.anchor, &f.normal) {
                        if best.is_none_or(|(bt, _)| t < bt) {
                            best = Some((t, f));
                        }
                    }
                }
                let Some((_, face)) = best else {
                    image.set_pixel(row, col, bg);
                    continue;
                };
                let on_screen = if face.part == 0 {
                    screens
                        .iter()
                        .find(|s| s.face == face.face && quad_contains(&s.quad, p))
                } else {
                    None
                };
                let rgb = match (on_screen, &pattern) {
                    (Some(_), None) => [PLACEHOLDER_GRAY; 3],
                    (Some(s), Some(pat)) => {
                        let (_, hit) = cam
                            .unproject_onto_plane(p, &s.corners3d[0], &face.normal)
                            .expect("screen plane faces the camera");
                        let across = s.corners3d[1] - s.corners3d[0];
                        let down = s.corners3d[3] - s.corners3d[0];
                        let rel = hit - s.corners3d[0];
                        let u = rel.dot(&across) / across.norm_squared();
                        let v = rel.dot(&down) / down.norm_squared();
                        pat.sample(s.slot, u, v, row * n + col)
                    }
                    (None, _) => {
                        let k = face.shade * look.brightness;
                        shape.color.map(|c| (c * k).clamp(0.0, 1.0))
                    }
                };
                image.set_pixel(row, col, rgb);
            }
        }

        let clip = |v: f64| v.clamp(0.0, n as f64) / n as f64;
        let (x0, y0, x1, y1) = (
            clip(truth_bounds.0),
            clip(truth_bounds.1),
            clip(truth_bounds.2),
            clip(truth_bounds.3),
        );
        Ok(Frame {
            image,
            angle,
            screens: screens
                .iter()
                .map(|s| ScreenQuad {
                    slot: s.slot,
                    corners: s.quad,
                })
                .collect(),
            truths: vec![TruthBox {
                class_id: class,
                cx: (x0 + x1) / 2.0,
                cy: (y0 + y1) / 2.0,
                w: x1 - x0,
                h: y1 - y0,
            }],
        })
    }

    fn background_color(&self, row: usize, look: &Appearance) -> [f64; 3] {
        let base = match self.background {
            Background::Flat { color } => color,
            Background::Gradient { top, bottom } => {
                let t = (row as f64 + 0.5) / self.image_size as f64;
                [0, 1, 2].map(|c| top[c] + (bottom[c] - top[c]) * t)
            }
        };
        [0, 1, 2].map(|c| (base[c] + look.background_shift[c]).clamp(0.0, 1.0))
    }

    fn sample_appearance(&self, rng: &mut ChaCha8Rng) -> Appearance {
        let bj = self.brightness_jitter;
        let gj = self.background_jitter;
        Appearance {
            brightness: 1.0 + if bj > 0.0 { rng.random_range(-bj..=bj) } else { 0.0 },
            background_shift: [0, 1, 2].map(|_| if gj > 0.0 { rng.random_range(-gj..=gj) } else { 0.0 }),
            screen: ScreenContent::Placeholder,
        }
    }

    /// Frames of the target class spread uniformly over the angle range, in
    /// angle order, with seeded angle and appearance jitter.
    pub fn generate_dataset(&self, split: Split, seed: u64) -> Result<Vec<Frame>> {
        self.validate()?;
        let count = self.frame_count();
        if count == 0 {
            return Err(SceneError::EmptyRange {
                min: self.angle_min,
                max: self.angle_max,
                density: self.frames_per_degree,
            });
        }
        let stream = split_seed(seed, split);
        let range = self.angle_max - self.angle_min;
        let spacing = range / count as f64;
        (0..count)
            .map(|i| {
                let mut rng = frame_rng(stream, i as u64);
                let jitter = if self.angle_jitter > 0.0 {
                    rng.random_range(-0.5..=0.5) * self.angle_jitter
                } else {
                    0.0
                };
                let angle = (self.angle_min + (i as f64 + 0.5 + jitter) * spacing)
                    .clamp(self.angle_min, self.angle_max);
                let look = self.sample_appearance(&mut rng);
                self.render_with(angle, self.target_class, &look)
            })
            .collect()
    }
}

/// Mixed-class training material for the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub frames: usize,
    pub angle_min: f64,
    pub angle_max: f64,
    /// Probability that the screens show a random pattern instead of the placeholder.
    pub random_screen_prob: f64,
    /// Probability that each screen is left off a frame.
    pub screen_drop_prob: f64,
    /// Probability of drawing the scene's target class instead of a uniform class.
    pub target_prob: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            frames: 1200,
            angle_min: -100.0,
            angle_max: 100.0,
            random_screen_prob: 0.3,
            screen_drop_prob: 0.25,
            target_prob: 0.3,
        }
    }
}

/// Renders a seeded corpus of frames with random classes, angles, screen
/// subsets and screen contents.
pub fn generate_corpus(scene: &SceneSpec, corpus: &CorpusSpec, split: Split, seed: u64) -> Result<Vec<Frame>> {
    scene.validate()?;
    let stream = split_seed(seed ^ 0xC0_4B05, split);
    let classes = scene.classes.len();
    (0..corpus.frames)
        .map(|i| {
            let mut rng = frame_rng(stream, i as u64);
            let class = if rng.random_bool(corpus.target_prob.clamp(0.0, 1.0)) {
                scene.target_class
            } else {
                rng.random_range(0..classes)
            };
            let angle = rng.random_range(corpus.angle_min..=corpus.angle_max);
            let mut look = scene.sample_appearance(&mut rng);
            if rng.random_bool(corpus.random_screen_prob.clamp(0.0, 1.0)) {
                look.screen = ScreenContent::Random(rng.random());
            }
            let mut local = scene.clone();
            local
                .screens
                .retain(|_| !rng.random_bool(corpus.screen_drop_prob.clamp(0.0, 1.0)));
            local.render_unchecked(angle, class, &look).map(|mut f| {
                // slot ids refer to the full scene's screen list
                let kept: Vec<usize> = scene
                    .screens
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| local.screens.contains(s))
                    .map(|(k, _)| k)
                    .collect();
                for q in &mut f.screens {
                    q.slot = kept[q.slot];
                }
                f
            })
        })
        .collect()
}

fn split_seed(seed: u64, split: Split) -> u64 {
    let salt = match split {
        Split::Train => 0x7472_6169_6E00_0001,
        Split::Test => 0x7465_7374_0000_0002,
    };
    splitmix(seed ^ salt)
}

fn frame_rng(stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(stream.wrapping_add(splitmix(index))))
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Blocky random colors plus per-pixel noise, keyed by screen slot.
struct RandomPattern {
    seed: u64,
}

impl RandomPattern {
    fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn sample(&self, slot: usize, u: f64, v: f64, pixel: usize) -> [f64; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.seed ^ slot as u64));
        let cols = rng.random_range(1..=5usize);
        let rows = rng.random_range(1..=5usize);
        let cu = ((u.clamp(0.0, 1.0) * cols as f64) as usize).min(cols - 1);
        let cv = ((v.clamp(0.0, 1.0) * rows as f64) as usize).min(rows - 1);
        let block = cv * cols + cu;
        let mut color = [0.0; 3];
        for b in 0..=block {
            let c: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            if b == block {
                color = c;
            }
        }
        let mut noise = ChaCha8Rng::seed_from_u64(splitmix(self.seed ^ (pixel as u64) << 8 ^ slot as u64));
        color.map(|c| (c + noise.random_range(-0.08..=0.08)).clamp(0.0, 1.0))
    }
}
