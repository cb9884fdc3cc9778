//! On-disk formats: PPM images, detector weights, patches and datasets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::LossKind;
use crate::detector::{Detector, DetectorConfig, DetectorError, LayerSpec};
use crate::frame::{Frame, Image, Point, ScreenQuad, TruthBox};
use crate::placement::Patch;
use crate::scenegen::Split;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{context}: {message}")]
    Format { context: String, message: String },
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn format_err(context: impl Into<String>, message: impl Into<String>) -> IoError {
    IoError::Format {
        context: context.into(),
        message: message.into(),
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::File {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| format_err(path.display().to_string(), "not UTF-8 text"))
}

// ----- PPM -----

/// Binary P6 with 8-bit samples, `round(v * 255)`.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(3 * image.width * image.height);
    for row in 0..image.height {
        for col in 0..image.width {
            for v in image.pixel(row, col) {
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
fn ppm_header(bytes: &[u8]) -> Option<([usize; 3], usize)> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if tokens[0] != "P6" {
        return None;
    }
    let w = tokens[1].parse().ok()?;
    let h = tokens[2].parse().ok()?;
    let max = tokens[3].parse().ok()?;
    // exactly one whitespace byte separates the header from the samples
    Some(([w, h, max], pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let ([w, h, max], start) = ppm_header(bytes).ok_or_else(|| format_err("ppm", "malformed P6 header"))?;
    if max != 255 {
        return Err(format_err("ppm", format!("unsupported max value {max}")));
    }
    let body = bytes.get(start..start + 3 * w * h).ok_or_else(|| format_err("ppm", "truncated pixel data"))?;
    let mut image = Image::filled(h, w, [0.0; 3]);
    for (i, px) in body.chunks_exact(3).enumerate() {
        image.set_pixel(i / w, i % w, [0, 1, 2].map(|c| px[c] as f64 / 255.0));
    }
    Ok(image)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    write_file(path, &encode_ppm(image))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read_file(path)?).map_err(|e| match e {
        IoError::Format { message, .. } => format_err(path.display().to_string(), message),
        other => other,
    })
}

// ----- detector weights -----

const DETECTOR_MAGIC: &str = "PFDET v1";

fn push_f64s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8], count: usize, context: &str) -> Result<Vec<f64>> {
    if bytes.len() != 8 * count {
        return Err(format_err(
            context,
            format!("expected {} bytes of weights, found {}", 8 * count, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Splits off `lines` newline-terminated text lines from the front of `bytes`.
fn text_lines(bytes: &[u8], lines: usize, context: &str) -> Result<(Vec<String>, usize)> {
    let mut out = Vec::with_capacity(lines);
    let mut pos = 0;
    for _ in 0..lines {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(context, "truncated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| format_err(context, "header is not text"))?;
        out.push(line.to_string());
        pos += end + 1;
    }
    Ok((out, pos))
}

pub fn encode_detector(detector: &Detector) -> Vec<u8> {
    let c = detector.config();
    let layers: Vec<String> = c.layers.iter().map(|l| format!("{}:{}", l.channels, l.stride)).collect();
    let count: usize = detector.params().iter().map(Vec::len).sum();
    let header = format!(
        "{DETECTOR_MAGIC}\ngrid_size {}\nboxes_per_cell {}\nnum_classes {}\ninput_size {}\nlayers {}\ndetection_threshold {:?}\nnms_iou_threshold {:?}\nweights {count}\n",
        c.grid_size,
        c.boxes_per_cell,
        c.num_classes,
        c.input_size,
        layers.join(","),
        c.detection_threshold,
        c.nms_iou_threshold,
    );
    let mut out = header.into_bytes();
    push_f64s(&mut out, detector.params().iter().flatten().copied());
    out
}

pub fn decode_detector(bytes: &[u8]) -> Result<Detector> {
    const CTX: &str = "detector weights";
    let (lines, start) = text_lines(bytes, 9, CTX)?;
    if lines[0] != DETECTOR_MAGIC {
        return Err(format_err(CTX, format!("expected header {DETECTOR_MAGIC:?}")));
    }
    let field = |i: usize, key: &str| -> Result<&str> {
        lines[i]
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .ok_or_else(|| format_err(CTX, format!("line {} should start with {key:?}", i + 1)))
    };
    let num = |i: usize, key: &str| -> Result<usize> {
        field(i, key)?
            .parse()
            .map_err(|_| format_err(CTX, format!("bad value for {key}")))
    };
    let real = |i: usize, key: &str| -> Result<f64> {
        field(i, key)?
            .parse()
            .map_err(|_| format_err(CTX, format!("bad value for {key}")))
    };
    let layers = field(5, "layers")?
        .split(',')
        .map(|spec| {
            let (c, s) = spec.split_once(':')?;
            Some(LayerSpec {
                channels: c.parse().ok()?,
                stride: s.parse().ok()?,
            })
        })
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| format_err(CTX, "bad layer list"))?;
    let config = DetectorConfig {
        grid_size: num(1, "grid_size")?,
        boxes_per_cell: num(2, "boxes_per_cell")?,
        num_classes: num(3, "num_classes")?,
        input_size: num(4, "input_size")?,
        layers,
        detection_threshold: real(6, "detection_threshold")?,
        nms_iou_threshold: real(7, "nms_iou_threshold")?,
    };
    config.validate()?;
    let count = num(8, "weights")?;
    let shapes = config.param_shapes();
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if count != expected {
        return Err(format_err(CTX, format!("{count} weights declared, config needs {expected}")));
    }
    let flat = read_f64s(&bytes[start..], count, CTX)?;
    let mut params = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for s in &shapes {
        let n: usize = s.iter().product();
        params.push(flat[offset..offset + n].to_vec());
        offset += n;
    }
    Ok(Detector::from_params(config, params)?)
}

pub fn save_detector(path: &Path, detector: &Detector) -> Result<()> {
    write_file(path, &encode_detector(detector))
}

pub fn load_detector(path: &Path) -> Result<Detector> {
    decode_detector(&read_file(path)?)
}

// ----- patches -----

const PATCH_MAGIC: &str = "PFPATCH v1";

/// Exact patch encoding: header, `<slot> <height> <width>`, little-endian f64s.
pub fn encode_patch(patch: &Patch) -> Vec<u8> {
    let mut out = format!("{PATCH_MAGIC}\n{} {} {}\n", patch.slot, patch.height, patch.width).into_bytes();
    push_f64s(&mut out, patch.pixels.iter().copied());
    out
}

pub fn decode_patch(bytes: &[u8]) -> Result<Patch> {
    const CTX: &str = "patch";
    let (lines, start) = text_lines(bytes, 2, CTX)?;
    if lines[0] != PATCH_MAGIC {
        return Err(format_err(CTX, format!("expected header {PATCH_MAGIC:?}")));
    }
    let dims: Vec<usize> = lines[1]
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format_err(CTX, "bad dimension line"))?;
    let [slot, height, width] = dims[..] else {
        return Err(format_err(CTX, "dimension line needs slot, height and width"));
    };
    let pixels = read_f64s(&bytes[start..], 3 * height * width, CTX)?;
    Patch::new(slot, height, width, pixels).map_err(|e| format_err(CTX, e.to_string()))
}

/// Metadata written next to each saved patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub slot: usize,
    /// Angle bin the patch was crafted for, `[lo, hi]` in degrees.
    pub angle_subset: [f64; 2],
    pub loss_kind: LossKind,
    pub seed: u64,
    pub iterations: usize,
}

/// Paths of the three files making up a saved patch with stem `stem`.
pub fn patch_paths(dir: &Path, stem: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("{stem}.pfpatch")),
        dir.join(format!("{stem}.ppm")),
        dir.join(format!("{stem}.json")),
    ]
}

pub fn save_patch(dir: &Path, stem: &str, patch: &Patch, meta: &PatchMeta) -> Result<[PathBuf; 3]> {
    let paths = patch_paths(dir, stem);
    write_file(&paths[0], &encode_patch(patch))?;
    write_ppm(&paths[1], &patch.to_image())?;
    let json = serde_json::to_string_pretty(meta).expect("patch metadata serializes");
    write_file(&paths[2], format!("{json}\n").as_bytes())?;
    Ok(paths)
}

/// Loads a patch from its exact file, or from the PPM when only that exists
/// (slot taken from the JSON sidecar).
pub fn load_patch(dir: &Path, stem: &str) -> Result<Patch> {
    let [exact, ppm, meta] = patch_paths(dir, stem);
    if exact.exists() {
        return decode_patch(&read_file(&exact)?);
    }
    let image = read_ppm(&ppm)?;
    let meta: PatchMeta = serde_json::from_str(&read_text(&meta)?)
        .map_err(|e| format_err(meta.display().to_string(), e.to_string()))?;
    Patch::new(meta.slot, image.height, image.width, image.data).map_err(|e| format_err(stem, e.to_string()))
}

// ----- datasets -----

/// Sidecar text: `angle`, then `screen` lines, then `truth` lines.
pub fn encode_sidecar(frame: &Frame) -> String {
    let mut out = format!("angle {}\n", frame.angle);
    for q in &frame.screens {
        let _ = write!(out, "screen {}", q.slot);
        for p in q.corners {
            let _ = write!(out, " {} {}", p.x, p.y);
        }
        out.push('\n');
    }
    for t in &frame.truths {
        let _ = writeln!(out, "truth {} {} {} {} {}", t.class_id, t.cx, t.cy, t.w, t.h);
    }
    out
}

pub struct Sidecar {
    pub angle: f64,
    pub screens: Vec<ScreenQuad>,
    pub truths: Vec<TruthBox>,
}

pub fn decode_sidecar(text: &str, context: &str) -> Result<Sidecar> {
    let mut angle = None;
    let mut screens = Vec::new();
    let mut truths = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = || format_err(context, format!("line {}: {line:?}", n + 1));
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        let nums: Vec<f64> = parts.map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let index = |v: f64| (v >= 0.0 && v.fract() == 0.0).then_some(v as usize);
        match (key, nums.len()) {
            ("angle", 1) => angle = Some(nums[0]),
            ("screen", 9) => screens.push(ScreenQuad {
                slot: index(nums[0]).ok_or_else(bad)?,
                corners: std::array::from_fn(|i| Point::new(nums[1 + 2 * i], nums[2 + 2 * i])),
            }),
            ("truth", 5) => truths.push(TruthBox {
                class_id: index(nums[0]).ok_or_else(bad)?,
                cx: nums[1],
                cy: nums[2],
                w: nums[3],
                h: nums[4],
            }),
            _ => return Err(bad()),
        }
    }
    Ok(Sidecar {
        angle: angle.ok_or_else(|| format_err(context, "missing angle line"))?,
        screens,
        truths,
    })
}

/// Pure magenta, the corner-marker color.
pub const MARKER: [u8; 3] = [255, 0, 255];

/// Recovers one screen quad (slot 0) from exactly four marker-colored
/// pixels, ordered top-left, top-right, bottom-right, bottom-left.
pub fn decode_markers(image: &Image) -> Option<ScreenQuad> {
    let mut pts = Vec::new();
    for row in 0..image.height {
        for col in 0..image.width {
            let px = image.pixel(row, col).map(|v| (v * 255.0).round() as u8);
            if px == MARKER {
                pts.push(Point::new(col as f64 + 0.5, row as f64 + 0.5));
            }
        }
    }
    if pts.len() != 4 {
        return None;
    }
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / 4.0;
    // clockwise on screen (y down) starting from the upper-left quadrant
    let key = |p: &Point| {
        let a = (p.y - cy).atan2(p.x - cx);
        let start = -3.0 * std::f64::consts::FRAC_PI_4;
        (a - start).rem_euclid(std::f64::consts::TAU)
    };
    pts.sort_by(|a, b| key(a).total_cmp(&key(b)));
    Some(ScreenQuad {
        slot: 0,
        corners: [pts[0], pts[1], pts[2], pts[3]],
    })
}

/// Draws the four corner markers of `quad` into `image`.
pub fn mark_corners(image: &mut Image, quad: &[Point; 4]) {
    for p in quad {
        let col = (p.x.floor().max(0.0) as usize).min(image.width - 1);
        let row = (p.y.floor().max(0.0) as usize).min(image.height - 1);
        image.set_pixel(row, col, MARKER.map(|v| v as f64 / 255.0));
    }
}

pub const INDEX_FILE: &str = "index.txt";

fn frame_stem(i: usize) -> String {
    format!("frame_{i:05}")
}

/// Writes `<dir>/<split>/frame_NNNNN.{ppm,txt}` and an index listing stems
/// and angles in angle order.
pub fn write_split(dir: &Path, split: Split, frames: &[Frame]) -> Result<PathBuf> {
    let root = dir.join(split.name());
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by(|&a, &b| frames[a].angle.total_cmp(&frames[b].angle).then(a.cmp(&b)));
    let mut index = String::new();
    for (i, &k) in order.iter().enumerate() {
        let f = &frames[k];
        let stem = frame_stem(i);
        write_ppm(&root.join(format!("{stem}.ppm")), &f.image)?;
        write_file(&root.join(format!("{stem}.txt")), encode_sidecar(f).as_bytes())?;
        let _ = writeln!(index, "{stem} {}", f.angle);
    }
    write_file(&root.join(INDEX_FILE), index.as_bytes())?;
    Ok(root)
}

/// Reads a split written by [`write_split`], in index order. Frames whose
/// sidecar lists no screens fall back to marker pixels.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<Frame>> {
    let root = dir.join(split.name());
    let index_path = root.join(INDEX_FILE);
    let index = read_text(&index_path)?;
    let mut frames = Vec::new();
    for line in index.lines().filter(|l| !l.trim().is_empty()) {
        let stem = line
            .split_whitespace()
            .next()
            .ok_or_else(|| format_err(index_path.display().to_string(), "empty index line"))?;
        let image = read_ppm(&root.join(format!("{stem}.ppm")))?;
        let side_path = root.join(format!("{stem}.txt"));
        let side = decode_sidecar(&read_text(&side_path)?, &side_path.display().to_string())?;
        let screens = if side.screens.is_empty() {
            decode_markers(&image).into_iter().collect()
        } else {
            side.screens
        };
        frames.push(Frame {
            image,
            angle: side.angle,
            screens,
            truths: side.truths,
        });
    }
    Ok(frames)
}

/// Quantizes an image to what a PPM round trip yields.
pub fn quantize(image: &Image) -> Image {
    Image {
        data: image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(),
        ..image.clone()
    }
}
