//! Images and annotated frames shared by the scene generator, placement,
//! detector and evaluation code.

use serde::{Deserialize, Serialize};

/// Three-channel image stored channel-major (`[3, height, width]`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (c, value) in rgb.iter().enumerate() {
            data[c * plane..(c + 1) * plane].fill(*value);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == 3 * height * width).then_some(Self {
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [3, self.height, self.width]
    }

    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.height + row) * self.width + col
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        [0, 1, 2].map(|c| self.data[self.index(c, row, col)])
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            let i = self.index(c, row, col);
            self.data[i] = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Image-space corners of one visible screen, ordered top-left, top-right,
/// bottom-right, bottom-left as seen on the screen surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreenQuad {
    pub slot: usize,
    pub corners: [Point; 4],
}

impl ScreenQuad {
    /// Shoelace area in square pixels.
    pub fn area(&self) -> f64 {
        let c = &self.corners;
        let twice: f64 = (0..4)
            .map(|i| {
                let (a, b) = (c[i], c[(i + 1) % 4]);
                a.x * b.y - b.x * a.y
            })
            .sum();
        twice.abs() / 2.0
    }
}

/// Ground-truth object box, center format, normalized to image fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    /// Camera azimuth in degrees; 0 looks at the object's back.
    pub angle: f64,
    pub screens: Vec<ScreenQuad>,
    pub truths: Vec<TruthBox>,
}

impl Frame {
    /// The single annotated object of the frame.
    pub fn truth(&self) -> &TruthBox {
        &self.truths[0]
    }

    pub fn screen(&self, slot: usize) -> Option<&ScreenQuad> {
        self.screens.iter().find(|s| s.slot == slot)
    }
}
