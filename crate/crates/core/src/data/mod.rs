//! Images, label masks, the synthetic scene generator, and on-disk dataset layout.

pub mod manifest;
pub mod netpbm;
pub mod synth;

pub use manifest::{Manifest, ManifestEntry, Split};
pub use synth::{Preset, SceneSpec};

/// RGB image, `height x width x 3` row-major, channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, class: u32) -> Self {
        Mask {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u32) {
        self.labels[y * self.width + x] = class;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}
