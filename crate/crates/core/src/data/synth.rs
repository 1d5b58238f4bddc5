//! Deterministic synthetic scenes: a textured background (class 1) with rectangles,
//! circles and triangles of classes `2..=C` painted on top, later shapes occluding
//! earlier ones.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Mask, Sample, Split};
use crate::error::{Error, Result};

pub const BACKGROUND_CLASS: u32 = 1;

/// Seed offsets added to the master seed for each split.
pub const SPLIT_SEED_OFFSETS: [(Split, u64); 3] = [(Split::Train, 0), (Split::Val, 1_000_003), (Split::Test, 2_000_006)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Few subjects on a dominant background: 3 classes, 1-2 shapes, 85% background.
    Sparse,
    /// Cluttered scenes: 6 classes, 4-8 shapes, 45% background.
    Diverse,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Preset::Sparse),
            "diverse" => Ok(Preset::Diverse),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: u32,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub background_fraction: f64,
    pub count: usize,
    pub split: Split,
}

impl SceneSpec {
    pub fn preset(preset: Preset, seed: u64, count: usize, split: Split) -> Self {
        let (num_classes, min_shapes, max_shapes, background_fraction) = match preset {
            Preset::Sparse => (3, 1, 2, 0.85),
            Preset::Diverse => (6, 4, 8, 0.45),
        };
        SceneSpec {
            seed,
            height: 64,
            width: 64,
            num_classes,
            min_shapes,
            max_shapes,
            background_fraction,
            count,
            split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes {} outside 2..=255", self.num_classes)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("empty image size".into()));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config("min_shapes > max_shapes".into()));
        }
        if !(self.background_fraction > 0.0 && self.background_fraction < 1.0) {
            return Err(Error::Config("background_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        let off = SPLIT_SEED_OFFSETS.iter().find(|(s, _)| *s == self.split).map_or(0, |(_, o)| *o);
        self.seed.wrapping_add(off)
    }

    pub fn sample_id(&self, index: usize) -> String {
        format!("{}_{index:05}", self.split)
    }
}

/// Base RGB per class id; classes beyond the table reuse it cyclically from class 2.
const CLASS_COLORS: [[f64; 3]; 8] = [
    [0.30, 0.55, 0.25], // 1 background
    [0.85, 0.20, 0.20],
    [0.20, 0.30, 0.85],
    [0.90, 0.85, 0.20],
    [0.75, 0.25, 0.80],
    [0.20, 0.80, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.55, 0.55],
];

fn class_color(class: u32) -> [f64; 3] {
    let i = class as usize - 1;
    if i < CLASS_COLORS.len() {
        CLASS_COLORS[i]
    } else {
        CLASS_COLORS[1 + (i - 1) % (CLASS_COLORS.len() - 1)]
    }
}

enum Shape {
    Rect { y0: f64, x0: f64, h: f64, w: f64 },
    Circle { cy: f64, cx: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Triangle { pts } => {
                let side = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

fn place_shape(rng: &mut Xoshiro256PlusPlus, area: f64, height: usize, width: usize) -> Shape {
    let (hf, wf) = (height as f64, width as f64);
    let max_extent = hf.min(wf);
    match rng.random_range(0..3) {
        0 => {
            let aspect = rng.random_range(0.6..1.6);
            let h = (area * aspect).sqrt().clamp(1.0, hf);
            let w = (area / h).clamp(1.0, wf);
            Shape::Rect {
                y0: rng.random::<f64>() * (hf - h),
                x0: rng.random::<f64>() * (wf - w),
                h,
                w,
            }
        }
        1 => {
            let r = (area / PI).sqrt().clamp(0.5, max_extent / 2.0);
            Shape::Circle {
                cy: r + rng.random::<f64>() * (hf - 2.0 * r),
                cx: r + rng.random::<f64>() * (wf - 2.0 * r),
                r,
            }
        }
        _ => {
            // equilateral triangle, random rotation; circumradius from area
            let r = (4.0 * area / (3.0 * 3f64.sqrt())).sqrt().clamp(0.5, max_extent / 2.0);
            let cy = r + rng.random::<f64>() * (hf - 2.0 * r);
            let cx = r + rng.random::<f64>() * (wf - 2.0 * r);
            let theta = rng.random::<f64>() * 2.0 * PI;
            let pts = [0.0, 1.0, 2.0].map(|k: f64| {
                let a = theta + k * 2.0 * PI / 3.0;
                (cy + r * a.sin(), cx + r * a.cos())
            });
            Shape::Triangle { pts }
        }
    }
}

/// Renders sample `index` of `spec`; a pure function of both.
pub fn generate_sample(spec: &SceneSpec, index: usize) -> Sample {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(
        spec.split_seed()
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64),
    );
    let (h, w) = (spec.height, spec.width);
    let mut mask = Mask::filled(h, w, BACKGROUND_CLASS);

    let n_shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let foreground = (1.0 - spec.background_fraction) * (h * w) as f64;
    let mut palette = vec![[0.0; 3]; spec.num_classes as usize + 1];
    for class in 1..=spec.num_classes {
        let base = class_color(class);
        palette[class as usize] = base.map(|c| (c + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0));
    }

    for _ in 0..n_shapes {
        let class = rng.random_range(2..=spec.num_classes);
        let area = foreground / n_shapes as f64 * rng.random_range(0.75..1.25);
        let shape = place_shape(&mut rng, area, h, w);
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    mask.set(y, x, class);
                }
            }
        }
    }

    // background texture: a low-frequency wave per image
    let (fy, fx, phase) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2), rng.random::<f64>() * 2.0 * PI);
    let mut image = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let class = mask.get(y, x);
            let base = palette[class as usize];
            let wave = if class == BACKGROUND_CLASS {
                0.06 * (fy * y as f64 + fx * x as f64 + phase).sin()
            } else {
                0.0
            };
            let rgb = base.map(|c| (c + wave + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
            image.set_pixel(y, x, rgb);
        }
    }
    Sample {
        id: spec.sample_id(index),
        image,
        mask,
    }
}

pub fn generate(spec: &SceneSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.count).map(|i| generate_sample(spec, i)).collect())
}
