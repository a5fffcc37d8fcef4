use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

/// Background plus four shape classes.
pub const DEFAULT_CLASSES: usize = 5;

/// A bright image (`1×3×H×W`) with its pixel-aligned class map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub seed: u64,
}

/// HSV (hue in degrees) to RGB, all components in `[0, 1]`.
pub fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

/// Base hue of shape class `k` (1-based) among `classes - 1` shape classes.
pub fn class_hue(k: usize, classes: usize) -> f64 {
    (k - 1) as f64 * 360.0 / (classes - 1) as f64
}

#[derive(Clone, Copy)]
struct Shape {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    ellipse: bool,
}

impl Shape {
    fn covers(&self, y: usize, x: usize) -> bool {
        if y < self.y0 || y >= self.y0 + self.h || x < self.x0 || x >= self.x0 + self.w {
            return false;
        }
        if !self.ellipse {
            return true;
        }
        let dy = (y as f64 + 0.5 - self.y0 as f64) / self.h as f64 * 2.0 - 1.0;
        let dx = (x as f64 + 0.5 - self.x0 as f64) / self.w as f64 * 2.0 - 1.0;
        dy * dy + dx * dx <= 1.0
    }

    /// Bounding boxes separated by at least one pixel.
    fn disjoint(&self, o: &Shape) -> bool {
        self.y0 + self.h < o.y0
            || o.y0 + o.h < self.y0
            || self.x0 + self.w < o.x0
            || o.x0 + o.w < self.x0
    }
}

/// Deterministic scene: a textured gray background (class 0) with 2–6
/// non-overlapping rectangles or ellipses, each a jittered class hue.
pub fn generate_scene(
    seed: u64,
    width: usize,
    height: usize,
    classes: usize,
) -> Result<LabeledScene> {
    if width == 0 || height == 0 || !width.is_multiple_of(16) || !height.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "scene size {width}x{height} must be a positive multiple of 16"
        )));
    }
    if classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = width * height;
    let mut image = vec![0f32; 3 * plane];
    let mut labels = vec![0u8; plane];

    // Scene-wide illumination keeps the gain needed to undo darkening within
    // the global stage's coefficient range and varies it per image.
    let illum: f64 = rng.gen_range(0.2..0.45);
    let base: f64 = rng.gen_range(0.35..0.65);
    let tint = rng.gen_range(0.0..360.0);
    let tint_sat = rng.gen_range(0.0..0.08);
    let (fy, fx, phase) = (
        rng.gen_range(0.3..1.2),
        rng.gen_range(0.3..1.2),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    for y in 0..height {
        for x in 0..width {
            let wave = 0.06 * (fy * y as f64 + fx * x as f64 + phase).sin();
            let grain = rng.gen_range(-0.04..0.04);
            let v = (illum * (base + wave + grain)).clamp(0.0, 1.0);
            let rgb = hsv_to_rgb(tint, tint_sat, v);
            for c in 0..3 {
                image[c * plane + y * width + x] = rgb[c] as f32;
            }
        }
    }

    let target = rng.gen_range(2..=6usize);
    let max_side = (width.min(height) / 2).max(3);
    let mut shapes: Vec<Shape> = Vec::new();
    for _ in 0..200 {
        if shapes.len() == target {
            break;
        }
        let h = rng.gen_range(3..=max_side.min(height));
        let w = rng.gen_range(3..=max_side.min(width));
        let s = Shape {
            y0: rng.gen_range(0..=height - h),
            x0: rng.gen_range(0..=width - w),
            h,
            w,
            ellipse: rng.gen_bool(0.5),
        };
        if shapes.iter().all(|o| s.disjoint(o)) {
            shapes.push(s);
        }
    }

    let spacing = 360.0 / (classes - 1) as f64;
    for s in &shapes {
        let class = rng.gen_range(1..classes);
        let hue = class_hue(class, classes) + rng.gen_range(-0.1..0.1) * spacing;
        let sat: f64 = rng.gen_range(0.75..1.0);
        let val: f64 = rng.gen_range(0.7..1.0);
        for y in s.y0..s.y0 + s.h {
            for x in s.x0..s.x0 + s.w {
                if !s.covers(y, x) {
                    continue;
                }
                let v = (illum * (val + rng.gen_range(-0.03..0.03))).clamp(0.0, 1.0);
                let rgb = hsv_to_rgb(hue, sat, v);
                for c in 0..3 {
                    image[c * plane + y * width + x] = rgb[c] as f32;
                }
                labels[y * width + x] = class as u8;
            }
        }
    }

    Ok(LabeledScene {
        image: Tensor::new([1, 3, height, width], image)?,
        labels: LabelMap::new(1, height, width, labels)?,
        seed,
    })
}
