//! Class-conditioned shapes on textured backgrounds.
//!
//! The class fixes only the outline. Position, size, foreground color,
//! background color and texture are drawn independently of it, so color
//! statistics carry no label information. Shapes are drawn upright and the
//! texture is faint, so no class-independent orientation cue survives cropping
//! better than the outline does.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quantize, ImageDataset, Split};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const SHAPE_NAMES: [&str; 6] = ["disk", "square", "triangle", "cross", "ring", "bar"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub count: usize,
    pub size: usize,
    pub split: Split,
}

/// Render the dataset; labels are dropped for the pretrain split.
pub fn generate(spec: &SyntheticSpec) -> Result<ImageDataset> {
    if spec.classes < 2 || spec.classes > SHAPE_NAMES.len() {
        return Err(Error::config(format!("synthetic classes must lie in [2, {}]", SHAPE_NAMES.len())));
    }
    if spec.count == 0 || spec.size < 8 {
        return Err(Error::config("synthetic count must be positive and size at least 8"));
    }
    let root = RngStream::new(spec.seed).child(spec.split.code());
    let per = spec.size * spec.size * 3;
    let mut pixels = Vec::with_capacity(spec.count * per);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let class = i % spec.classes;
        render(class, spec.size, &mut root.child(i as u64).rng(), &mut pixels);
        labels.push(class as u16);
    }
    let labels = (spec.split != Split::Pretrain).then_some(labels);
    ImageDataset::new(spec.size, spec.size, pixels, labels, spec.classes, spec.split)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Point-in-shape test in shape-local coordinates (unit radius).
fn inside(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => u * u + v * v <= 1.0,
        1 => u.abs() <= 0.8 && v.abs() <= 0.8,
        // equilateral, circumradius 1, apex at v = -1
        2 => (-1.0..=0.5).contains(&v) && u.abs() <= (v + 1.0) / 3f64.sqrt(),
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => {
            let r2 = u * u + v * v;
            (0.36..=1.0).contains(&r2)
        }
        _ => u.abs() <= 1.0 && v.abs() <= 0.28,
    }
}

fn render(class: usize, size: usize, rng: &mut ChaCha8Rng, out: &mut Vec<u8>) {
    let bg = random_color(rng);
    let mut fg = random_color(rng);
    while distance(fg, bg) < 0.5 {
        fg = random_color(rng);
    }
    let texture = rng.gen_range(0..3u8);
    let amp = rng.gen_range(0.01..0.03);
    let freq = rng.gen_range(0.5..1.5);
    let angle: f64 = rng.gen_range(0.0..PI);
    let s = size as f64;
    let radius = rng.gen_range(0.34..0.46) * s;
    let cx = rng.gen_range(0.42 * s..0.58 * s);
    let cy = rng.gen_range(0.42 * s..0.58 * s);
    let (asin, acos) = angle.sin_cos();

    for y in 0..size {
        for x in 0..size {
            let shade = match texture {
                0 => amp * ((x as f64 * acos + y as f64 * asin) * freq).sin(),
                1 => amp * if ((x / 4) + (y / 4)) % 2 == 0 { 1.0 } else { -1.0 },
                _ => amp * (rng.gen::<f64>() * 2.0 - 1.0),
            };
            let mut coverage = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = (x as f64 + ox - cx) / radius;
                let dy = (y as f64 + oy - cy) / radius;
                if inside(class, dx, dy) {
                    coverage += 0.25;
                }
            }
            for c in 0..3 {
                let back = bg[c] + shade;
                out.push(quantize(coverage * fg[c] + (1.0 - coverage) * back));
            }
        }
    }
}
