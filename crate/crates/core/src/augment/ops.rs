use rand::Rng;

use super::strategy::{ColorStrength, CropConfig, RatioDistribution};
use crate::data::Image;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const CROP_ATTEMPTS: usize = 10;

pub fn sample_ratio<R: Rng>(cfg: &CropConfig, rng: &mut R) -> f64 {
    let [lo, hi] = cfg.ratio_range;
    match cfg.ratio_distribution {
        RatioDistribution::Uniform => rng.gen_range(lo..=hi),
        RatioDistribution::Logarithmic => rng.gen_range(lo.ln()..=hi.ln()).exp(),
    }
}

/// Sample a sub-rectangle (area fraction, width/height ratio) and resize it
/// to `output_size`². Falls back to the centered largest square after
/// `CROP_ATTEMPTS` rejected samples.
pub fn random_resized_crop<R: Rng>(image: &Image, cfg: &CropConfig, rng: &mut R) -> Image {
    let (h, w) = (image.height(), image.width());
    let area = (h * w) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.gen_range(cfg.area_range[0]..=cfg.area_range[1]);
        let ratio = sample_ratio(cfg, rng);
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x0 = rng.gen_range(0..=w - cw);
            let y0 = rng.gen_range(0..=h - ch);
            return resize_region(image, y0, x0, ch, cw, cfg.output_size);
        }
    }
    let side = h.min(w);
    resize_region(image, (h - side) / 2, (w - side) / 2, side, side, cfg.output_size)
}

pub fn resize_bilinear(image: &Image, size: usize) -> Image {
    resize_region(image, 0, 0, image.height(), image.width(), size)
}

/// Bilinear resampling with half-pixel centers, clamped to the region.
fn resize_region(image: &Image, y0: usize, x0: usize, ch: usize, cw: usize, size: usize) -> Image {
    let taps = |start: usize, len: usize| -> Vec<(usize, usize, f64)> {
        (0..size)
            .map(|o| {
                let src = ((o as f64 + 0.5) * len as f64 / size as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (start + i0, start + i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(y0, ch);
    let xs = taps(x0, cw);
    let mut out = Vec::with_capacity(size * size * 3);
    for &(ya, yb, fy) in &ys {
        for &(xa, xb, fx) in &xs {
            let (p00, p01, p10, p11) = (image.pixel(ya, xa), image.pixel(ya, xb), image.pixel(yb, xa), image.pixel(yb, xb));
            for c in 0..3 {
                let top = p00[c] + (p01[c] - p00[c]) * fx;
                let bottom = p10[c] + (p11[c] - p10[c]) * fx;
                out.push((top + (bottom - top) * fy).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(size, size, out).expect("resize output has size²×3 values")
}

fn luma(p: &[f64]) -> f64 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

fn factor<R: Rng>(strength: f64, rng: &mut R) -> f64 {
    let lo = (1.0 - strength).max(0.0);
    if strength <= 0.0 {
        1.0
    } else {
        rng.gen_range(lo..=1.0 + strength)
    }
}

/// Brightness, contrast, saturation, hue, in that fixed order.
pub fn color_jitter<R: Rng>(image: &Image, s: &ColorStrength, rng: &mut R) -> Image {
    let b = factor(s.brightness, rng);
    let c = factor(s.contrast, rng);
    let sat = factor(s.saturation, rng);
    let hue = if s.hue > 0.0 { rng.gen_range(-s.hue..=s.hue) } else { 0.0 };

    let mut img = image.clone();
    for v in img.data_mut() {
        *v = (*v * b).clamp(0.0, 1.0);
    }
    let n = (img.height() * img.width()) as f64;
    let mean = img.data().chunks_exact(3).map(luma).sum::<f64>() / n;
    for v in img.data_mut() {
        *v = ((*v - mean) * c + mean).clamp(0.0, 1.0);
    }
    for p in img.pixels_mut() {
        let g = luma(p);
        for v in p.iter_mut() {
            *v = ((*v - g) * sat + g).clamp(0.0, 1.0);
        }
    }
    if hue != 0.0 {
        for p in img.pixels_mut() {
            let [h, sv, vv] = rgb_to_hsv([p[0], p[1], p[2]]);
            let rgb = hsv_to_rgb([(h + hue).rem_euclid(1.0), sv, vv]);
            for (d, x) in p.iter_mut().zip(rgb) {
                *d = x.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Hue in [0, 1) turns; saturation and value in [0, 1].
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn grayscale(image: &Image) -> Image {
    let mut img = image.clone();
    for p in img.pixels_mut() {
        let g = luma(p).clamp(0.0, 1.0);
        p.fill(g);
    }
    img
}

pub fn hflip(image: &Image) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut img = image.clone();
    for y in 0..h {
        for x in 0..w {
            img.set_pixel(y, x, image.pixel(y, w - 1 - x));
        }
    }
    img
}

/// Normalized Gaussian taps over [−r, r] with r = ceil(2σ).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (2.0 * sigma).ceil().max(1.0) as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror an out-of-range index without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (image.height(), image.width());
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (t, &kv) in k.iter().enumerate() {
                let sx = reflect(x as i64 + t as i64 - r, w);
                let i = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += kv * src[i + c];
                }
            }
            tmp[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (t, &kv) in k.iter().enumerate() {
                let sy = reflect(y as i64 + t as i64 - r, h);
                let i = (sy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += kv * tmp[i + c];
                }
            }
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = acc[c].clamp(0.0, 1.0);
            }
        }
    }
    Image::new(h, w, out).expect("blur preserves shape")
}

pub fn solarize(image: &Image, threshold: f64) -> Image {
    let mut img = image.clone();
    for v in img.data_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn solarize_pixel() {
        let img = Image::filled(1, 1, [0.7, 0.2, 0.5]);
        let out = solarize(&img, 0.5);
        assert!((out.data()[0] - 0.3).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.2);
        assert_eq!(out.data()[2], 0.5);
    }

    #[test]
    fn grayscale_fixed_point() {
        let data = (0..5 * 4).flat_map(|i| [i as f64 / 20.0; 3]).collect();
        let img = Image::new(5, 4, data).unwrap();
        let out = grayscale(&img);
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn blur_kernel_sums_to_one() {
        for sigma in [0.1, 1.0, 2.0] {
            let k = gaussian_kernel(sigma);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len(), 2 * (2.0 * sigma).ceil().max(1.0) as usize + 1);
        }
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let rgb = [rng.gen(), rng.gen(), rng.gen()];
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((rgb[c] - back[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hflip_twice_is_identity() {
        let data = (0..3 * 5 * 3).map(|i| i as f64 / 45.0).collect();
        let img = Image::new(3, 5, data).unwrap();
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(hflip(&img).pixel(1, 0), img.pixel(1, 4));
    }

    #[test]
    fn crop_output_size_and_full_crop() {
        let data = (0..20 * 12 * 3).map(|i| ((i * 31) % 97) as f64 / 97.0).collect();
        let img = Image::new(20, 12, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = CropConfig {
            area_range: [0.08, 1.0],
            ratio_range: [0.25, 1.33],
            ratio_distribution: RatioDistribution::Logarithmic,
            output_size: 9,
        };
        for _ in 0..100 {
            let out = random_resized_crop(&img, &cfg, &mut rng);
            assert_eq!((out.height(), out.width()), (9, 9));
        }
        let square = Image::new(6, 6, (0..108).map(|i| i as f64 / 108.0).collect()).unwrap();
        let full = CropConfig { area_range: [1.0, 1.0], ratio_range: [1.0, 1.0], output_size: 6, ..cfg };
        assert_eq!(random_resized_crop(&square, &full, &mut rng), square);
    }

    #[test]
    fn infeasible_crop_falls_back_to_center_square() {
        let data = (0..4 * 8 * 3).map(|i| i as f64 / 96.0).collect();
        let img = Image::new(4, 8, data).unwrap();
        let cfg = CropConfig {
            area_range: [1.0, 1.0],
            ratio_range: [1.0, 1.0],
            ratio_distribution: RatioDistribution::Uniform,
            output_size: 4,
        };
        let out = random_resized_crop(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.pixel(0, 0), img.pixel(0, 2));
        assert_eq!(out.pixel(3, 3), img.pixel(3, 5));
    }
}
