//! Stochastic multi-view augmentation.
//!
//! A strategy holds one pipeline per global view plus an optional local
//! pipeline repeated `count` times. Each view of each example draws from its
//! own [`RngStream`], and each op in the pipeline from a child of that stream,
//! so a view is a pure function of (image, strategy, seed, epoch, example).

mod ops;
mod strategy;

use rand::Rng;

use crate::data::Image;
pub use crate::rng::RngStream;
pub use ops::{
    color_jitter, gaussian_blur, gaussian_kernel, grayscale, hflip, hsv_to_rgb, random_resized_crop, resize_bilinear,
    rgb_to_hsv, sample_ratio, solarize, LUMA,
};
pub use strategy::{
    AugmentationStrategy, ColorStrength, CropConfig, LocalViews, OpConfig, OpKind, RatioDistribution, StrategyName, ViewGeometry,
    ViewPipeline,
};

/// Which probabilistic ops fired for one view, in pipeline order.
pub type Trace = Vec<(OpKind, bool)>;

impl ViewPipeline {
    /// Run the pipeline; op `j` draws from `stream.child(j)`.
    pub fn apply(&self, image: &Image, stream: RngStream) -> Image {
        self.apply_traced(image, stream).0
    }

    pub fn apply_traced(&self, image: &Image, stream: RngStream) -> (Image, Trace) {
        let mut img = image.clone();
        let mut trace = Trace::new();
        for (j, op) in self.ops.iter().enumerate() {
            let mut rng = stream.child(j as u64).rng();
            let fire = match op.probability() {
                None => true,
                Some(p) => rng.gen::<f64>() < p,
            };
            if op.probability().is_some() {
                trace.push((op.kind(), fire));
            }
            if !fire {
                continue;
            }
            img = match op {
                OpConfig::Crop(cfg) => random_resized_crop(&img, cfg, &mut rng),
                OpConfig::ColorJitter { strength, .. } => color_jitter(&img, strength, &mut rng),
                OpConfig::Grayscale { .. } => grayscale(&img),
                OpConfig::HFlip { .. } => hflip(&img),
                OpConfig::Blur { sigma_range, .. } => {
                    let sigma = rng.gen_range(sigma_range[0]..=sigma_range[1]);
                    gaussian_blur(&img, sigma)
                }
                OpConfig::Solarize { threshold, .. } => solarize(&img, *threshold),
            };
        }
        (img, trace)
    }
}

impl AugmentationStrategy {
    /// All K views: globals first, then locals. View `v` uses `stream.child(v)`.
    pub fn apply(&self, image: &Image, stream: RngStream) -> Vec<Image> {
        self.pipelines().enumerate().map(|(v, p)| p.apply(image, stream.child(v as u64))).collect()
    }

    pub fn apply_traced(&self, image: &Image, stream: RngStream) -> Vec<(Image, Trace)> {
        self.pipelines().enumerate().map(|(v, p)| p.apply_traced(image, stream.child(v as u64))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image() -> Image {
        let data = (0..32 * 32 * 3).map(|i| ((i * 7919) % 256) as f64 / 255.0).collect();
        Image::new(32, 32, data).unwrap()
    }

    #[test]
    fn crop_strategy_shapes_and_range() {
        let s = AugmentationStrategy::preset(StrategyName::Crop, ViewGeometry::default());
        let views = s.apply(&test_image(), RngStream::new(3));
        assert_eq!(views.len(), 2);
        for v in &views {
            assert_eq!((v.height(), v.width()), (32, 32));
            assert!(v.in_unit_range());
        }
    }

    #[test]
    fn identity_configuration_returns_resized_original() {
        let mut s = AugmentationStrategy::preset(StrategyName::Simclr, ViewGeometry::default());
        for p in s.globals.iter_mut() {
            for op in p.ops.iter_mut() {
                op.set_probability(0.0);
                if let OpConfig::Crop(c) = op {
                    c.area_range = [1.0, 1.0];
                    c.ratio_range = [1.0, 1.0];
                }
            }
        }
        let img = test_image();
        for v in s.apply(&img, RngStream::new(11)) {
            assert_eq!(v, img);
        }
    }

    #[test]
    fn same_stream_same_views() {
        let s = AugmentationStrategy::preset(StrategyName::Multicrop, ViewGeometry::default());
        let a = s.apply(&test_image(), RngStream::new(5).derive(&[0, 9]));
        let b = s.apply(&test_image(), RngStream::new(5).derive(&[0, 9]));
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert_eq!(a[11].height(), 16);
        let c = s.apply(&test_image(), RngStream::new(5).derive(&[0, 10]));
        assert_ne!(a, c);
    }
}
