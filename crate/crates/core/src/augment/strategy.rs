use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioDistribution {
    Uniform,
    /// ln(ratio) uniform on [ln lo, ln hi].
    Logarithmic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub area_range: [f64; 2],
    pub ratio_range: [f64; 2],
    pub ratio_distribution: RatioDistribution,
    pub output_size: usize,
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        let [alo, ahi] = self.area_range;
        let [rlo, rhi] = self.ratio_range;
        if !(0.0 < alo && alo <= ahi && ahi <= 1.0) {
            return Err(Error::config(format!("crop area range {:?} must satisfy 0 < lo ≤ hi ≤ 1", self.area_range)));
        }
        if !(0.0 < rlo && rlo <= rhi) {
            return Err(Error::config(format!("crop ratio range {:?} must satisfy 0 < lo ≤ hi", self.ratio_range)));
        }
        if self.output_size == 0 {
            return Err(Error::config("crop output size must be positive"));
        }
        Ok(())
    }
}

/// Jitter strengths: factors in [max(0, 1 − s), 1 + s]; hue shift in [−s, s] turns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorStrength {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Crop,
    ColorJitter,
    Grayscale,
    HFlip,
    Blur,
    Solarize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpConfig {
    Crop(CropConfig),
    ColorJitter { strength: ColorStrength, probability: f64 },
    Grayscale { probability: f64 },
    HFlip { probability: f64 },
    Blur { sigma_range: [f64; 2], probability: f64 },
    Solarize { threshold: f64, probability: f64 },
}

impl OpConfig {
    pub fn kind(&self) -> OpKind {
        match self {
            OpConfig::Crop(_) => OpKind::Crop,
            OpConfig::ColorJitter { .. } => OpKind::ColorJitter,
            OpConfig::Grayscale { .. } => OpKind::Grayscale,
            OpConfig::HFlip { .. } => OpKind::HFlip,
            OpConfig::Blur { .. } => OpKind::Blur,
            OpConfig::Solarize { .. } => OpKind::Solarize,
        }
    }

    /// `None` for the crop, which always runs.
    pub fn probability(&self) -> Option<f64> {
        match *self {
            OpConfig::Crop(_) => None,
            OpConfig::ColorJitter { probability, .. }
            | OpConfig::Grayscale { probability }
            | OpConfig::HFlip { probability }
            | OpConfig::Blur { probability, .. }
            | OpConfig::Solarize { probability, .. } => Some(probability),
        }
    }

    pub fn set_probability(&mut self, p: f64) {
        match self {
            OpConfig::Crop(_) => {}
            OpConfig::ColorJitter { probability, .. }
            | OpConfig::Grayscale { probability }
            | OpConfig::HFlip { probability }
            | OpConfig::Blur { probability, .. }
            | OpConfig::Solarize { probability, .. } => *probability = p,
        }
    }
}

/// Ordered ops for one view group; starts with a crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPipeline {
    pub ops: Vec<OpConfig>,
}

impl ViewPipeline {
    pub fn crop(&self) -> Option<&CropConfig> {
        self.ops.iter().find_map(|o| match o {
            OpConfig::Crop(c) => Some(c),
            _ => None,
        })
    }

    pub fn output_size(&self) -> Option<usize> {
        self.crop().map(|c| c.output_size)
    }

    /// Probability of `kind`; 0 when the op is absent, 1 for the crop.
    pub fn probability(&self, kind: OpKind) -> f64 {
        self.ops.iter().find(|o| o.kind() == kind).map_or(0.0, |o| o.probability().unwrap_or(1.0))
    }

    pub fn validate(&self) -> Result<()> {
        match self.ops.first() {
            Some(OpConfig::Crop(c)) => c.validate()?,
            _ => return Err(Error::config("every view pipeline must start with a crop")),
        }
        for op in &self.ops[1..] {
            let p = op.probability().ok_or_else(|| Error::config("a pipeline may contain only one crop"))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{:?} probability {p} outside [0, 1]", op.kind())));
            }
            if let OpConfig::Blur { sigma_range: [lo, hi], .. } = *op {
                if !(0.0 < lo && lo <= hi) {
                    return Err(Error::config("blur sigma range must satisfy 0 < lo ≤ hi"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Crop,
    CropColor,
    Simclr,
    Byol,
    Multicrop,
}

impl StrategyName {
    pub const ALL: [StrategyName; 5] =
        [StrategyName::Crop, StrategyName::CropColor, StrategyName::Simclr, StrategyName::Byol, StrategyName::Multicrop];

    pub fn name(self) -> &'static str {
        match self {
            StrategyName::Crop => "crop",
            StrategyName::CropColor => "crop_color",
            StrategyName::Simclr => "simclr",
            StrategyName::Byol => "byol",
            StrategyName::Multicrop => "multicrop",
        }
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyName::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::config(format!("unknown augmentation strategy `{s}`")))
    }
}

/// Output sizes of global and local views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewGeometry {
    pub global_size: usize,
    pub local_size: usize,
}

impl Default for ViewGeometry {
    fn default() -> Self {
        ViewGeometry { global_size: 32, local_size: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalViews {
    pub pipeline: ViewPipeline,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationStrategy {
    pub name: StrategyName,
    pub globals: Vec<ViewPipeline>,
    pub local: Option<LocalViews>,
}

const RATIO: [f64; 2] = [0.25, 1.33];
const STRONG: ColorStrength = ColorStrength { brightness: 0.8, contrast: 0.8, saturation: 0.8, hue: 0.2 };
const MILD: ColorStrength = ColorStrength { brightness: 0.4, contrast: 0.4, saturation: 0.2, hue: 0.1 };
const SIGMA: [f64; 2] = [0.1, 2.0];

fn crop(area: [f64; 2], dist: RatioDistribution, size: usize) -> OpConfig {
    OpConfig::Crop(CropConfig { area_range: area, ratio_range: RATIO, ratio_distribution: dist, output_size: size })
}

/// Crop, jitter, grayscale, flip, blur, solarize, in that order.
fn full_pipeline(crop_op: OpConfig, color: ColorStrength, blur: f64, solarize: Option<f64>) -> ViewPipeline {
    let mut ops = vec![
        crop_op,
        OpConfig::ColorJitter { strength: color, probability: 0.8 },
        OpConfig::Grayscale { probability: 0.2 },
        OpConfig::HFlip { probability: 0.5 },
        OpConfig::Blur { sigma_range: SIGMA, probability: blur },
    ];
    if let Some(p) = solarize {
        ops.push(OpConfig::Solarize { threshold: 0.5, probability: p });
    }
    ViewPipeline { ops }
}

impl AugmentationStrategy {
    pub fn preset(name: StrategyName, geometry: ViewGeometry) -> Self {
        use RatioDistribution::{Logarithmic, Uniform};
        let g = geometry.global_size;
        let wide = [0.08, 1.0];
        let (globals, local) = match name {
            StrategyName::Crop => (vec![ViewPipeline { ops: vec![crop(wide, Uniform, g)] }; 2], None),
            StrategyName::CropColor => {
                let p = ViewPipeline {
                    ops: vec![crop(wide, Uniform, g), OpConfig::ColorJitter { strength: STRONG, probability: 0.8 }],
                };
                (vec![p; 2], None)
            }
            StrategyName::Simclr => (vec![full_pipeline(crop(wide, Uniform, g), STRONG, 0.5, None); 2], None),
            StrategyName::Byol => (
                vec![
                    full_pipeline(crop(wide, Logarithmic, g), MILD, 1.0, Some(0.0)),
                    full_pipeline(crop(wide, Logarithmic, g), MILD, 0.1, Some(0.2)),
                ],
                None,
            ),
            StrategyName::Multicrop => (
                vec![
                    full_pipeline(crop([0.25, 1.0], Logarithmic, g), MILD, 1.0, Some(0.0)),
                    full_pipeline(crop([0.25, 1.0], Logarithmic, g), MILD, 0.1, Some(0.2)),
                ],
                Some(LocalViews {
                    pipeline: full_pipeline(crop([0.08, 0.25], Logarithmic, geometry.local_size), MILD, 0.5, Some(0.0)),
                    count: 10,
                }),
            ),
        };
        AugmentationStrategy { name, globals, local }
    }

    pub fn global_count(&self) -> usize {
        self.globals.len()
    }

    pub fn local_count(&self) -> usize {
        self.local.as_ref().map_or(0, |l| l.count)
    }

    /// K = globals + locals.
    pub fn view_count(&self) -> usize {
        self.global_count() + self.local_count()
    }

    /// One pipeline per view, globals first.
    pub fn pipelines(&self) -> impl Iterator<Item = &ViewPipeline> {
        let locals = self.local.iter().flat_map(|l| std::iter::repeat_n(&l.pipeline, l.count));
        self.globals.iter().chain(locals)
    }

    /// Per view group (each global, then the local group) probability of `kind`.
    pub fn probabilities(&self, kind: OpKind) -> Vec<f64> {
        self.globals.iter().chain(self.local.iter().map(|l| &l.pipeline)).map(|p| p.probability(kind)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.globals.is_empty() {
            return Err(Error::config("a strategy needs at least one global view"));
        }
        self.pipelines().try_for_each(ViewPipeline::validate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_view_probability_lists() {
        let g = ViewGeometry::default();
        let byol = AugmentationStrategy::preset(StrategyName::Byol, g);
        assert_eq!(byol.probabilities(OpKind::Solarize), vec![0.0, 0.2]);
        assert_eq!(byol.probabilities(OpKind::Blur), vec![1.0, 0.1]);
        let multi = AugmentationStrategy::preset(StrategyName::Multicrop, g);
        assert_eq!(multi.local_count(), 10);
        assert_eq!(multi.probabilities(OpKind::Blur), vec![1.0, 0.1, 0.5]);
        assert_eq!(multi.probabilities(OpKind::Solarize), vec![0.0, 0.2, 0.0]);
        let crop = AugmentationStrategy::preset(StrategyName::Crop, g);
        for kind in [OpKind::ColorJitter, OpKind::Grayscale, OpKind::HFlip, OpKind::Blur, OpKind::Solarize] {
            assert_eq!(crop.probabilities(kind), vec![0.0, 0.0]);
        }
        for name in StrategyName::ALL {
            let s = AugmentationStrategy::preset(name, g);
            s.validate().unwrap();
            assert_eq!(s.global_count(), 2);
            assert_eq!(name.name().parse::<StrategyName>().unwrap(), name);
        }
    }

    #[test]
    fn serde_round_trip() {
        let s = AugmentationStrategy::preset(StrategyName::Multicrop, ViewGeometry::default());
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<AugmentationStrategy>(&text).unwrap(), s);
    }
}
