//! Image datasets, the synthetic shape generator and minibatch planning.

mod raw;
mod synthetic;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub use raw::{read_raw_rgb, write_raw_rgb, RAW_MAGIC};
pub use synthetic::{generate, SyntheticSpec, SHAPE_NAMES};

/// H×W×3 image with values in [0, 1], row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::dim(format!("image {height}×{width}×3 cannot hold {} values", data.len())));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.data.chunks_exact_mut(3)
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Binary PPM (P6) encoding, 8 bits per channel.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        out
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    ProbeTrain,
    ProbeTest,
}

impl Split {
    pub(crate) fn code(self) -> u64 {
        match self {
            Split::Pretrain => 0,
            Split::ProbeTrain => 1,
            Split::ProbeTest => 2,
        }
    }
}

/// N images of identical size stored as u8 and exposed as [0, 1] floats.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    labels: Option<Vec<u16>>,
    classes: usize,
    split: Split,
}

impl ImageDataset {
    pub fn new(
        height: usize,
        width: usize,
        pixels: Vec<u8>,
        labels: Option<Vec<u16>>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = height * width * 3;
        if per == 0 || !pixels.len().is_multiple_of(per) {
            return Err(Error::dim(format!("{} pixel bytes is not a whole number of {height}×{width} images", pixels.len())));
        }
        let n = pixels.len() / per;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::dim(format!("{} labels for {n} images", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&c| c as usize >= classes) {
                return Err(Error::Domain(format!("label {bad} outside [0, {classes})")));
            }
        }
        Ok(ImageDataset { height, width, pixels, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / (self.height * self.width * 3)
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i] as usize)
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> Image {
        let per = self.height * self.width * 3;
        let data = self.pixels[i * per..(i + 1) * per].iter().map(|&b| b as f64 / 255.0).collect();
        Image { height: self.height, width: self.width, data }
    }

    /// The same images with labels removed, for the pretraining path.
    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Fraction of the most frequent label.
    pub fn majority_rate(&self) -> Option<f64> {
        let labels = self.labels.as_ref()?;
        let mut counts = vec![0usize; self.classes.max(1)];
        for &l in labels {
            counts[l as usize] += 1;
        }
        Some(*counts.iter().max()? as f64 / labels.len().max(1) as f64)
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    RawRgb { path: PathBuf, split: Split },
}

pub fn load(source: &DatasetSource) -> Result<ImageDataset> {
    match source {
        DatasetSource::Synthetic(spec) => generate(spec),
        DatasetSource::RawRgb { path, split } => {
            let bytes = std::fs::read(path)?;
            read_raw_rgb(&bytes, *split)
        }
    }
}

/// Shuffled minibatch partition of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub epoch: u64,
    pub batch_size: usize,
    pub drop_remainder: bool,
}

pub fn batches(n: usize, plan: &BatchPlan) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 || plan.batch_size > n {
        return Err(Error::config(format!("batch size {} must lie in [1, {n}]", plan.batch_size)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStream::new(plan.seed).derive(&[0xBA7C, plan.epoch]).rng());
    Ok(order
        .chunks(plan.batch_size)
        .filter(|c| !plan.drop_remainder || c.len() == plan.batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}
