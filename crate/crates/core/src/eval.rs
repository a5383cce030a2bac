//! Linear probing of frozen encoders and representation-health metrics.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{hflip, random_resized_crop, CropConfig, RatioDistribution, RngStream};
use crate::data::{Image, ImageDataset};
use crate::error::{Error, Result};
use crate::nn::{Mode, Tower, Weights};
use crate::pretrain::{Schedule, ScheduleKind};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    Representation,
    /// Token-plus-pooled features; needs a token encoder, which no desk encoder has.
    RepresentationPooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak of the cosine learning-rate schedule.
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Augmented feature copies per training image, cycled over epochs.
    pub augmented_copies: usize,
    pub crop_area: [f64; 2],
    pub feature_source: FeatureSource,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 20,
            batch_size: 256,
            lr: 0.5,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0,
            augmented_copies: 2,
            crop_area: [0.35, 1.0],
            feature_source: FeatureSource::Representation,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.augmented_copies == 0 {
            return Err(Error::config("probe epochs, batch size and augmented copies must be at least 1"));
        }
        if self.feature_source == FeatureSource::RepresentationPooled {
            return Err(Error::config("representation-pooled features need a token encoder; use representation"));
        }
        Ok(())
    }
}

/// Encoder outputs `[N, R]` of a frozen tower in eval mode.
pub fn extract_features(tower: &Tower, weights: &Weights, images: &[Image]) -> Result<Tensor> {
    let mut buffers = weights.buffers.clone();
    let r = tower.config.representation_dim();
    let mut out = Vec::with_capacity(images.len() * r);
    for chunk in images.chunks(256) {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        let data: Vec<f64> = chunk.iter().flat_map(|i| i.data().iter().copied()).collect();
        let mut tape = Tape::new();
        let vars = weights.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::new([chunk.len(), h, w, 3], data)?);
        let rep = tower.encode(&mut tape, &vars, &mut buffers, x, Mode::Eval)?;
        out.extend_from_slice(tape.value(rep).data());
    }
    Tensor::new([images.len(), r], out)
}

/// Tower embeddings `[N, I]` in eval mode, each row l2-normalized.
pub fn extract_embeddings(tower: &Tower, weights: &Weights, images: &[Image]) -> Result<Tensor> {
    let mut buffers = weights.buffers.clone();
    let dim = tower.config.embedding_dim();
    let mut out = Vec::with_capacity(images.len() * dim);
    for chunk in images.chunks(256) {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        let data: Vec<f64> = chunk.iter().flat_map(|i| i.data().iter().copied()).collect();
        let mut tape = Tape::new();
        let vars = weights.params.bind(&mut tape, false);
        let x = tape.constant(Tensor::new([chunk.len(), h, w, 3], data)?);
        let z = tower.forward(&mut tape, &vars, &mut buffers, x, Mode::Eval)?.embedding;
        let z = tape.l2_normalize(z, 1, 1e-12)?;
        out.extend_from_slice(tape.value(z).data());
    }
    Tensor::new([images.len(), dim], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    /// Population standard deviation per dimension, averaged over dimensions.
    pub mean_std: f64,
    /// exp(entropy) of the normalized singular values.
    pub effective_rank: f64,
}

pub fn collapse_metrics(embeddings: &Tensor) -> Result<CollapseMetrics> {
    if embeddings.rank() != 2 || embeddings.shape()[0] < 2 {
        return Err(Error::dim(format!("collapse metrics need [M ≥ 2, I], got {:?}", embeddings.shape())));
    }
    let (m, n) = (embeddings.shape()[0], embeddings.shape()[1]);
    let d = embeddings.data();
    let mut std_sum = 0.0;
    for j in 0..n {
        let mean = (0..m).map(|i| d[i * n + j]).sum::<f64>() / m as f64;
        let var = (0..m).map(|i| (d[i * n + j] - mean).powi(2)).sum::<f64>() / m as f64;
        std_sum += var.sqrt();
    }
    let sv = DMatrix::from_row_slice(m, n, d).singular_values();
    let total: f64 = sv.iter().sum();
    let effective_rank = if total > 0.0 {
        let entropy: f64 = sv.iter().filter(|&&s| s > 0.0).map(|&s| -(s / total) * (s / total).ln()).sum();
        entropy.exp()
    } else {
        1.0
    };
    Ok(CollapseMetrics { mean_std: std_sum / n as f64, effective_rank })
}

/// Per-trial accuracies with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub trials: Vec<f64>,
    pub mean: f64,
    pub std: Option<f64>,
}

pub fn summarize(trials: &[f64]) -> Result<ProbeResult> {
    if trials.is_empty() {
        return Err(Error::config("cannot summarize zero trials"));
    }
    let n = trials.len() as f64;
    let mean = trials.iter().sum::<f64>() / n;
    let std = (trials.len() >= 2)
        .then(|| (trials.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Ok(ProbeResult { trials: trials.to_vec(), mean, std })
}

/// Per-dimension shift and scale that standardize `x` (rows are examples).
/// Near-constant dimensions keep unit scale.
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Tensor) -> Self {
        let (n, dim) = (x.shape()[0], x.shape()[1]);
        let mut mean = vec![0.0; dim];
        for row in x.data().chunks(dim) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut var = vec![0.0; dim];
        for row in x.data().chunks(dim) {
            var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n as f64);
        }
        let inv_std = var.iter().map(|&v| if v.sqrt() > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Standardizer { mean, inv_std }
    }

    fn apply(&self, k: usize, v: f64) -> f64 {
        (v - self.mean[k]) * self.inv_std[k]
    }
}

/// Softmax regression trained by minibatch SGD on fixed features.
/// `train[c]` is one augmented copy of the training features; epoch `e` uses copy `e % len`.
pub fn train_linear(
    train: &[Tensor],
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let first = train.first().ok_or_else(|| Error::config("no training features"))?;
    let (n, dim) = (first.shape()[0], first.shape()[1]);
    if train.iter().any(|t| t.shape() != first.shape()) || train_labels.len() != n {
        return Err(Error::dim("probe training features and labels disagree"));
    }
    if test.shape().get(1) != Some(&dim) || test_labels.len() != test.shape()[0] {
        return Err(Error::dim("probe test features and labels disagree"));
    }
    if train_labels.iter().chain(test_labels).any(|&l| l >= classes) {
        return Err(Error::config(format!("labels must lie in [0, {classes})")));
    }
    let scale = Standardizer::fit(first);

    let mut w = vec![0.0; dim * classes];
    let mut b = vec![0.0; classes];
    let mut vw = vec![0.0; dim * classes];
    let mut vb = vec![0.0; classes];
    let bs = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs) as u64;
    let lr = Schedule::new(ScheduleKind::Cosine, cfg.lr, cfg.lr, 0.0, 0, steps_per_epoch * cfg.epochs as u64)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    let mut gw = vec![0.0; dim * classes];
    let mut gb = vec![0.0; classes];
    let mut logits = vec![0.0; classes];
    for epoch in 0..cfg.epochs {
        let feats = train[epoch % train.len()].data();
        order.shuffle(&mut RngStream::new(seed).derive(&[0x9B0BE, epoch as u64]).rng());
        for block in order.chunks(bs) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for &i in block {
                let x = &feats[i * dim..(i + 1) * dim];
                forward_logits(x, &w, &b, &scale, &mut logits);
                softmax_in_place(&mut logits);
                logits[train_labels[i]] -= 1.0;
                for (k, x) in x.iter().enumerate() {
                    let xs = scale.apply(k, *x);
                    for c in 0..classes {
                        gw[k * classes + c] += xs * logits[c];
                    }
                }
                for c in 0..classes {
                    gb[c] += logits[c];
                }
            }
            let inv = 1.0 / block.len() as f64;
            let rate = lr.value(step);
            let sgd = |p: &mut [f64], v: &mut [f64], g: &[f64], decay: f64| {
                for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    let d = g * inv + decay * *p;
                    *v = cfg.momentum * *v + d;
                    let s = if cfg.nesterov { d + cfg.momentum * *v } else { *v };
                    *p -= rate * s;
                }
            };
            sgd(&mut w, &mut vw, &gw, cfg.weight_decay);
            sgd(&mut b, &mut vb, &gb, 0.0);
            step += 1;
        }
    }

    let td = test.data();
    let correct = (0..test_labels.len())
        .filter(|&i| {
            forward_logits(&td[i * dim..(i + 1) * dim], &w, &b, &scale, &mut logits);
            argmax(&logits) == test_labels[i]
        })
        .count();
    Ok(correct as f64 / test_labels.len().max(1) as f64)
}

fn forward_logits(x: &[f64], w: &[f64], b: &[f64], scale: &Standardizer, out: &mut [f64]) {
    let classes = b.len();
    out.copy_from_slice(b);
    for (k, &xv) in x.iter().enumerate() {
        let xs = scale.apply(k, xv);
        for c in 0..classes {
            out[c] += xs * w[k * classes + c];
        }
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

fn labels_of(ds: &ImageDataset) -> Result<Vec<usize>> {
    let labels = ds.labels().ok_or_else(|| Error::config("probe datasets must be labeled"))?;
    Ok(labels.iter().map(|&l| l as usize).collect())
}

/// Train a linear classifier on frozen representations of `train` (crop and
/// flip augmented) and report top-1 accuracy on the unaugmented `test` set.
pub fn linear_probe(
    tower: &Tower,
    weights: &Weights,
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    if train.classes() != test.classes() {
        return Err(Error::config("probe train and test sets disagree on class count"));
    }
    let (train_labels, test_labels) = (labels_of(train)?, labels_of(test)?);
    let crop = CropConfig {
        area_range: cfg.crop_area,
        ratio_range: [0.75, 4.0 / 3.0],
        ratio_distribution: RatioDistribution::Uniform,
        output_size: train.height(),
    };
    crop.validate()?;
    let root = RngStream::new(seed).child(0x9B0);
    let mut copies = Vec::with_capacity(cfg.augmented_copies);
    for c in 0..cfg.augmented_copies {
        let images: Vec<Image> = (0..train.len())
            .map(|i| {
                let mut rng = root.derive(&[c as u64, i as u64]).rng();
                let img = random_resized_crop(&train.image(i), &crop, &mut rng);
                if rand::Rng::gen_bool(&mut rng, 0.5) {
                    hflip(&img)
                } else {
                    img
                }
            })
            .collect();
        copies.push(extract_features(tower, weights, &images)?);
    }
    let test_images: Vec<Image> = (0..test.len()).map(|i| test.image(i)).collect();
    let test_feats = extract_features(tower, weights, &test_images)?;
    train_linear(&copies, &train_labels, &test_feats, &test_labels, train.classes(), cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn collapse_metric_examples() {
        let constant = Tensor::full([6, 4], 0.3);
        let c = collapse_metrics(&constant).unwrap();
        assert_eq!(c.mean_std, 0.0);
        assert!((c.effective_rank - 1.0).abs() < 1e-9);
        assert_eq!(collapse_metrics(&Tensor::zeros([3, 3])).unwrap().effective_rank, 1.0);

        let eye = collapse_metrics(&Tensor::eye(5)).unwrap();
        assert!((eye.effective_rank - 5.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gauss: Vec<f64> = (0..256 * 32)
            .map(|_| {
                let (u, v): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
                (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
            })
            .collect();
        let r = collapse_metrics(&Tensor::new([256, 32], gauss).unwrap()).unwrap().effective_rank;
        assert!((28.0..=32.0).contains(&r), "{r}");
    }

    #[test]
    fn summarize_examples() {
        let one = summarize(&[0.5]).unwrap();
        assert_eq!((one.mean, one.std), (0.5, None));
        let two = summarize(&[0.4, 0.6]).unwrap();
        assert!((two.mean - 0.5).abs() < 1e-15);
        assert!((two.std.unwrap() - 0.141421356).abs() < 1e-6);
        assert_eq!(summarize(&[0.7; 5]).unwrap().std, Some(0.0));
    }

    #[test]
    fn constant_features_give_majority_rate() {
        let train = Tensor::full([40, 3], 1.0);
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i % 4 == 0)).collect();
        let test = Tensor::full([10, 3], 1.0);
        let test_labels: Vec<usize> = (0..10).map(|i| usize::from(i < 3)).collect();
        let acc = train_linear(&[train], &labels, &test, &test_labels, 2, &ProbeConfig::default(), 0).unwrap();
        assert!((acc - 0.7).abs() < 1e-12);
    }
}
