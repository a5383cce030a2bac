use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamKind, ParamSet, Weights};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
/// Weight on the previous running statistic.
pub const BN_STAT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// One step of a [`Network`]. Indices point into the owning [`Weights`].
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { weight: usize, bias: Option<usize> },
    /// Dense layer whose effective weight columns are renormalized to unit length.
    WeightNormDense { direction: usize },
    BatchNorm { gamma: usize, beta: usize, running_mean: usize, running_var: usize },
    Conv { weight: usize, bias: usize, kernel: usize, pad: usize },
    AvgPool2,
    /// Average-pool NHWC input down to a fixed `side × side` grid.
    AdaptivePool(usize),
    GlobalAvgPool,
    Flatten,
    Relu,
    Gelu,
    L2Normalize,
}

/// Ordered list of layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], buffers: &mut ParamSet, x: Var, mode: Mode) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, layer| apply(layer, tape, vars, buffers, h, mode))
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }
}

fn apply(layer: &Layer, tape: &mut Tape, vars: &[Var], buffers: &mut ParamSet, x: Var, mode: Mode) -> Result<Var> {
    match *layer {
        Layer::Dense { weight, bias } => {
            let y = tape.matmul(x, vars[weight])?;
            match bias {
                Some(b) => tape.add(y, vars[b]),
                None => Ok(y),
            }
        }
        Layer::WeightNormDense { direction } => {
            let w = tape.l2_normalize(vars[direction], 0, 1e-12)?;
            tape.matmul(x, w)
        }
        Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
            let shape = tape.shape(x).to_vec();
            if shape.len() != 2 && shape.len() != 4 {
                return Err(Error::dim(format!("batchnorm expects [M, F] or [M, H, W, F], got {shape:?}")));
            }
            // Spatial inputs normalize each channel over batch and positions.
            let features = shape[shape.len() - 1];
            let x = tape.reshape(x, [shape.iter().product::<usize>() / features.max(1), features])?;
            let normalized = match mode {
                Mode::Train => {
                    let mean = tape.mean(x, 0)?;
                    let centered = tape.sub(x, mean)?;
                    let sq = tape.square(centered)?;
                    let var = tape.mean(sq, 0)?;
                    let var_eps = tape.shift(var, BN_EPS)?;
                    let std = tape.sqrt(var_eps)?;
                    let out = tape.div(centered, std)?;
                    let (bm, bv) = (tape.value(mean).clone(), tape.value(var).clone());
                    blend(&mut buffers.at_mut(running_mean).value, &bm);
                    blend(&mut buffers.at_mut(running_var).value, &bv);
                    out
                }
                Mode::Eval => {
                    let rm = tape.constant(buffers.at(running_mean).value.clone());
                    let rstd = buffers.at(running_var).value.map(|v| (v + BN_EPS).sqrt());
                    let rstd = tape.constant(rstd);
                    let centered = tape.sub(x, rm)?;
                    tape.div(centered, rstd)?
                }
            };
            let scaled = tape.mul(normalized, vars[gamma])?;
            let y = tape.add(scaled, vars[beta])?;
            tape.reshape(y, shape)
        }
        Layer::Conv { weight, bias, kernel, pad } => {
            let y = tape.conv2d(x, vars[weight], kernel, pad, 1)?;
            tape.add(y, vars[bias])
        }
        Layer::AvgPool2 => tape.avg_pool2(x),
        Layer::AdaptivePool(side) => {
            let s = tape.shape(x).to_vec();
            if s.len() != 4 || !s[1].is_multiple_of(side) || !s[2].is_multiple_of(side) {
                return Err(Error::dim(format!("adaptive pool to {side}×{side} needs NHWC divisible input, got {s:?}")));
            }
            let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
            let (bh, bw) = (h / side, w / side);
            if bh == 1 && bw == 1 {
                return Ok(x);
            }
            let r = tape.reshape(x, [n, side, bh, side, bw, c])?;
            let r = tape.mean(r, 4)?;
            tape.mean(r, 2)
        }
        Layer::GlobalAvgPool => {
            let s = tape.shape(x).to_vec();
            if s.len() != 4 {
                return Err(Error::dim(format!("global pool expects NHWC, got {s:?}")));
            }
            let r = tape.reshape(x, [s[0], s[1] * s[2], s[3]])?;
            tape.mean(r, 1)
        }
        Layer::Flatten => {
            let s = tape.shape(x).to_vec();
            let rest: usize = s[1..].iter().product();
            tape.reshape(x, [s[0], rest])
        }
        Layer::Relu => tape.relu(x),
        Layer::Gelu => tape.gelu(x),
        Layer::L2Normalize => tape.l2_normalize(x, 1, 1e-12),
    }
}

fn blend(running: &mut Tensor, batch: &Tensor) {
    for (r, b) in running.data_mut().iter_mut().zip(batch.data()) {
        *r = BN_STAT_MOMENTUM * *r + (1.0 - BN_STAT_MOMENTUM) * b;
    }
}

/// Incrementally assembles a network's layers and initialized weights.
pub(crate) struct Builder<'a> {
    pub weights: &'a mut Weights,
    pub rng: &'a mut ChaCha8Rng,
    pub layers: Vec<Layer>,
    pub prefix: String,
}

impl<'a> Builder<'a> {
    fn uniform(&mut self, shape: [usize; 2], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape[0] * shape[1];
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    fn name(&self, layer: usize, what: &str) -> String {
        format!("{}.{}.{}", self.prefix, layer, what)
    }

    pub fn dense(&mut self, fan_in: usize, fan_out: usize, bias: bool) {
        let i = self.layers.len();
        let w = self.uniform([fan_in, fan_out], fan_in);
        let name = self.name(i, "weight");
        let weight = self.weights.params.push(name, ParamKind::Weight, w);
        let bias = bias.then(|| {
            let name = self.name(i, "bias");
            self.weights.params.push(name, ParamKind::Bias, Tensor::zeros([fan_out]))
        });
        self.layers.push(Layer::Dense { weight, bias });
    }

    pub fn weight_norm_dense(&mut self, fan_in: usize, fan_out: usize) {
        let i = self.layers.len();
        let v = self.uniform([fan_in, fan_out], fan_in);
        let name = self.name(i, "direction");
        let direction = self.weights.params.push(name, ParamKind::Weight, v);
        self.layers.push(Layer::WeightNormDense { direction });
    }

    pub fn batch_norm(&mut self, features: usize) {
        let i = self.layers.len();
        let p = &mut self.weights.params;
        let gamma = p.push(format!("{}.{}.gamma", self.prefix, i), ParamKind::NormScale, Tensor::ones([features]));
        let beta = p.push(format!("{}.{}.beta", self.prefix, i), ParamKind::NormShift, Tensor::zeros([features]));
        let b = &mut self.weights.buffers;
        let running_mean =
            b.push(format!("{}.{}.running_mean", self.prefix, i), ParamKind::Buffer, Tensor::zeros([features]));
        let running_var =
            b.push(format!("{}.{}.running_var", self.prefix, i), ParamKind::Buffer, Tensor::ones([features]));
        self.layers.push(Layer::BatchNorm { gamma, beta, running_mean, running_var });
    }

    pub fn conv(&mut self, in_ch: usize, out_ch: usize, kernel: usize) {
        let i = self.layers.len();
        let fan_in = kernel * kernel * in_ch;
        let w = self.uniform([fan_in, out_ch], fan_in);
        let wn = self.name(i, "weight");
        let bn = self.name(i, "bias");
        let weight = self.weights.params.push(wn, ParamKind::Weight, w);
        let bias = self.weights.params.push(bn, ParamKind::Bias, Tensor::zeros([out_ch]));
        self.layers.push(Layer::Conv { weight, bias, kernel, pad: kernel / 2 });
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn finish(self) -> Network {
        Network { layers: self.layers }
    }
}
