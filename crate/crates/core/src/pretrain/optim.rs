use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Lars,
    AdamW,
}

/// Learning rate and weight decay come from schedules at each step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub nesterov: bool,
    #[serde(default = "default_trust")]
    pub trust_coefficient: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_trust() -> f64 {
    1e-3
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(momentum: f64, nesterov: bool) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum,
            nesterov,
            trust_coefficient: default_trust(),
            betas: default_betas(),
            eps: default_adam_eps(),
        }
    }

    pub fn lars(momentum: f64, trust_coefficient: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Lars, trust_coefficient, ..Self::sgd(momentum, false) }
    }

    pub fn adamw(betas: [f64; 2]) -> Self {
        OptimizerConfig { kind: OptimizerKind::AdamW, betas, ..Self::sgd(0.0, false) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("optimizer momentum {} outside [0, 1)", self.momentum)));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.eps > 0.0) {
            return Err(Error::config("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

/// Per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| p.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect::<Vec<_>>();
        let second = if config.kind == OptimizerKind::AdamW { zeros(params) } else { Vec::new() };
        Optimizer { config, first: zeros(params), second, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter. Biases and normalization parameters
    /// take no weight decay and no layer-wise adaptation.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::dim(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.steps += 1;
        let cfg = self.config.clone();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.value.shape() != g.shape() {
                return Err(Error::dim(format!("gradient shape {:?} for {} {:?}", g.shape(), p.name, p.value.shape())));
            }
            let excluded = p.kind.is_excluded();
            let wd = if excluded { 0.0 } else { weight_decay };
            let w = p.value.data_mut();
            match cfg.kind {
                OptimizerKind::Sgd => sgd_step(w, g.data(), self.first[i].data_mut(), lr, wd, cfg.momentum, cfg.nesterov),
                OptimizerKind::Lars if excluded => {
                    sgd_step(w, g.data(), self.first[i].data_mut(), lr, 0.0, cfg.momentum, cfg.nesterov)
                }
                OptimizerKind::Lars => {
                    lars_step(w, g.data(), self.first[i].data_mut(), lr, wd, cfg.momentum, cfg.trust_coefficient)
                }
                OptimizerKind::AdamW => adamw_step(
                    w,
                    g.data(),
                    self.first[i].data_mut(),
                    self.second[i].data_mut(),
                    lr,
                    wd,
                    cfg.betas,
                    cfg.eps,
                    self.steps,
                ),
            }
        }
        Ok(())
    }
}

fn sgd_step(w: &mut [f64], g: &[f64], buf: &mut [f64], lr: f64, wd: f64, momentum: f64, nesterov: bool) {
    for ((w, &g), b) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
        let d = if wd != 0.0 { g + wd * *w } else { g };
        *b = momentum * *b + d;
        let step = if nesterov { d + momentum * *b } else { *b };
        *w -= lr * step;
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn lars_step(w: &mut [f64], g: &[f64], buf: &mut [f64], lr: f64, wd: f64, momentum: f64, trust: f64) {
    let (wn, gn) = (norm(w), norm(g));
    let ratio = if wn > 0.0 && gn > 0.0 { trust * wn / (gn + wd * wn) } else { 1.0 };
    for ((w, &g), b) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
        *b = momentum * *b + ratio * (g + wd * *w);
        *w -= lr * *b;
    }
}

#[allow(clippy::too_many_arguments)]
fn adamw_step(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, wd: f64, betas: [f64; 2], eps: f64, t: u64) {
    let [b1, b2] = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *w *= 1.0 - lr * wd;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn set(kind: ParamKind, values: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("p", kind, Tensor::vector(values));
        p
    }

    #[test]
    fn vanilla_sgd_step() {
        let mut p = set(ParamKind::Weight, &[1.0, -2.0]);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.0, false), &p);
        opt.update(&mut p, &[Tensor::vector(&[0.5, 0.25])], 0.1, 0.0).unwrap();
        assert_eq!(p.at(0).value.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn lars_bias_matches_sgd_bitwise() {
        let g = [Tensor::vector(&[0.3, -0.7, 1e-3])];
        let mut a = set(ParamKind::Bias, &[0.2, 0.4, -1.0]);
        let mut b = a.clone();
        let mut lars = Optimizer::new(OptimizerConfig::lars(0.9, 1e-3), &a);
        let mut sgd = Optimizer::new(OptimizerConfig::sgd(0.9, false), &b);
        for _ in 0..5 {
            lars.update(&mut a, &g, 0.3, 1.5e-6).unwrap();
            sgd.update(&mut b, &g, 0.3, 0.0).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn lars_weight_uses_trust_ratio() {
        let mut p = set(ParamKind::Weight, &[3.0, 4.0]);
        let mut opt = Optimizer::new(OptimizerConfig::lars(0.0, 1e-3), &p);
        opt.update(&mut p, &[Tensor::vector(&[0.0, 10.0])], 1.0, 0.0).unwrap();
        let ratio = 1e-3 * 5.0 / 10.0;
        assert_eq!(p.at(0).value.data(), &[3.0, 4.0 - ratio * 10.0]);
    }

    #[test]
    fn adamw_zero_gradient_decays_geometrically() {
        let mut p = set(ParamKind::Weight, &[2.0, -1.0]);
        let mut opt = Optimizer::new(OptimizerConfig::adamw([0.9, 0.999]), &p);
        let (lr, wd) = (0.01, 0.1);
        for k in 1..=20 {
            opt.update(&mut p, &[Tensor::zeros([2])], lr, wd).unwrap();
            let f = (1.0 - lr * wd).powi(k);
            assert!((p.at(0).value.data()[0] - 2.0 * f).abs() < 1e-14);
        }
    }
}
