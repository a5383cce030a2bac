//! Per-method pretraining recipes and their reduction to desk scale.

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationStrategy, StrategyName, ViewGeometry};
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::method::Method;
use crate::nn::{ablation_predictor, build_predictor, build_projector, EncoderConfig, EncoderFamily, TowerConfig};
use crate::pretrain::{MomentumSpec, OptimizerConfig, ScheduleSpec, TrainConfig};

/// Learning rates in presets are quoted for this batch size and scaled linearly.
pub const REFERENCE_BATCH: f64 = 256.0;

/// Right-tower update weight shared by every momentum preset at desk scale.
pub const DESK_EPSILON: f64 = 0.01;

/// How full-size architectures shrink to run on a desk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeskScale {
    pub encoder: EncoderFamily,
    pub width_mult: f64,
    pub image_size: usize,
    pub local_size: usize,
    /// Every projector and predictor width is divided by this (floor 8).
    pub projector_divisor: usize,
    /// Multiplies every learning-rate value of the preset.
    pub lr_multiplier: f64,
}

impl Default for DeskScale {
    fn default() -> Self {
        DeskScale {
            encoder: EncoderFamily::TinyConv,
            width_mult: 0.5,
            image_size: 16,
            local_size: 8,
            projector_divisor: 16,
            lr_multiplier: 1.0,
        }
    }
}

impl DeskScale {
    pub fn geometry(&self) -> ViewGeometry {
        ViewGeometry { global_size: self.image_size, local_size: self.local_size }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { family: self.encoder, width_mult: self.width_mult, input_size: self.image_size }
    }
}

/// A method's recipe. Learning-rate values are per `REFERENCE_BATCH` examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodPreset {
    pub method: Method,
    pub predictor: bool,
    pub momentum: Option<MomentumSpec>,
    pub loss: LossSpec,
    pub tau_right: Option<ScheduleSpec>,
    pub optimizer: OptimizerConfig,
    pub lr: ScheduleSpec,
    pub weight_decay: ScheduleSpec,
    pub strategy: StrategyName,
    /// Epoch budget of the original recipe; desk runs set their own.
    pub reference_epochs: u64,
}

const MOMENTUM: Option<MomentumSpec> = Some(MomentumSpec { epsilon: DESK_EPSILON, cosine_ramp: false });

impl MethodPreset {
    pub fn of(method: Method) -> Self {
        let lars = OptimizerConfig::lars(0.9, 1e-3);
        let adam = OptimizerConfig::adamw([0.9, 0.999]);
        let lars_lr = |base: f64, epochs: f64| ScheduleSpec::warmup_cosine(0.0, base, 0.0, 10.0 / epochs);
        match method {
            Method::SimClr => MethodPreset {
                method,
                predictor: false,
                momentum: None,
                loss: LossSpec::nce(0.1),
                tau_right: None,
                optimizer: lars,
                lr: lars_lr(0.3, 1000.0),
                weight_decay: ScheduleSpec::constant(1.5e-6),
                strategy: StrategyName::Simclr,
                reference_epochs: 1000,
            },
            Method::Byol => MethodPreset {
                method,
                predictor: true,
                momentum: MOMENTUM,
                loss: LossSpec::sim(),
                tau_right: None,
                optimizer: lars,
                lr: lars_lr(0.2, 1000.0),
                weight_decay: ScheduleSpec::constant(1.5e-6),
                strategy: StrategyName::Byol,
                reference_epochs: 1000,
            },
            Method::MocoV2 => MethodPreset {
                method,
                predictor: true,
                momentum: MOMENTUM,
                loss: LossSpec::nce(0.1),
                tau_right: None,
                optimizer: lars,
                lr: lars_lr(0.3, 1000.0),
                weight_decay: ScheduleSpec::constant(1.5e-6),
                strategy: StrategyName::Simclr,
                reference_epochs: 1000,
            },
            Method::Swav => MethodPreset {
                method,
                predictor: false,
                momentum: None,
                loss: LossSpec::clu(0.1, 0.05),
                tau_right: None,
                optimizer: lars,
                lr: ScheduleSpec::warmup_cosine(0.3 / 16.0, 0.3, 0.3 * 1e-3, 10.0 / 800.0),
                weight_decay: ScheduleSpec::constant(1e-6),
                strategy: StrategyName::Multicrop,
                reference_epochs: 800,
            },
            Method::Dino => MethodPreset {
                method,
                predictor: false,
                momentum: MOMENTUM,
                loss: LossSpec::clu(0.1, 0.05),
                tau_right: Some(ScheduleSpec::cosine(0.05, 0.025)),
                optimizer: adam,
                lr: ScheduleSpec::warmup_cosine(0.0625 * 7.5e-4, 7.5e-4, 0.25e-6, 30.0 / 400.0),
                weight_decay: ScheduleSpec::cosine(0.04, 0.4),
                strategy: StrategyName::Multicrop,
                reference_epochs: 400,
            },
            Method::MocoV3 => MethodPreset {
                method,
                predictor: true,
                momentum: MOMENTUM,
                loss: LossSpec::nce(0.2),
                tau_right: None,
                optimizer: adam,
                lr: ScheduleSpec::warmup_cosine(0.0, 1.5e-4, 0.0, 40.0 / 300.0),
                weight_decay: ScheduleSpec::constant(0.1),
                strategy: StrategyName::Byol,
                reference_epochs: 300,
            },
        }
    }

    pub fn all() -> Vec<MethodPreset> {
        Method::ALL.iter().map(|&m| Self::of(m)).collect()
    }

    /// Learning-rate schedule for `batch_size`, scaled linearly from the reference batch.
    pub fn scaled_lr(&self, batch_size: usize, multiplier: f64) -> ScheduleSpec {
        let f = multiplier * batch_size as f64 / REFERENCE_BATCH;
        ScheduleSpec { start: self.lr.start * f, peak: self.lr.peak * f, end: self.lr.end * f, ..self.lr }
    }

    pub fn tower_config(&self, desk: &DeskScale, predictor: bool) -> Result<TowerConfig> {
        let predictor = match (predictor, build_predictor(self.method, desk.projector_divisor)) {
            (false, _) => None,
            (true, Some(p)) => Some(p),
            (true, None) => Some(ablation_predictor(self.method, desk.projector_divisor)),
        };
        Ok(TowerConfig {
            encoder: desk.encoder_config(),
            projector: build_projector(self.method, desk.projector_divisor)?,
            predictor,
        })
    }

    /// A complete pretraining configuration. `predictor`/`momentum` of `None`
    /// keep the preset's own flags; all other hyperparameters stay at preset values.
    pub fn train_config(&self, run: &RunShape, desk: &DeskScale) -> Result<TrainConfig> {
        if desk.projector_divisor == 0 {
            return Err(Error::config("projector divisor must be at least 1"));
        }
        let predictor = run.predictor.unwrap_or(self.predictor);
        let momentum = match run.momentum {
            None => self.momentum,
            Some(false) => None,
            Some(true) => Some(self.momentum.unwrap_or(MomentumSpec { epsilon: DESK_EPSILON, cosine_ramp: false })),
        };
        let strategy = run.strategy.unwrap_or(self.strategy);
        let cfg = TrainConfig {
            tower: self.tower_config(desk, predictor)?,
            loss: self.loss.clone(),
            tau_right: self.tau_right,
            optimizer: self.optimizer.clone(),
            lr: self.scaled_lr(run.batch_size, desk.lr_multiplier),
            weight_decay: self.weight_decay,
            momentum,
            strategy: AugmentationStrategy::preset(strategy, desk.geometry()),
            batch_size: run.batch_size,
            epochs: run.epochs,
            seed: run.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The per-run knobs layered on a preset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunShape {
    pub strategy: Option<StrategyName>,
    pub predictor: Option<bool>,
    pub momentum: Option<bool>,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
}
