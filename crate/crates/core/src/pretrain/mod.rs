//! The training step: augment, embed with both towers, predict, aggregate
//! the pairwise loss, update the left tower and predictor, then move the
//! right tower toward the left one.

mod optim;
mod schedule;

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationStrategy, RngStream};
use crate::data::{batches, BatchPlan, ImageDataset};
use crate::error::{Error, Result};
use crate::losses::{aggregate, LossSpec, PairWeight};
use crate::nn::{Mode, ParamSet, Predictor, Tower, TowerConfig, Weights};
use crate::tensor::{Tape, Tensor, Var};

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use schedule::{Schedule, ScheduleKind, ScheduleSpec};

/// Right-tower update weight ε. With `cosine_ramp`, ε decays to 0 over
/// training along a half cosine, so 1 − ε rises to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSpec {
    pub epsilon: f64,
    #[serde(default)]
    pub cosine_ramp: bool,
}

impl MomentumSpec {
    pub fn value(&self, step: u64, total: u64) -> f64 {
        if !self.cosine_ramp || total == 0 {
            return self.epsilon;
        }
        let t = step.min(total) as f64 / total as f64;
        self.epsilon * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// Everything one pretraining run needs, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tower: TowerConfig,
    pub loss: LossSpec,
    /// Overrides `loss.tau_right` along training when present.
    pub tau_right: Option<ScheduleSpec>,
    pub optimizer: OptimizerConfig,
    pub lr: ScheduleSpec,
    pub weight_decay: ScheduleSpec,
    /// `None` shares the left tower as the right tower.
    pub momentum: Option<MomentumSpec>,
    pub strategy: AugmentationStrategy,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.strategy.validate()?;
        self.tower.encoder.validate()?;
        if let Some(m) = &self.momentum {
            if !(0.0..=1.0).contains(&m.epsilon) {
                return Err(Error::config(format!("momentum epsilon {} outside [0, 1]", m.epsilon)));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        Ok(())
    }

    pub fn pair_weights(&self) -> Result<PairWeight> {
        PairWeight::globals_as_targets(self.strategy.global_count(), self.strategy.view_count())
    }
}

/// Network structure shared by both towers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub tower: Tower,
    pub predictor: Predictor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub left: Weights,
    /// `None` when the right tower is the left tower.
    pub right: Option<Weights>,
    pub predictor: Weights,
    pub tower_optimizer: Optimizer,
    pub predictor_optimizer: Optimizer,
    pub step: u64,
    pub epoch: u64,
}

impl TrainState {
    /// Initialize both towers from `seed`; a momentum right tower starts as a copy of the left.
    pub fn init(cfg: &TrainConfig) -> Result<(Model, TrainState)> {
        let root = RngStream::new(cfg.seed);
        let (tower, left) = Tower::build(&cfg.tower, root.child(1).key())?;
        let dim = cfg.tower.embedding_dim();
        let (predictor, pweights) = Predictor::build(cfg.tower.predictor.as_ref(), dim, root.child(2).key())?;
        let state = TrainState {
            right: cfg.momentum.map(|_| left.clone()),
            tower_optimizer: Optimizer::new(cfg.optimizer.clone(), &left.params),
            predictor_optimizer: Optimizer::new(cfg.optimizer.clone(), &pweights.params),
            left,
            predictor: pweights,
            step: 0,
            epoch: 0,
        };
        Ok((Model { tower, predictor }, state))
    }

    pub fn right_weights(&self) -> &Weights {
        self.right.as_ref().unwrap_or(&self.left)
    }

    pub fn is_shared(&self) -> bool {
        self.right.is_none()
    }
}

/// θʳ ← ε θˡ + (1 − ε) θʳ for every parameter.
pub fn momentum_update(left: &ParamSet, right: &mut ParamSet, epsilon: f64) -> Result<()> {
    left.check_layout(right, "momentum update")?;
    for (l, r) in left.iter().zip(right.iter_mut()) {
        for (rv, &lv) in r.value.data_mut().iter_mut().zip(l.value.data()) {
            *rv = epsilon * lv + (1.0 - epsilon) * *rv;
        }
    }
    Ok(())
}

/// Hyperparameter values in effect for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub tau_right: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Largest absolute gradient entry on the right tower, when it has its own parameters.
    pub right_grad_max: Option<f64>,
}

fn grads_of(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
        .collect()
}

/// One optimization step on pre-augmented views (`views[k]` is `[M, S, S, 3]`).
pub fn train_step(
    model: &Model,
    state: &mut TrainState,
    views: &[Tensor],
    cfg: &TrainConfig,
    hyper: StepHyper,
) -> Result<StepOutcome> {
    let weights = cfg.pair_weights()?;
    if views.len() != weights.views() {
        return Err(Error::dim(format!("{} views for a {}-view strategy", views.len(), weights.views())));
    }
    let mut loss_spec = cfg.loss.clone();
    loss_spec.tau_right = hyper.tau_right;

    let mut tape = Tape::new();
    let left_vars = state.left.params.bind(&mut tape, true);
    let pred_vars = state.predictor.params.bind(&mut tape, true);

    let mut embeddings = Vec::with_capacity(views.len());
    let mut preds = Vec::with_capacity(views.len());
    for v in views {
        let x = tape.constant(v.clone());
        let z = model.tower.forward(&mut tape, &left_vars, &mut state.left.buffers, x, Mode::Train)?.embedding;
        preds.push(model.predictor.forward(&mut tape, &pred_vars, &mut state.predictor.buffers, z, Mode::Train)?);
        embeddings.push(z);
    }

    let mut targets: Vec<Option<Var>> = vec![None; views.len()];
    let mut right_vars = Vec::new();
    match state.right.as_mut() {
        None => {
            for l in weights.target_views() {
                targets[l] = Some(embeddings[l]);
            }
        }
        Some(right) => {
            right_vars = right.params.bind(&mut tape, true);
            for l in weights.target_views() {
                let x = tape.constant(views[l].clone());
                let z = model.tower.forward(&mut tape, &right_vars, &mut right.buffers, x, Mode::Train)?.embedding;
                targets[l] = Some(tape.stop_gradient(z)?);
            }
        }
    }

    let loss_var = aggregate(&mut tape, &preds, &targets, &weights, &loss_spec)?;
    let loss = tape.value(loss_var).item()?;
    if !loss.is_finite() {
        return Err(Error::Diverged { step: state.step, loss });
    }
    tape.backward(loss_var)?;

    let right_grad_max = (!right_vars.is_empty()).then(|| {
        grads_of(&tape, &right_vars).iter().flat_map(|g| g.data().iter().map(|v| v.abs())).fold(0.0, f64::max)
    });
    let tower_grads = grads_of(&tape, &left_vars);
    let pred_grads = grads_of(&tape, &pred_vars);
    drop(tape);

    state.tower_optimizer.update(&mut state.left.params, &tower_grads, hyper.lr, hyper.weight_decay)?;
    state.predictor_optimizer.update(&mut state.predictor.params, &pred_grads, hyper.lr, hyper.weight_decay)?;
    if let Some(right) = state.right.as_mut() {
        momentum_update(&state.left.params, &mut right.params, hyper.epsilon)?;
    }
    state.step += 1;
    Ok(StepOutcome { loss, right_grad_max })
}

/// Augment a batch into K view tensors `[M, S, S, 3]`.
pub fn make_views(
    data: &ImageDataset,
    indices: &[usize],
    strategy: &AugmentationStrategy,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Tensor>> {
    let root = RngStream::new(seed).child(0xA0C);
    let per_example: Vec<Vec<_>> = indices
        .iter()
        .map(|&i| strategy.apply(&data.image(i), root.derive(&[epoch, i as u64])))
        .collect();
    (0..strategy.view_count())
        .map(|k| {
            let first = &per_example[0][k];
            let (h, w) = (first.height(), first.width());
            let mut buf = Vec::with_capacity(indices.len() * h * w * 3);
            for views in &per_example {
                buf.extend_from_slice(views[k].data());
            }
            Tensor::new([indices.len(), h, w, 3], buf)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub epsilon: f64,
}

pub struct Schedules {
    pub lr: Schedule,
    pub weight_decay: Schedule,
    pub tau_right: Option<Schedule>,
    pub total_steps: u64,
}

impl Schedules {
    pub fn resolve(cfg: &TrainConfig, steps_per_epoch: u64) -> Result<Self> {
        let total = steps_per_epoch * cfg.epochs;
        Ok(Schedules {
            lr: cfg.lr.resolve(total)?,
            weight_decay: cfg.weight_decay.resolve(total)?,
            tau_right: cfg.tau_right.map(|s| s.resolve(total)).transpose()?,
            total_steps: total,
        })
    }

    pub fn at(&self, cfg: &TrainConfig, step: u64) -> StepHyper {
        StepHyper {
            lr: self.lr.value(step),
            weight_decay: self.weight_decay.value(step),
            tau_right: self.tau_right.map_or(cfg.loss.tau_right, |s| s.value(step)),
            epsilon: cfg.momentum.map_or(0.0, |m| m.value(step, self.total_steps)),
        }
    }
}

pub struct PretrainOutcome {
    pub model: Model,
    pub state: TrainState,
    pub log: Vec<StepLog>,
}

/// Full pretraining run. Augmentation of the next batches runs on a helper
/// thread ahead of the optimizer (bounded to two batches); views depend only
/// on (seed, epoch, example), so the overlap does not change results.
pub fn pretrain(cfg: &TrainConfig, data: &ImageDataset) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let (model, mut state) = TrainState::init(cfg)?;
    let plan = |epoch| BatchPlan { seed: cfg.seed, epoch, batch_size: cfg.batch_size, drop_remainder: true };
    let steps_per_epoch = batches(data.len(), &plan(0))?.len() as u64;
    let schedules = Schedules::resolve(cfg, steps_per_epoch)?;
    let mut log = Vec::with_capacity(schedules.total_steps as usize);

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<(u64, Vec<Tensor>)>>(2);
        scope.spawn(move || {
            for epoch in 0..cfg.epochs {
                let blocks = match batches(data.len(), &plan(epoch)) {
                    Ok(b) => b,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                };
                for block in blocks {
                    let item = make_views(data, &block, &cfg.strategy, cfg.seed, epoch).map(|v| (epoch, v));
                    if tx.send(item).is_err() {
                        return;
                    }
                }
            }
        });
        for item in rx {
            let (epoch, views) = item?;
            state.epoch = epoch;
            let hyper = schedules.at(cfg, state.step);
            let step = state.step;
            let out = train_step(&model, &mut state, &views, cfg, hyper)?;
            log.push(StepLog {
                step,
                epoch,
                loss: out.loss,
                lr: hyper.lr,
                weight_decay: hyper.weight_decay,
                temperature: hyper.tau_right,
                epsilon: hyper.epsilon,
            });
        }
        Ok(())
    })?;
    Ok(PretrainOutcome { model, state, log })
}

/// CSV with columns step, epoch, loss, lr, wd, temperature, epsilon.
pub fn write_loss_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,epoch,loss,lr,wd,temperature,epsilon")?;
    for r in log {
        writeln!(f, "{},{},{:e},{:e},{:e},{:e},{:e}", r.step, r.epoch, r.loss, r.lr, r.weight_decay, r.temperature, r.epsilon)?;
    }
    f.flush()?;
    Ok(())
}
