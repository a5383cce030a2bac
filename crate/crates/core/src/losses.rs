//! Pretext-task losses between predictions ẑ (left) and targets z (right),
//! and their weighted aggregation over view pairs.
//!
//! All losses take `[M, I]` batches recorded on a [`Tape`]. Targets are used
//! as given; callers that freeze the right tower pass stop-gradient targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Contrastive InfoNCE.
    Nce,
    /// Squared distance.
    Sim,
    /// Cross-entropy against Sinkhorn cluster assignments.
    Clu,
    /// Cross-correlation.
    Cco,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub tau: f64,
    pub tau_left: f64,
    pub tau_right: f64,
    pub lambda: f64,
    pub sinkhorn_iters: usize,
    pub normalize_embeddings: bool,
}

impl LossSpec {
    pub fn nce(tau: f64) -> Self {
        LossSpec { kind: LossKind::Nce, tau, normalize_embeddings: true, ..Self::defaults() }
    }

    pub fn sim() -> Self {
        LossSpec { kind: LossKind::Sim, normalize_embeddings: true, ..Self::defaults() }
    }

    pub fn clu(tau_left: f64, tau_right: f64) -> Self {
        LossSpec { kind: LossKind::Clu, tau_left, tau_right, ..Self::defaults() }
    }

    pub fn cco(lambda: f64) -> Self {
        LossSpec { kind: LossKind::Cco, lambda, ..Self::defaults() }
    }

    fn defaults() -> Self {
        LossSpec {
            kind: LossKind::Sim,
            tau: 0.1,
            tau_left: 0.1,
            tau_right: 0.05,
            lambda: 5e-3,
            sinkhorn_iters: 3,
            normalize_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau", self.tau), ("tau_left", self.tau_left), ("tau_right", self.tau_right)] {
            if !(t > 0.0) {
                return Err(Error::config(format!("loss {name} must be positive, got {t}")));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!("loss lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Loss between one prediction block and one target block.
    pub fn pair(&self, tape: &mut Tape, preds: Var, targets: Var) -> Result<Var> {
        let (p, t) = if self.normalize_embeddings {
            (tape.l2_normalize(preds, 1, 1e-12)?, tape.l2_normalize(targets, 1, 1e-12)?)
        } else {
            (preds, targets)
        };
        match self.kind {
            LossKind::Nce => info_nce(tape, p, t, self.tau),
            LossKind::Sim => l_sim(tape, p, t),
            LossKind::Clu => l_clu(tape, p, t, self.tau_left, self.tau_right, self.sinkhorn_iters),
            LossKind::Cco => l_cco(tape, p, t, self.lambda),
        }
    }
}

fn check_pair(tape: &Tape, preds: Var, targets: Var) -> Result<(usize, usize)> {
    let (ps, ts) = (tape.shape(preds), tape.shape(targets));
    if ps.len() != 2 || ps != ts {
        return Err(Error::dim(format!("loss expects matching [M, I] blocks, got {ps:?} and {ts:?}")));
    }
    Ok((ps[0], ps[1]))
}

/// −(1/M) Σ_m log softmax(ẑ_m zᵀ / τ)_m.
pub fn info_nce(tape: &mut Tape, preds: Var, targets: Var, tau: f64) -> Result<Var> {
    let (m, _) = check_pair(tape, preds, targets)?;
    if m < 2 {
        return Err(Error::config("InfoNCE needs at least two rows to form negatives"));
    }
    let tt = tape.transpose(targets)?;
    let logits = tape.matmul(preds, tt)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let logp = tape.log_softmax(logits, 1)?;
    let eye = tape.constant(Tensor::eye(m));
    let diag = tape.mul(logp, eye)?;
    let total = tape.sum_all(diag)?;
    tape.scale(total, -1.0 / m as f64)
}

/// (1/M) Σ_m ‖ẑ_m − z_m‖².
pub fn l_sim(tape: &mut Tape, preds: Var, targets: Var) -> Result<Var> {
    let (m, _) = check_pair(tape, preds, targets)?;
    let d = tape.sub(preds, targets)?;
    let sq = tape.square(d)?;
    let total = tape.sum_all(sq)?;
    tape.scale(total, 1.0 / m as f64)
}

const SINKHORN_EPS: f64 = 1e-12;

/// exp(x) followed by `iters` rounds of column then row normalization.
/// Column sums run over the batch index, row sums over features.
pub fn sinkhorn(x: &Tensor, iters: usize) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim(format!("sinkhorn expects [M, I], got {:?}", x.shape())));
    }
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut q = x.map(f64::exp);
    let d = q.data_mut();
    for _ in 0..iters {
        let mut col = vec![0.0; n];
        for row in d.chunks_exact(n) {
            for (c, v) in col.iter_mut().zip(row) {
                *c += v;
            }
        }
        for row in d.chunks_exact_mut(n) {
            for (v, c) in row.iter_mut().zip(&col) {
                *v /= c + SINKHORN_EPS;
            }
        }
        for row in d.chunks_exact_mut(n) {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s + SINKHORN_EPS;
            }
        }
    }
    debug_assert_eq!(d.len(), m * n);
    Ok(q)
}

/// −(1/M) Σ_m Σ_i Sinkhorn(z/τʳ)_{mi} · log softmax(ẑ_m/τˡ)_i.
/// The Sinkhorn assignments are constants on the tape.
pub fn l_clu(tape: &mut Tape, preds: Var, targets: Var, tau_left: f64, tau_right: f64, iters: usize) -> Result<Var> {
    let (m, _) = check_pair(tape, preds, targets)?;
    let scaled = tape.value(targets).map(|v| v / tau_right);
    let assign = tape.constant(sinkhorn(&scaled, iters)?);
    let logits = tape.scale(preds, 1.0 / tau_left)?;
    let logp = tape.log_softmax(logits, 1)?;
    let weighted = tape.mul(assign, logp)?;
    let total = tape.sum_all(weighted)?;
    tape.scale(total, -1.0 / m as f64)
}

/// Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij², with C the column-normalized ẑᵀz
/// (no mean centering).
pub fn l_cco(tape: &mut Tape, preds: Var, targets: Var, lambda: f64) -> Result<Var> {
    let (m, n) = check_pair(tape, preds, targets)?;
    if m < 2 {
        return Err(Error::config("cross-correlation loss needs at least two rows"));
    }
    let pn = tape.l2_normalize(preds, 0, 1e-12)?;
    let tn = tape.l2_normalize(targets, 0, 1e-12)?;
    let pt = tape.transpose(pn)?;
    let c = tape.matmul(pt, tn)?;
    let eye = Tensor::eye(n);
    let off = eye.map(|v| 1.0 - v);
    let eye = tape.constant(eye);
    let off = tape.constant(off);
    let centered = tape.sub(c, eye)?;
    let sq = tape.square(centered)?;
    let on_diag = tape.mul(sq, eye)?;
    let on_diag = tape.sum_all(on_diag)?;
    let csq = tape.square(c)?;
    let off_diag = tape.mul(csq, off)?;
    let off_diag = tape.sum_all(off_diag)?;
    let off_diag = tape.scale(off_diag, lambda)?;
    tape.add(on_diag, off_diag)
}

/// View-pair weights M(k, l) over K views.
#[derive(Clone, Debug, PartialEq)]
pub struct PairWeight {
    views: usize,
    weights: Vec<f64>,
}

impl PairWeight {
    pub fn new(views: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != views * views {
            return Err(Error::dim(format!("{views} views need {} pair weights, got {}", views * views, weights.len())));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("pair weights must be non-negative"));
        }
        if !weights.iter().any(|&w| w > 0.0) {
            return Err(Error::config("pair weights are all zero"));
        }
        Ok(PairWeight { views, weights })
    }

    /// M(k, l) = 1 when view l is global and k ≠ l. Globals come first.
    pub fn globals_as_targets(globals: usize, views: usize) -> Result<Self> {
        let weights = (0..views * views)
            .map(|i| {
                let (k, l) = (i / views, i % views);
                if l < globals && k != l {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self::new(views, weights)
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.weights[k * self.views + l]
    }

    /// Positive-weight pairs (k, l, M(k, l)).
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.views * self.views)
            .map(move |i| (i / self.views, i % self.views, self.weights[i]))
            .filter(|&(_, _, w)| w > 0.0)
    }

    /// Views that appear as a target in at least one pair.
    pub fn target_views(&self) -> Vec<usize> {
        (0..self.views).filter(|&l| (0..self.views).any(|k| self.get(k, l) > 0.0)).collect()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Σ_{k,l} M(k,l)·L(ẑ_k, z_l) / Σ M. `targets[l]` may be `None` for views
/// outside the target support.
pub fn aggregate(tape: &mut Tape, preds: &[Var], targets: &[Option<Var>], weights: &PairWeight, spec: &LossSpec) -> Result<Var> {
    if preds.len() != weights.views() || targets.len() != weights.views() {
        return Err(Error::dim(format!(
            "{} predictions and {} targets for {} views",
            preds.len(),
            targets.len(),
            weights.views()
        )));
    }
    let mut total: Option<Var> = None;
    for (k, l, w) in weights.pairs() {
        let target = targets[l].ok_or_else(|| Error::Usage(format!("view {l} is a target but has no embedding")))?;
        let loss = spec.pair(tape, preds[k], target)?;
        let term = tape.scale(loss, w)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = total.expect("PairWeight has a positive entry");
    tape.scale(total, 1.0 / weights.total())
}
