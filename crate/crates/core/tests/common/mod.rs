//! Independent oracles shared by the integration tests: seeded random
//! tensors, central finite differences and brute-force loss loops.

#![allow(dead_code)]

pub mod audit;
pub mod grad_cases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssl_desk::tensor::{Tape, Tensor, Var};
use ssl_desk::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_TOL: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let (u, v): (f64, f64) = (rng.gen_range(f64::MIN_POSITIVE..1.0), rng.gen());
            (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst violation of |numeric − analytic| ≤ rel·max(|numeric|, |analytic|) + abs,
/// reported as the ratio of the gap to the allowance (≤ 1 passes).
pub fn fd_violation(f: &dyn Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let y = f(&mut tape, v).unwrap();
    assert_eq!(tape.value(y).len(), 1, "objective must be scalar");
    tape.backward(y).unwrap();
    let grad = tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let eval = |t: Tensor| {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let y = f(&mut tape, v).unwrap();
        tape.value(y).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += FD_STEP;
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * FD_STEP);
        let analytic = grad.data()[i];
        let allowance = FD_REL_TOL * numeric.abs().max(analytic.abs()) + FD_ABS_TOL;
        worst = worst.max((numeric - analytic).abs() / allowance);
    }
    worst
}

/// Σ W ⊙ y for a fixed random W, turning any tensor output into a scalar objective.
pub fn weighted_sum(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape()[1];
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

fn normalize_rows(t: &Tensor) -> Vec<Vec<f64>> {
    rows(t)
        .into_iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / norm).collect()
        })
        .collect()
}

pub fn oracle_info_nce(preds: &Tensor, targets: &Tensor, tau: f64) -> f64 {
    let (p, t) = (rows(preds), rows(targets));
    let m = p.len();
    let mut total = 0.0;
    for a in 0..m {
        let logits: Vec<f64> =
            (0..m).map(|b| p[a].iter().zip(&t[b]).map(|(x, y)| x * y).sum::<f64>() / tau).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += logits[a] - lse;
    }
    -total / m as f64
}

pub fn oracle_l_sim(preds: &Tensor, targets: &Tensor) -> f64 {
    let (p, t) = (rows(preds), rows(targets));
    let mut total = 0.0;
    for (a, b) in p.iter().zip(&t) {
        for (x, y) in a.iter().zip(b) {
            total += (x - y) * (x - y);
        }
    }
    total / p.len() as f64
}

/// exp first, then `iters` rounds of: divide by column sums, divide by row sums.
pub fn oracle_sinkhorn(x: &Tensor, iters: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = rows(x).into_iter().map(|r| r.into_iter().map(f64::exp).collect()).collect();
    let (m, n) = (q.len(), q[0].len());
    for _ in 0..iters {
        for j in 0..n {
            let s: f64 = (0..m).map(|i| q[i][j]).sum();
            for row in q.iter_mut() {
                row[j] /= s + 1e-12;
            }
        }
        for row in q.iter_mut() {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s + 1e-12;
            }
        }
    }
    q
}

pub fn oracle_l_clu(preds: &Tensor, targets: &Tensor, tau_left: f64, tau_right: f64, iters: usize) -> f64 {
    let assign = oracle_sinkhorn(&targets.map(|v| v / tau_right), iters);
    let p = rows(preds);
    let mut total = 0.0;
    for (a, q) in p.iter().zip(&assign) {
        let logits: Vec<f64> = a.iter().map(|v| v / tau_left).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        for (l, w) in logits.iter().zip(q) {
            total += w * (l - lse);
        }
    }
    -total / p.len() as f64
}

pub fn oracle_l_cco(preds: &Tensor, targets: &Tensor, lambda: f64) -> f64 {
    let (p, t) = (rows(preds), rows(targets));
    let (m, n) = (p.len(), p[0].len());
    let col_norm = |r: &Vec<Vec<f64>>, j: usize| (0..m).map(|i| r[i][j] * r[i][j]).sum::<f64>().sqrt().max(1e-12);
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut c = 0.0;
            for b in 0..m {
                c += p[b][i] * t[b][j];
            }
            c /= col_norm(&p, i) * col_norm(&t, j);
            loss += if i == j { (1.0 - c) * (1.0 - c) } else { lambda * c * c };
        }
    }
    loss
}

pub fn normalized(t: &Tensor) -> Tensor {
    let r = normalize_rows(t);
    Tensor::from_rows(&r).unwrap()
}

/// Evaluate a two-argument loss on constants and return its value.
pub fn loss_value(
    f: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
    preds: &Tensor,
    targets: &Tensor,
) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(preds.clone());
    let t = tape.constant(targets.clone());
    let y = f(&mut tape, p, t).unwrap();
    tape.value(y).item().unwrap()
}

/// A seconds-scale experiment: 8×8 synthetic images, a quarter-width conv encoder.
pub fn tiny_experiment(preset: ssl_desk::Method, seeds: Vec<u64>, out: &std::path::Path) -> ssl_desk::harness::ExperimentConfig {
    use ssl_desk::data::{DatasetSource, Split, SyntheticSpec};
    use ssl_desk::harness::{DataConfig, DeskScale, ExperimentConfig};
    let mut cfg = ExperimentConfig::new(preset, seeds, 1, 16, out);
    cfg.desk = DeskScale { width_mult: 0.25, image_size: 8, local_size: 4, projector_divisor: 64, ..DeskScale::default() };
    let spec = |count, split| DatasetSource::Synthetic(SyntheticSpec { seed: 3, classes: 4, count, size: 8, split });
    cfg.data = DataConfig {
        pretrain: spec(64, Split::Pretrain),
        probe_train: spec(64, Split::ProbeTrain),
        probe_test: spec(64, Split::ProbeTest),
    };
    cfg.probe.epochs = 2;
    cfg.collapse_sample = 32;
    cfg
}
