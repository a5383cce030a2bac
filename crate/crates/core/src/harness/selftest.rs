//! A fast oracle and invariant suite runnable from the CLI on any build.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::preset::MethodPreset;
use crate::augment::{AugmentationStrategy, RngStream, StrategyName, ViewGeometry};
use crate::data::{generate, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{info_nce, l_cco, l_clu, l_sim, sinkhorn};
use crate::method::Method;
use crate::nn::{checkpoint, EncoderConfig, EncoderFamily, ProjectorSpec, Tower, TowerConfig};
use crate::pretrain::momentum_update;
use crate::tensor::{Tape, Tensor, Var};

pub struct Check {
    pub name: &'static str,
    pub outcome: Result<()>,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Numeric(msg()))
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

type Scalar<'a> = dyn Fn(&mut Tape, Var) -> Result<Var> + 'a;

/// Largest central-difference mismatch of d f / d x, relative to max(|g|, 1e-3).
pub fn gradient_mismatch(f: &Scalar<'_>, x: &Tensor, step: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let y = f(&mut tape, v)?;
    tape.backward(y)?;
    let grad = tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let y = f(&mut tape, v)?;
        tape.value(y).item()
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += step;
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let analytic = grad.data()[i];
        worst = worst.max((numeric - analytic).abs() / analytic.abs().max(1e-3));
    }
    Ok(worst)
}

fn gradients() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let target = random(&mut rng, &[4, 3]);
    let weights = random(&mut rng, &[4, 3]);
    let weighted = |tape: &mut Tape, y: Var| -> Result<Var> {
        let w = tape.constant(weights.clone());
        let p = tape.mul(y, w)?;
        tape.sum_all(p)
    };
    let cases: Vec<(&str, Box<Scalar<'_>>)> = vec![
        ("softmax", Box::new(|t: &mut Tape, x| {
            let y = t.softmax(x, 1)?;
            weighted(t, y)
        })),
        ("l2_normalize", Box::new(|t: &mut Tape, x| {
            let y = t.l2_normalize(x, 1, 1e-12)?;
            weighted(t, y)
        })),
        ("gelu", Box::new(|t: &mut Tape, x| {
            let y = t.gelu(x)?;
            weighted(t, y)
        })),
        ("info_nce", Box::new(|t: &mut Tape, x| {
            let c = t.constant(target.clone());
            info_nce(t, x, c, 0.1)
        })),
        ("l_sim", Box::new(|t: &mut Tape, x| {
            let c = t.constant(target.clone());
            l_sim(t, x, c)
        })),
        ("l_clu", Box::new(|t: &mut Tape, x| {
            let c = t.constant(target.clone());
            l_clu(t, x, c, 0.1, 0.05, 3)
        })),
        ("l_cco", Box::new(|t: &mut Tape, x| {
            let c = t.constant(target.clone());
            l_cco(t, x, c, 5e-3)
        })),
    ];
    for (name, f) in &cases {
        let x = random(&mut rng, &[4, 3]);
        let err = gradient_mismatch(f.as_ref(), &x, 1e-5)?;
        ensure(err < 1e-4, || format!("{name}: gradient mismatch {err:e}"))?;
    }
    Ok(())
}

fn sinkhorn_properties() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[16, 8]);
    let plain = sinkhorn(&x, 0)?;
    ensure(plain.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.exp().to_bits()), || {
        "sinkhorn with zero iterations must equal exp".into()
    })?;
    let q = sinkhorn(&x, 3)?;
    for i in 0..16 {
        let s: f64 = q.row(i).iter().sum();
        ensure((s - 1.0).abs() < 1e-6, || format!("row {i} sums to {s}"))?;
    }
    Ok(())
}

fn momentum_exactness() -> Result<()> {
    let cfg = tiny_tower();
    let (_, left) = Tower::build(&cfg, 1)?;
    let (_, right) = Tower::build(&cfg, 2)?;
    for eps in [0.0, 0.5, 1.0] {
        let mut r = right.params.clone();
        momentum_update(&left.params, &mut r, eps)?;
        for ((a, b), c) in left.params.iter().zip(right.params.iter()).zip(r.iter()) {
            let ok = a.value.data().iter().zip(b.value.data()).zip(c.value.data()).all(|((&l, &rv), &n)| {
                n.to_bits() == (eps * l + (1.0 - eps) * rv).to_bits()
            });
            ensure(ok, || format!("momentum update inexact at ε = {eps} for {}", a.name))?;
        }
    }
    Ok(())
}

fn tiny_tower() -> TowerConfig {
    TowerConfig {
        encoder: EncoderConfig { family: EncoderFamily::TinyMlp, width_mult: 0.25, input_size: 16 },
        projector: ProjectorSpec::identity(),
        predictor: None,
    }
}

fn checkpoint_round_trip() -> Result<()> {
    let (_, weights) = Tower::build(&tiny_tower(), 3)?;
    let back = checkpoint::decode(&checkpoint::encode(&weights))?;
    ensure(back == weights, || "checkpoint round trip changed weights".into())
}

fn augmentation_determinism() -> Result<()> {
    let data = generate(&SyntheticSpec { seed: 1, classes: 4, count: 2, size: 32, split: Split::Pretrain })?;
    let image = data.image(0);
    for name in StrategyName::ALL {
        let s = AugmentationStrategy::preset(name, ViewGeometry::default());
        let a = s.apply(&image, RngStream::new(5));
        let b = s.apply(&image, RngStream::new(5));
        ensure(a == b, || format!("{name}: same stream gave different views"))?;
        ensure(a.iter().all(|v| v.in_unit_range()), || format!("{name}: view left [0, 1]"))?;
    }
    Ok(())
}

fn preset_flags() -> Result<()> {
    let expect = [
        (Method::SimClr, false, false),
        (Method::Byol, true, true),
        (Method::MocoV2, true, true),
        (Method::Swav, false, false),
        (Method::Dino, false, true),
        (Method::MocoV3, true, true),
    ];
    for (m, pred, mom) in expect {
        let p = MethodPreset::of(m);
        ensure(p.predictor == pred && p.momentum.is_some() == mom, || format!("{m}: predictor/momentum flags"))?;
    }
    Ok(())
}

type Named = (&'static str, fn() -> Result<()>);

pub fn run() -> Vec<Check> {
    let checks: [Named; 6] = [
        ("gradients match finite differences", gradients),
        ("sinkhorn normalization", sinkhorn_properties),
        ("momentum update is exact", momentum_exactness),
        ("checkpoint round trip", checkpoint_round_trip),
        ("augmentation determinism", augmentation_determinism),
        ("preset flags", preset_flags),
    ];
    checks.into_iter().map(|(name, f)| Check { name, outcome: f() }).collect()
}
