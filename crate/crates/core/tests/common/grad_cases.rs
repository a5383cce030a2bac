//! Finite-difference cases for every differentiable operation, grouped for
//! reporting. Each case builds a scalar objective and its input from a seed.

use rand_chacha::ChaCha8Rng;
use ssl_desk::losses::{aggregate, info_nce, l_cco, l_clu, l_sim, LossSpec, PairWeight};
use ssl_desk::nn::{Activation, EncoderConfig, EncoderFamily, Mode, Normalization, ProjectorSpec, Tower, TowerConfig};
use ssl_desk::tensor::{Tape, Tensor, Var};
use ssl_desk::Result;

use super::{fd_violation, gaussian, rng, uniform, weighted_sum};

pub const INSTANCES: u64 = 10;

pub type Objective = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;
type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> (Objective, Tensor)>;

pub struct GradCase {
    pub group: &'static str,
    pub name: String,
    make: Maker,
}

impl GradCase {
    /// Worst violation ratio over `INSTANCES` seeded instances (≤ 1 passes).
    pub fn worst(&self) -> f64 {
        (0..INSTANCES)
            .map(|seed| {
                let mut r = rng(seed ^ (self.name.len() as u64 * 7919));
                let (f, x) = (self.make)(&mut r);
                fd_violation(f.as_ref(), &x)
            })
            .fold(0.0, f64::max)
    }
}

type UnaryFn = fn(&mut Tape, Var) -> Result<Var>;
type BinaryFn = fn(&mut Tape, Var, Var) -> Result<Var>;

/// f(x) = Σ W ⊙ op(x) with x uniform on [lo, hi).
fn unary(group: &'static str, name: &str, shape: &[usize], lo: f64, hi: f64, op: UnaryFn) -> GradCase {
    let shape = shape.to_vec();
    GradCase {
        group,
        name: name.to_string(),
        make: Box::new(move |r| {
            let x = uniform(r, &shape, lo, hi);
            let mut t = Tape::new();
            let probe = t.constant(x.clone());
            let out = op(&mut t, probe).unwrap();
            let w = gaussian(r, t.value(out).shape());
            let f: Objective = Box::new(move |t, v| {
                let y = op(t, v)?;
                weighted_sum(t, y, &w)
            });
            (f, x)
        }),
    }
}

/// One case per argument of a binary op, the other held constant.
fn binary(group: &'static str, name: &str, a_shape: &[usize], b_shape: &[usize], b_range: (f64, f64), op: BinaryFn) -> Vec<GradCase> {
    [true, false]
        .into_iter()
        .map(|wrt_a| {
            let (a_shape, b_shape) = (a_shape.to_vec(), b_shape.to_vec());
            GradCase {
                group,
                name: format!("{name}/{}", if wrt_a { "lhs" } else { "rhs" }),
                make: Box::new(move |r| {
                    let a = uniform(r, &a_shape, -1.0, 1.0);
                    let b = uniform(r, &b_shape, b_range.0, b_range.1);
                    let mut t = Tape::new();
                    let (ca, cb) = (t.constant(a.clone()), t.constant(b.clone()));
                    let out = op(&mut t, ca, cb).unwrap();
                    let w = gaussian(r, t.value(out).shape());
                    let (x, other) = if wrt_a { (a, b) } else { (b, a) };
                    let f: Objective = Box::new(move |t, v| {
                        let c = t.constant(other.clone());
                        let y = if wrt_a { op(t, v, c)? } else { op(t, c, v)? };
                        weighted_sum(t, y, &w)
                    });
                    (f, x)
                }),
            }
        })
        .collect()
}

/// A loss with respect to its predictions and, when `targets_too`, its targets.
fn loss(name: &str, targets_too: bool, inputs: UnaryFn, op: BinaryFn) -> Vec<GradCase> {
    let sides: &[bool] = if targets_too { &[true, false] } else { &[true] };
    sides
        .iter()
        .map(|&wrt_preds| GradCase {
            group: "losses",
            name: format!("{name}/{}", if wrt_preds { "preds" } else { "targets" }),
            make: Box::new(move |r| {
                let mut t = Tape::new();
                let mut draw = |r: &mut ChaCha8Rng| {
                    let raw = t.constant(uniform(r, &[4, 3], -1.0, 1.0));
                    let v = inputs(&mut t, raw).unwrap();
                    t.value(v).clone()
                };
                let (p, z) = (draw(r), draw(r));
                let (x, other) = if wrt_preds { (p, z) } else { (z, p) };
                let f: Objective = Box::new(move |t, v| {
                    let c = t.constant(other.clone());
                    if wrt_preds {
                        op(t, v, c)
                    } else {
                        op(t, c, v)
                    }
                });
                (f, x)
            }),
        })
        .collect()
}

fn aggregate_case(spec: LossSpec, name: &str) -> GradCase {
    GradCase {
        group: "losses",
        name: format!("aggregate/{name}"),
        make: Box::new(move |r| {
            let x = uniform(r, &[3, 4, 3], -1.0, 1.0);
            let spec = spec.clone();
            let f: Objective = Box::new(move |t, v| {
                let weights = PairWeight::globals_as_targets(2, 3)?;
                let flat = t.reshape(v, [3, 12])?;
                let mut views = Vec::new();
                for k in 0..3 {
                    let onehot = Tensor::new([1, 3], (0..3).map(|j| f64::from(u8::from(j == k))).collect())?;
                    let sel = t.constant(onehot);
                    let row = t.matmul(sel, flat)?;
                    views.push(t.reshape(row, [4, 3])?);
                }
                let targets = vec![Some(views[0]), Some(views[1]), None];
                aggregate(t, &views, &targets, &weights, &spec)
            });
            (f, x)
        }),
    }
}

fn tower_case() -> GradCase {
    let cfg = TowerConfig {
        encoder: EncoderConfig { family: EncoderFamily::TinyConv, width_mult: 0.125, input_size: 8 },
        projector: ProjectorSpec {
            dims: vec![6, 4],
            normalization: Normalization::BatchNorm,
            activation: Activation::Relu,
            final_norm: false,
            prototypes: Some(5),
        },
        predictor: None,
    };
    GradCase {
        group: "network",
        name: "tower".into(),
        make: Box::new(move |r| {
            let (tower, weights) = Tower::build(&cfg, 3).unwrap();
            let x = uniform(r, &[4, 8, 8, 3], 0.0, 1.0);
            let w = gaussian(r, &[4, 5]);
            let f: Objective = Box::new(move |t, v| {
                let vars = weights.params.bind(t, false);
                let mut buffers = weights.buffers.clone();
                let out = tower.forward(t, &vars, &mut buffers, v, Mode::Train)?;
                weighted_sum(t, out.embedding, &w)
            });
            (f, x)
        }),
    }
}

fn as_is(_: &mut Tape, x: Var) -> Result<Var> {
    Ok(x)
}

fn unit_rows(t: &mut Tape, x: Var) -> Result<Var> {
    t.l2_normalize(x, 1, 1e-12)
}

/// Every differentiable tape operation, the four losses, their aggregation and a tower.
pub fn all() -> Vec<GradCase> {
    let mut cases = Vec::new();
    cases.extend(binary("elementwise", "add", &[3, 4], &[4], (-1.0, 1.0), |t, a, b| t.add(a, b)));
    cases.extend(binary("elementwise", "sub", &[3, 4], &[3, 1], (-1.0, 1.0), |t, a, b| t.sub(a, b)));
    cases.extend(binary("elementwise", "mul", &[2, 3, 4], &[3, 4], (-1.0, 1.0), |t, a, b| t.mul(a, b)));
    cases.extend(binary("elementwise", "div", &[3, 4], &[4], (0.5, 2.0), |t, a, b| t.div(a, b)));
    cases.push(unary("elementwise", "exp", &[3, 4], -1.0, 1.0, |t, x| t.exp(x)));
    cases.push(unary("elementwise", "log", &[3, 4], 0.5, 2.0, |t, x| t.log(x)));
    cases.push(unary("elementwise", "square", &[3, 4], -1.0, 1.0, |t, x| t.square(x)));
    cases.push(unary("elementwise", "sqrt", &[3, 4], 0.5, 2.0, |t, x| t.sqrt(x)));
    cases.push(unary("elementwise", "relu/positive", &[3, 4], 0.1, 1.0, |t, x| t.relu(x)));
    cases.push(unary("elementwise", "relu/negative", &[3, 4], -1.0, -0.1, |t, x| t.relu(x)));
    cases.push(unary("elementwise", "gelu", &[3, 4], -2.0, 2.0, |t, x| t.gelu(x)));
    cases.push(unary("elementwise", "scale", &[3, 4], -1.0, 1.0, |t, x| t.scale(x, -2.5)));
    cases.push(unary("elementwise", "shift", &[3, 4], -1.0, 1.0, |t, x| t.shift(x, 0.75)));
    cases.extend(binary("linear", "matmul", &[3, 4], &[4, 2], (-1.0, 1.0), |t, a, b| t.matmul(a, b)));
    cases.push(unary("linear", "transpose", &[3, 5], -1.0, 1.0, |t, x| t.transpose(x)));
    cases.push(unary("linear", "reshape", &[2, 6], -1.0, 1.0, |t, x| t.reshape(x, [3, 4])));
    cases.push(unary("reduction", "sum/0", &[3, 4], -1.0, 1.0, |t, x| t.sum(x, 0)));
    cases.push(unary("reduction", "sum/1", &[2, 3, 4], -1.0, 1.0, |t, x| t.sum(x, 1)));
    cases.push(unary("reduction", "mean/1", &[3, 4], -1.0, 1.0, |t, x| t.mean(x, 1)));
    cases.push(unary("reduction", "sum_all", &[3, 4], -1.0, 1.0, |t, x| t.sum_all(x)));
    cases.push(unary("reduction", "mean_all", &[3, 4], -1.0, 1.0, |t, x| t.mean_all(x)));
    cases.push(unary("normalization", "softmax/1", &[3, 5], -2.0, 2.0, |t, x| t.softmax(x, 1)));
    cases.push(unary("normalization", "softmax/0", &[3, 5], -2.0, 2.0, |t, x| t.softmax(x, 0)));
    cases.push(unary("normalization", "log_softmax/1", &[3, 5], -2.0, 2.0, |t, x| t.log_softmax(x, 1)));
    cases.push(unary("normalization", "l2_normalize/1", &[3, 4], -1.0, 1.0, unit_rows));
    cases.push(unary("normalization", "l2_normalize/0", &[3, 4], -1.0, 1.0, |t, x| t.l2_normalize(x, 0, 1e-12)));
    cases.extend(binary("spatial", "conv2d/stride1", &[2, 5, 5, 3], &[27, 4], (-1.0, 1.0), |t, x, w| {
        t.conv2d(x, w, 3, 1, 1)
    }));
    cases.extend(binary("spatial", "conv2d/stride2", &[1, 6, 5, 2], &[18, 3], (-1.0, 1.0), |t, x, w| {
        t.conv2d(x, w, 3, 1, 2)
    }));
    cases.push(unary("spatial", "avg_pool2", &[2, 4, 6, 3], -1.0, 1.0, |t, x| t.avg_pool2(x)));
    cases.extend(loss("info_nce", true, unit_rows, |t, p, z| info_nce(t, p, z, 0.1)));
    cases.extend(loss("l_sim", true, as_is, l_sim));
    cases.extend(loss("l_cco", true, as_is, |t, p, z| l_cco(t, p, z, 5e-3)));
    // Sinkhorn assignments are constants, so only the prediction side carries gradient.
    cases.extend(loss("l_clu", false, as_is, |t, p, z| l_clu(t, p, z, 0.1, 0.05, 3)));
    cases.push(aggregate_case(LossSpec::nce(0.2), "nce"));
    cases.push(aggregate_case(LossSpec::sim(), "sim"));
    cases.push(tower_case());
    cases
}
