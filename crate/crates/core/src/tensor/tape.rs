use super::kernels::{self, ConvGeometry};
use super::{axis_split, bcast_index_map, bcast_kind, broadcast_shape, sum_to_shape, Bcast, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
///
/// Handles carry the tape generation they were created in; using one after
/// [`Tape::reset`] is a usage error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    generation: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Neg,
    Square,
    Sqrt,
    Relu,
    /// tanh approximation of GELU
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    All,
    Index(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    Unary(UnaryOp, usize),
    Binary(BinaryOp, usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Reduce { op: ReduceOp, input: usize, axis: Axis, argmax: Vec<usize> },
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    L2Normalize { input: usize, axis: usize, eps: f64, norms: Vec<f64> },
    Conv2d { input: usize, weight: usize, cols: Vec<f64>, geom: ConvGeometry },
    AvgPool2(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-stream operation record for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the record is topologically
/// sorted by construction. Call [`Tape::reset`] between training steps.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    generation: u64,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop every recorded node and invalidate outstanding handles.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
        self.generation += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.idx >= self.nodes.len() {
            return Err(Error::Usage("variable does not belong to the active tape".into()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { idx: self.nodes.len() - 1, generation: self.generation }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Record a leaf. Leaves with `requires_grad` receive gradients in [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Panics if the handle is stale; use [`Tape::try_value`] to check.
    pub fn value(&self, v: Var) -> &Tensor {
        self.try_value(v).expect("stale tape variable")
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.rg(i)).unwrap_or(false)
    }

    /// Gradient of the last backward root w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let i = self.check(v).ok()?;
        let g = self.grads.get(i)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g.clone()))
    }

    /// Identity in the forward pass; blocks all gradient flow to its input.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.nodes[i].value.clone();
        Ok(self.push(v, Op::StopGradient, false))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let xv = &self.nodes[i].value;
        // NaN passes through so a diverging run surfaces as a non-finite loss.
        match op {
            UnaryOp::Log => {
                if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
            }
            UnaryOp::Sqrt => {
                if let Some(bad) = xv.data().iter().find(|&&v| v < 0.0) {
                    return Err(Error::Domain(format!("sqrt of negative value {bad}")));
                }
            }
            _ => {}
        }
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Neg => |v| -v,
            UnaryOp::Square => |v| v * v,
            UnaryOp::Sqrt => f64::sqrt,
            UnaryOp::Relu => |v| if v > 0.0 { v } else { 0.0 },
            UnaryOp::Gelu => gelu,
        };
        let out = xv.map(f);
        let rg = self.rg(i);
        Ok(self.push(out, Op::Unary(op, i), rg))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| {
            Error::dim(format!("cannot broadcast {:?} with {:?}", av.shape(), bv.shape()))
        })?;
        if op == BinaryOp::Div && bv.data().contains(&0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let data = broadcast_apply(av, bv, &shape, f);
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary(op, ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, x)
    }

    /// `c · x`
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.nodes[i].value.map(|v| v * c);
        let rg = self.rg(i);
        Ok(self.push(out, Op::Scale(i, c), rg))
    }

    /// `x + c`
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.nodes[i].value.map(|v| v + c);
        let rg = self.rg(i);
        Ok(self.push(out, Op::Shift(i), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.nodes[i].value.transpose()?;
        let rg = self.rg(i);
        Ok(self.push(out, Op::Transpose(i), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.nodes[i].value.clone().reshape(shape)?;
        let rg = self.rg(i);
        Ok(self.push(out, Op::Reshape(i), rg))
    }

    /// Sum, mean or max over one axis (the axis is removed) or over everything.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: Axis) -> Result<Var> {
        let i = self.check(x)?;
        let xv = &self.nodes[i].value;
        let (outer, n, inner, out_shape) = match axis {
            Axis::All => (1, xv.len(), 1, vec![]),
            Axis::Index(a) => {
                if a >= xv.rank() {
                    return Err(Error::dim(format!(
                        "axis {a} out of range for shape {:?}",
                        xv.shape()
                    )));
                }
                let (o, n, inn) = axis_split(xv.shape(), a);
                let mut s = xv.shape().to_vec();
                s.remove(a);
                (o, n, inn, s)
            }
        };
        let d = xv.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for j in 0..inner {
                            out[o * inner + j] += d[base + j];
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
            }
            ReduceOp::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for j in 0..inner {
                        let mut best = o * n * inner + j;
                        for k in 1..n {
                            let idx = (o * n + k) * inner + j;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                        out[o * inner + j] = d[best];
                        argmax[o * inner + j] = best;
                    }
                }
            }
        }
        let rg = self.rg(i);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Reduce { op, input: i, axis, argmax }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, Axis::All)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, Axis::All)
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, Axis::Index(axis))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, Axis::Index(axis))
    }

    fn check_axis(&self, i: usize, axis: usize) -> Result<()> {
        let r = self.nodes[i].value.rank();
        if axis >= r {
            return Err(Error::dim(format!(
                "axis {axis} out of range for shape {:?}",
                self.nodes[i].value.shape()
            )));
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.check(x)?;
        self.check_axis(i, axis)?;
        let out = softmax_values(&self.nodes[i].value, axis, false);
        let rg = self.rg(i);
        Ok(self.push(out, Op::Softmax(i, axis), rg))
    }

    /// Log-softmax along `axis` via a stable log-sum-exp.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.check(x)?;
        self.check_axis(i, axis)?;
        let out = softmax_values(&self.nodes[i].value, axis, true);
        let rg = self.rg(i);
        Ok(self.push(out, Op::LogSoftmax(i, axis), rg))
    }

    /// Scale each slice along `axis` to unit norm; slices with norm ≤ eps are divided by eps.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let i = self.check(x)?;
        self.check_axis(i, axis)?;
        let xv = &self.nodes[i].value;
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let d = xv.data();
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for j in 0..inner {
                    let v = d[(o * n + k) * inner + j];
                    norms[o * inner + j] += v * v;
                }
            }
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt().max(eps));
        let mut out = d.to_vec();
        for o in 0..outer {
            for k in 0..n {
                for j in 0..inner {
                    out[(o * n + k) * inner + j] /= norms[o * inner + j];
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(i);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::L2Normalize { input: i, axis, eps, norms },
            rg,
        ))
    }

    /// NHWC convolution with a `[k·k·C_in, C_out]` weight.
    pub fn conv2d(&mut self, x: Var, weight: Var, k: usize, pad: usize, stride: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(weight)?);
        let xs = self.nodes[ix].value.shape().to_vec();
        let ws = self.nodes[iw].value.shape().to_vec();
        let geom = kernels::conv_geometry(&xs, k, pad, stride)
            .ok_or_else(|| Error::dim(format!("conv2d input {xs:?} with kernel {k}, pad {pad}")))?;
        if ws.len() != 2 || ws[0] != geom.patch_len() {
            return Err(Error::dim(format!("conv2d weight {ws:?} does not fit input {xs:?}, kernel {k}")));
        }
        let o = ws[1];
        let cols = kernels::im2col(self.nodes[ix].value.data(), &geom);
        let mut out = vec![0.0; geom.patches() * o];
        kernels::matmul_nn(&cols, self.nodes[iw].value.data(), &mut out, geom.patches(), geom.patch_len(), o);
        let shape = vec![geom.n, geom.oh, geom.ow, o];
        let rg = self.rg(ix) || self.rg(iw);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { input: ix, weight: iw, cols, geom }, rg))
    }

    /// 2×2 stride-2 average pooling over NHWC input.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let s = self.nodes[i].value.shape();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(Error::dim(format!("avg_pool2 needs NHWC with H,W ≥ 2, got {s:?}")));
        }
        let (shape, out) = kernels::avg_pool2(self.nodes[i].value.data(), s);
        let rg = self.rg(i);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AvgPool2(i), rg))
    }

    /// Reverse sweep from a scalar root. Populates gradients on every leaf
    /// that requires them (zeros where no path exists).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.check(root)?;
        if self.backward_done {
            return Err(Error::Usage("backward called twice without reset".into()));
        }
        if self.nodes[r].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[r].value.shape()
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[r] = Some(vec![1.0]);

        for i in (0..=r).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, g: Vec<f64>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut self.grads[target] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let mut contributions: Vec<(usize, Vec<f64>)> = Vec::with_capacity(2);
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Unary(op, a) => {
                let a = *a;
                let x = self.nodes[a].value.data();
                let dx: Vec<f64> = match op {
                    UnaryOp::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    UnaryOp::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    UnaryOp::Neg => g.iter().map(|g| -g).collect(),
                    UnaryOp::Square => g.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect(),
                    UnaryOp::Sqrt => g.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect(),
                    UnaryOp::Relu => g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                    UnaryOp::Gelu => g.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect(),
                };
                contributions.push((a, dx));
            }
            Op::Binary(op, a, b) => {
                let (a, b) = (*a, *b);
                let out_shape = node.value.shape();
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                // expand both operands to the output shape for the product rules
                let a_full = || broadcast_apply(av, bv, out_shape, |x, _| x);
                let b_full = || broadcast_apply(av, bv, out_shape, |_, y| y);
                if self.nodes[a].requires_grad {
                    let ga: Vec<f64> = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => g.iter().zip(b_full()).map(|(g, b)| g * b).collect(),
                        BinaryOp::Div => g.iter().zip(b_full()).map(|(g, b)| g / b).collect(),
                    };
                    contributions.push((a, sum_to_shape(&ga, out_shape, av.shape())));
                }
                if self.nodes[b].requires_grad {
                    let gb: Vec<f64> = match op {
                        BinaryOp::Add => g.to_vec(),
                        BinaryOp::Sub => g.iter().map(|g| -g).collect(),
                        BinaryOp::Mul => g.iter().zip(a_full()).map(|(g, a)| g * a).collect(),
                        BinaryOp::Div => g
                            .iter()
                            .zip(a_full().iter().zip(b_full()))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect(),
                    };
                    contributions.push((b, sum_to_shape(&gb, out_shape, bv.shape())));
                }
            }
            Op::Scale(a, c) => contributions.push((*a, g.iter().map(|g| g * c).collect())),
            Op::Shift(a) => contributions.push((*a, g.to_vec())),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let n = self.nodes[b].value.shape()[1];
                if self.nodes[a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, self.nodes[b].value.data(), &mut da, m, n, k);
                    contributions.push((a, da));
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(self.nodes[a].value.data(), g, &mut db, k, m, n);
                    contributions.push((b, db));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let gt = Tensor::from_parts(s.to_vec(), g.to_vec()).transpose().expect("rank 2");
                contributions.push((*a, gt.into_data()));
            }
            Op::Reshape(a) => contributions.push((*a, g.to_vec())),
            Op::Reduce { op, input, axis, argmax } => {
                let xs = self.nodes[*input].value.shape();
                let nx = self.nodes[*input].value.len();
                let mut dx = vec![0.0; nx];
                match op {
                    ReduceOp::Max => {
                        for (gi, &idx) in g.iter().zip(argmax) {
                            dx[idx] += gi;
                        }
                    }
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let (outer, n, inner) = match axis {
                            Axis::All => (1, nx, 1),
                            Axis::Index(ax) => axis_split(xs, *ax),
                        };
                        let scale = if *op == ReduceOp::Mean { 1.0 / n as f64 } else { 1.0 };
                        for o in 0..outer {
                            for k in 0..n {
                                let base = (o * n + k) * inner;
                                for j in 0..inner {
                                    dx[base + j] = g[o * inner + j] * scale;
                                }
                            }
                        }
                    }
                }
                contributions.push((*input, dx));
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + j;
                        let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                contributions.push((*a, dx));
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + j;
                        let gsum: f64 = (0..n).map(|k| g[at(k)]).sum();
                        for k in 0..n {
                            dx[at(k)] = g[at(k)] - y[at(k)].exp() * gsum;
                        }
                    }
                }
                contributions.push((*a, dx));
            }
            Op::L2Normalize { input, axis, eps, norms } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let x = self.nodes[*input].value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + j;
                        let nrm = norms[o * inner + j];
                        let raw: f64 = (0..n).map(|k| x[at(k)] * x[at(k)]).sum::<f64>().sqrt();
                        if raw > *eps {
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                dx[at(k)] = (g[at(k)] - y[at(k)] * dot) / nrm;
                            }
                        } else {
                            for k in 0..n {
                                dx[at(k)] = g[at(k)] / eps;
                            }
                        }
                    }
                }
                contributions.push((*input, dx));
            }
            Op::Conv2d { input, weight, cols, geom } => {
                let o = self.nodes[*weight].value.shape()[1];
                let (p, pl) = (geom.patches(), geom.patch_len());
                if self.nodes[*weight].requires_grad {
                    let mut dw = vec![0.0; pl * o];
                    kernels::matmul_tn(cols, g, &mut dw, pl, p, o);
                    contributions.push((*weight, dw));
                }
                if self.nodes[*input].requires_grad {
                    let mut dcols = vec![0.0; p * pl];
                    kernels::matmul_nt(g, self.nodes[*weight].value.data(), &mut dcols, p, o, pl);
                    contributions.push((*input, kernels::col2im(&dcols, geom)));
                }
            }
            Op::AvgPool2(a) => {
                let xs = self.nodes[*a].value.shape();
                contributions.push((*a, kernels::avg_pool2_backward(g, xs)));
            }
        }
        for (target, grad) in contributions {
            self.accumulate(target, grad);
        }
    }
}

fn broadcast_apply(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (ad, bd) = (a.data(), b.data());
    let n: usize = out_shape.iter().product();
    match (bcast_kind(a.shape(), out_shape), bcast_kind(b.shape(), out_shape)) {
        (Bcast::Same, Bcast::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (Bcast::Same, Bcast::Cycle(len)) => (0..n).map(|i| f(ad[i], bd[i % len])).collect(),
        (Bcast::Cycle(len), Bcast::Same) => (0..n).map(|i| f(ad[i % len], bd[i])).collect(),
        _ => {
            let am = bcast_index_map(a.shape(), out_shape);
            let bm = bcast_index_map(b.shape(), out_shape);
            am.iter().zip(&bm).map(|(&i, &j)| f(ad[i], bd[j])).collect()
        }
    }
}

/// Plain softmax / log-softmax along an axis with max subtraction.
pub(crate) fn softmax_values(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |k: usize| (o * n + k) * inner + j;
            let mx = (0..n).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..n).map(|k| (d[at(k)] - mx).exp()).sum();
            if log {
                let lse = s.ln();
                for k in 0..n {
                    out[at(k)] = d[at(k)] - mx - lse;
                }
            } else {
                for k in 0..n {
                    out[at(k)] = (d[at(k)] - mx).exp() / s;
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
