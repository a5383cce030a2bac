//! Dense row-major `f64` tensors and a tape-based reverse-mode autodiff.
//!
//! [`Tensor`] is a plain value type. Differentiable computation happens on a
//! [`Tape`]: every operation records its inputs and output, and
//! [`Tape::backward`] sweeps the record in reverse to accumulate gradients on
//! the leaves that asked for them.

mod kernels;
mod tape;

pub use kernels::{conv_geometry, ConvGeometry};
pub use tape::{Axis, BinaryOp, ReduceOp, Tape, UnaryOp, Var};

use crate::error::{Error, Result};

/// Dense tensor with a shape and row-major values.
///
/// A rank-0 tensor (empty shape) holds one scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::dim(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for callers that already checked the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Build a rank-1 tensor.
    pub fn vector(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len()], data: values.to_vec() }
    }

    /// Build a rank-2 tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n {
                return Err(Error::dim(format!("ragged rows: {} vs {}", r.len(), n)));
            }
            data.extend_from_slice(r);
        }
        Tensor::new([m, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::dim(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = *self.shape.last().unwrap_or(&1);
        &self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Plain (untracked) transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim(format!("transpose needs rank 2, got {:?}", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::dim(format!("matmul of {a:?} and {b:?}")));
    }
    Ok((a[0], a[1], b[1]))
}

/// Right-aligned broadcast: each trailing dimension must match or be 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand of shape `inp` maps into a broadcast output of shape `out`.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Bcast {
    /// Same number of elements, index is identity.
    Same,
    /// Operand repeats every `len` elements (trailing-suffix broadcast).
    Cycle(usize),
    /// Anything else: walk strides.
    General,
}

pub(crate) fn bcast_kind(inp: &[usize], out: &[usize]) -> Bcast {
    let n_in: usize = inp.iter().product();
    let n_out: usize = out.iter().product();
    if n_in == n_out {
        return Bcast::Same;
    }
    // strip leading ones from the operand and check it equals the trailing block of out
    let trimmed: Vec<usize> = inp.iter().copied().skip_while(|&d| d == 1).collect();
    if out.len() >= trimmed.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
        return Bcast::Cycle(n_in);
    }
    Bcast::General
}

/// For every output flat index, the operand flat index (general broadcast path).
pub(crate) fn bcast_index_map(inp: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - inp.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        in_strides[i + offset] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let n_out: usize = out.iter().product();
    let mut map = Vec::with_capacity(n_out);
    let mut idx = vec![0usize; rank];
    for _ in 0..n_out {
        map.push(idx.iter().zip(&in_strides).map(|(a, b)| a * b).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

/// Sum a gradient of shape `out` back down to operand shape `inp`.
pub(crate) fn sum_to_shape(grad: &[f64], out: &[usize], inp: &[usize]) -> Vec<f64> {
    let n_in: usize = inp.iter().product();
    match bcast_kind(inp, out) {
        Bcast::Same => grad.to_vec(),
        Bcast::Cycle(len) => {
            let mut acc = vec![0.0; n_in];
            for chunk in grad.chunks(len) {
                for (a, g) in acc.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
            acc
        }
        Bcast::General => {
            let mut acc = vec![0.0; n_in];
            for (g, j) in grad.iter().zip(bcast_index_map(inp, out)) {
                acc[j] += g;
            }
            acc
        }
    }
}

/// Split a shape around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_invariants() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new([2, 3], vec![0.0; 5]), Err(Error::Dimension(_))));
        assert!(matches!(Tensor::new([2, 0], vec![]), Err(Error::Dimension(_))));
        assert_eq!(Tensor::scalar(3.0).item().unwrap(), 3.0);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 2], &[2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[4, 1], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn sum_to_shape_general_path() {
        // out [2,3], operand [2,1]
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(sum_to_shape(&g, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
        assert_eq!(sum_to_shape(&g, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn plain_matmul_and_transpose() {
        let a = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
        assert_eq!(a.transpose().unwrap().shape(), &[2, 1]);
        assert!(a.matmul(&a).is_err());
    }
}
