use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// What a parameter is, for the optimizer's exclusion rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Non-trainable running statistic.
    Buffer,
}

impl ParamKind {
    /// Biases and normalization parameters skip weight decay and layer adaptation.
    pub fn is_excluded(self) -> bool {
        matches!(self, ParamKind::Bias | ParamKind::NormScale | ParamKind::NormShift)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::NormScale => 2,
            ParamKind::NormShift => 3,
            ParamKind::Buffer => 4,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::NormScale,
            3 => ParamKind::NormShift,
            4 => ParamKind::Buffer,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered, named collection of tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> usize {
        self.params.push(Param { name: name.into(), kind, value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn at(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same names, kinds and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.value.shape() == b.value.shape())
    }

    pub(crate) fn check_layout(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::dim(format!("{what}: parameter layouts differ")))
        }
    }

    /// Record every tensor as a tape leaf, in order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect()
    }

    /// Euclidean distance between two sets with the same layout.
    pub fn distance(&self, other: &ParamSet) -> Result<f64> {
        self.check_layout(other, "distance")?;
        let sq: f64 = self
            .params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum();
        Ok(sq.sqrt())
    }
}

/// Trainable parameters plus running statistics of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Weights {
    pub params: ParamSet,
    pub buffers: ParamSet,
}
