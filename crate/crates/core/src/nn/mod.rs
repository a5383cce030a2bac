//! Layers, parameter sets and the tower builders.
//!
//! A tower is an encoder followed by a projector; the predictor is a separate
//! network applied to the left tower's embeddings. All three are plain
//! [`Network`]s: an ordered list of [`Layer`]s whose parameters live in a
//! [`ParamSet`] and are bound to a [`Tape`] for each forward pass.

pub mod checkpoint;
mod layers;
mod params;
mod tower;

pub use layers::{Layer, Mode, Network, BN_EPS, BN_STAT_MOMENTUM};
pub use params::{Param, ParamKind, ParamSet, Weights};
pub use tower::{
    ablation_predictor, build_predictor, build_projector, Activation, EncoderConfig, EncoderFamily, Normalization, Predictor, PredictorSpec,
    ProjectorSpec, Tower, TowerConfig, TowerOutput,
};
