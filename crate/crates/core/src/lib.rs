//! Desk-scale joint-embedding self-supervised learning.
//!
//! Every method in the family (SimCLR, BYOL, MoCo v2/v3, SwAV, DINO) is one
//! configuration of the same pipeline: augment an image into several views,
//! embed them with a left and a right tower, optionally pass the left
//! embeddings through a predictor, and score view pairs with a pretext loss.
//! The right tower either shares the left tower's parameters or tracks them
//! as an exponential moving average.

// Negated comparisons are how validation rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod method;
pub mod nn;
pub mod pretrain;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use method::Method;
