//! Stochastic recurrent state-space models whose particle ensembles are
//! updated by a learned potential flow, trained semi-supervised across
//! labeled (source) and unlabeled (target) operating regimes.

// `!(a > b)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ad;
pub mod data;
pub mod error;
pub mod flow;
pub mod generative;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
