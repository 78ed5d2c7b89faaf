//! Wireline equalization lab: channel simulation, MAP detection, linear
//! baselines and a compact learned forward-backward equalizer.

// `!(x > 0.0)` is used on purpose so NaN lands in the rejecting branch
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ber;
pub mod error;
pub mod harness;
pub mod hmm;
pub mod linear;
pub mod neural;
pub mod prune;
pub mod rng;
pub mod signal;
pub mod svg;
pub mod train;

pub use error::{Error, Result};
