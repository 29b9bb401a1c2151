//! Confidence-enhanced kNN-MT at desk scale.
//!
//! A tiny per-position base transducer is trained on a synthetic general
//! domain; its hidden states over in-domain data form a key-value datastore;
//! a small head turns retrieved neighbors plus the base model's confidence
//! into a kNN distribution and an interpolation weight. The head is trained
//! with key-noise and pseudo-pair perturbations under a decaying rate.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod base;
pub mod datastore;
pub mod error;
pub mod harness;
pub mod head;
pub mod io;
pub mod math;
pub mod rng;
pub mod task;
pub mod train;

pub use error::{Error, Result};
