//! Video saliency prediction: a spatio-temporal transformer encoder, a
//! three-branch heterogeneous decoder, the KL + CC training objective, the
//! standard fixation metrics, dataset tooling and the training / inference
//! pipeline around them.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod resample;
pub mod tensor_io;

pub use error::{Error, Result};
