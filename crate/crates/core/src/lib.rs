//! Dropback: train a network while storing only the `k` weights with the
//! largest accumulated gradients and regenerating every other weight from a
//! seed.

// `!(x > 0.0)` style checks are meant to also catch NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dropback;
pub mod error;
pub mod harness;
pub mod init;
pub mod metrics;
pub mod nn;
pub mod optim;

pub use config::RunConfig;
pub use dropback::{StepStats, TrackedEntry, TrackedSet};
pub use error::{Error, Result};
pub use init::{InitSpec, ParamId, ParamLayout, Seed};
pub use nn::NetworkSpec;
pub use optim::Optimizer;
