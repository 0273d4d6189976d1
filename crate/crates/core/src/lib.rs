//! Weight-space flatness of the robust (adversarial) loss.
//!
//! The crate bundles a small deterministic network engine, L-infinity PGD
//! attacks, average- and worst-case flatness measures over relative per-layer
//! balls, Hessian eigenvalue diagnostics, and an adversarial-training harness
//! that produces the minima being measured.

// `!(x >= 0.0)` style checks are deliberate: they reject NaN along with the
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flatness;
pub mod geometry;
pub mod hessian;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use attacks::{AttackConfig, AttackResult};
pub use batch::Batch;
pub use config::ExperimentConfig;
pub use data::Dataset;
pub use error::{Error, Result};
pub use flatness::{FlatnessConfig, FlatnessReport};
pub use hessian::EigenReport;
pub use training::{Checkpoint, TrainConfig};
pub use nn::{Activation, Direction, Mode, Network, NetworkSpec, ParamVector};
pub use tensor::Tensor;
