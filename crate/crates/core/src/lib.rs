//! Adam and AdamW uniform-stability laboratory.
//!
//! Label-distribution losses (KL and GJM), linear-softmax and MLP models
//! with exact gradients, the three update rules, twin-training stability
//! estimators, and closed-form generalization bounds.
//!
//! Parallel execution over seeds and sampling blocks is on by default; build
//! without the `parallel` feature for a single-threaded library.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod data;
pub mod error;
pub mod exec;
pub mod losses;
pub mod math;
pub mod models;
pub mod optim;
pub mod rng;
pub mod stability;
pub mod stats;

pub use bounds::{BoundInputs, BoundReport, Theorem};
pub use data::{BatchSequence, Dataset, LabelDistribution, Partition, Sample};
pub use error::{Error, Result};
pub use exec::Exec;
pub use losses::{LossProfile, LossSpec};
pub use models::{Arch, GradVector, ModelSpec, ParamVector};
pub use optim::{OptimizerConfig, OptimizerState, Rule, Schedule};
pub use rng::RngStream;
pub use stability::{StabilityReport, StabilitySetup, TrainRun, TwinTrace};
