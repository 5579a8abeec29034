//! Binary linear classifiers trained with penalties on the difference in
//! false-positive and false-negative rates between two protected groups.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: CSV loading, group partitioning, splits and standardization.
//! - [`metrics`]: per-group confusion rates and the unrelaxed fairness objective.
//! - [`penalty`]: the absolute-value (AVD) and squared (SD) difference penalizers.
//! - [`trainer`]: logistic regression on the convex proxy objective.
//! - [`pipeline`]: split / cross-validate / sweep / select scheme and a
//!   randomized post-processing baseline.
//! - [`synth`]: the two-feature synthetic distribution where the
//!   accuracy-optimal rule is maximally unfair.
//! - [`cli`]: the `fairpen` command-line front end.

pub mod cli;
pub mod data;
mod error;
pub mod metrics;
pub mod penalty;
pub mod pipeline;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

pub use data::{DataSchema, Dataset, Group, LabeledPoint, Standardization};
pub use metrics::{EvalSummary, GroupRates};
pub use penalty::{PenaltyKind, PenaltySpec};
pub use trainer::{FitResult, ModelParams, TrainConfig};
