//! Distributionally-weighted least squares for confirmatory factor models.
//!
//! The crate fits covariance structure models with a family of weighted least
//! squares and normal-theory ML estimators, computes normal-theory and
//! sandwich standard errors, rescaled test statistics, and runs Monte Carlo
//! and bootstrap studies.

pub mod datagen;
pub mod datasets;
pub mod error;
pub mod estimation;
pub mod fitstats;
pub mod harness;
pub mod inference;
pub mod matrix;
pub mod model;
pub mod moments;

pub use datagen::{Condition, PopulationModel, RadialMode};
pub use error::{Error, Result};
pub use estimation::{fit, FailReason, FitOptions, FitResult, Method, MethodKind};
pub use fitstats::FitStatistics;
pub use harness::{StudyConfig, StudyReport, TuneReport};
pub use inference::{InfoVariant, SeKind, SeResult, SeRule};
pub use matrix::{HalfVec, PairIndex, SymMatrix};
pub use model::{ModelSpec, ParamKind, ParamVector, SpecFile};
pub use moments::{DataMatrix, MomentSet};
