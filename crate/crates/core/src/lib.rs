//! Conformal calibration of contextual quantile predictors for
//! newsvendor-style ordering decisions.
//!
//! The crate trains any pluggable quantile regressor, corrects its bias by
//! split-conformal calibration with optional local data pooling, computes
//! coverage bounds and quantile confidence intervals from margin/gap
//! models, estimates those models from data, and drives desk-scale
//! simulation studies end to end.
//!
//! The main flow:
//!
//! 1. load or generate a [`dataset::Dataset`] and [`dataset::split`] it;
//! 2. fit a learner from [`regressors`] on the training slice;
//! 3. calibrate with [`conformal::cqpc_fit`] (or select a pooling size via
//!    [`conformal::gtlc_select`]) and predict;
//! 4. or run a whole study through [`harness`].

// `!(x > 0.0)` is used deliberately throughout: it rejects NaN along with
// the out-of-range values, which `x <= 0.0` would not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod conformal;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod loss;
pub mod neighbors;
pub mod regressors;
pub mod rng;
pub mod stats;

pub use dataset::{split, Dataset, SplitSpec, Standardization};
pub use error::{Error, Result};
pub use loss::{empirical_pinball, pinball, CostParams, QuantileLevel};
pub use neighbors::{NeighborIndex, PoolingSpec};
pub use rng::RngStream;
