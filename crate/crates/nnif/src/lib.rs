//! Influence-function / nearest-neighbor adversarial example detection lab.
//!
//! The pieces, in dependency order: [`data`] synthesizes or loads labeled
//! datasets, [`model`] trains small MLPs and exposes the derivatives
//! everything else consumes, [`attacks`] crafts adversarial examples,
//! [`influence`] scores each training point's effect on a prediction
//! through inverse Hessian-vector products, [`neighbors`] turns the most
//! helpful and most harmful training points into rank/distance features,
//! [`detector`] fits a logistic regression on those features, [`eval`]
//! aggregates metrics into report tables, and [`pipeline`] runs the whole
//! chain as six cached, resumable stages keyed by content hashes.
//!
//! All numerics are `f64`, randomness flows from explicit seeds, and a
//! fixed configuration reproduces every artifact byte for byte.

pub mod attacks;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod influence;
pub(crate) mod io_util;
pub mod model;
pub mod neighbors;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
