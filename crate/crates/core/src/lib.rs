//! Measure how much predictive information rater representations carry about
//! individual annotators' ratings, cluster raters by value profiles, and
//! evaluate probability-emitting decoders.
//!
//! The crate is organized bottom-up:
//!
//! - [`dataset`]: instances, raters, ratings, splits and baselines
//! - [`representations`]: rendering rater information into decoder conditioning
//! - [`decoder`]: backends, normalization, caching
//! - [`info`]: held-out cross-entropy and usable-information accounting
//! - [`clustering`]: greedy value-profile cluster selection
//! - [`evaluation`]: calibration, interpretability, agreement, difficulty
//! - [`synthetic`]: seeded populations with closed-form information quantities
//!
//! Hot loops run on rayon when the `parallel` feature is on (default) and fall
//! back to sequential code otherwise; see [`par::Execution`].

pub mod clustering;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod info;
pub mod io;
pub mod par;
pub mod representations;
pub mod rng;
pub mod stats;
pub mod synthetic;

pub use error::{BackendError, Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
