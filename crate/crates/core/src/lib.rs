//! Treatment-effect heterogeneity toolkit for completely randomized
//! experiments with binary covariates and binary outcomes.
//!
//! The pipeline estimates conditional average treatment effects with
//! meta-learners over interchangeable base learners, scores the estimators
//! with calibration diagnostics, screens them by rank stability across data
//! perturbations, ensembles the survivors, and then mines the extreme
//! predicted-effect subgroups for small, interpretable covariate cells whose
//! selection is stable across repeated searches. A final holdout evaluation
//! touches the test partition exactly once.

pub mod calibration;
pub mod cellsearch;
pub mod config;
pub mod dataset;
pub mod error;
pub mod learners;
pub mod metalearners;
pub mod neyman;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod rowset;
pub mod runner;
pub mod synth;

pub use error::{Error, Result};
