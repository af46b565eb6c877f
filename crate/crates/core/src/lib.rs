//! Differentially private estimation of stochastic block models and block graphons.

pub mod density;
pub mod estimators;
pub mod error;
pub mod graph_models;
pub mod harness;
pub mod inequalities;
pub mod io;
pub mod linalg;
pub mod lp;
pub mod mechanisms;
pub mod metrics;
pub mod poly;
pub mod rng;
pub mod scoring;
pub mod sdp;

pub use error::{Error, Result};
