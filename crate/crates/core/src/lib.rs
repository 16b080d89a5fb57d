//! Pooled adaptive-trial simulation and sandwich variance estimation for
//! Z-estimators fit on adaptively collected data.

pub mod config;
pub mod diagnostics;
pub mod environment;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod montecarlo;
pub mod policy;
pub mod report;
pub mod rng;
pub mod simulator;
pub mod trajectory;
pub mod variance;

pub use error::{Error, Result};
