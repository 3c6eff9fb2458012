//! Federated learning over randomly projected consensus ADMM, with baselines,
//! a differential-privacy accountant, exact byte metering and an attack
//! harness.

pub mod admm;
pub mod attack;
pub mod cli;
pub mod data;
pub mod error;
pub mod models;
pub mod orchestrator;
pub mod privacy;
pub mod projection;
pub mod rng;
pub mod transport;
pub mod vector;

pub use error::{Error, Result};
