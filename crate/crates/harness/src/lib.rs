//! Experiment orchestration for kslab: configuration files, convergence
//! sweeps, log-log rate fits and the `kslab` command line.

pub mod cli;
pub mod config;
pub mod report;
pub mod studies;

pub use config::SimConfig;
pub use report::{ConvergenceReport, SlopeFit};

/// Version string embedded in reports.
pub fn version() -> String {
    format!("kslab {}", env!("CARGO_PKG_VERSION"))
}
