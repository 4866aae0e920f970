//! Particle, grid and transport machinery for regularized Keller-Segel
//! particle systems and their mean-field limits.
//!
//! The crate is organized bottom-up:
//!
//! * [`kernels`]: heat kernel, its gradient, the periodic heat semigroup and
//!   quadrature of the memory integral.
//! * [`fields`]: grid fields, cloud-in-cell transfer, spectral gradients and the
//!   delayed chemical recurrence.
//! * [`particles`]: ensembles, initial data, drift evaluators and the
//!   Euler-Maruyama step.
//! * [`pde`]: the delayed and limiting PDE solvers with diagnostics.
//! * [`transport`]: Wasserstein-1 distances.
//! * [`coupling`]: shared-noise runs of the three processes.

pub mod coupling;
pub mod error;
pub mod fields;
pub mod grid;
pub mod io;
pub mod kernels;
pub mod particles;
pub mod pde;
pub mod rng;
mod spectral;
pub mod transport;

pub use error::{Error, Result};
pub use grid::{GridField, GridSpec};
pub use particles::{DriftPath, InitialData, Mode, ParticleEnsemble};
pub use rng::BrownianStore;
