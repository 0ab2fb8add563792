//! Dimension-reduced Gaussian process emulation of expensive simulators.
//!
//! A sufficient subspace of a high-dimensional input is estimated by gradient-based
//! kernel dimension reduction ([`gkdr`]), a Gaussian process emulator ([`gp`]) is trained
//! on the projected inputs, and the combination is benchmarked against full-space
//! emulation and classical subspace estimators ([`baselines`]) on test simulators
//! ([`benchmarks`]).

pub mod baselines;
pub mod benchmarks;
pub mod data;
pub mod design;
pub mod error;
pub mod gkdr;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod pipeline;
pub mod projection;

pub use data::Dataset;
pub use error::{EmulationError, Result};
pub use projection::ProjectionResult;
