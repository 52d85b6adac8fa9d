//! Spectral engine for two-particle dispersive scattering on a periodic box.
//!
//! The crate evolves one- and two-particle complex amplitudes under the
//! relativistic dispersion relation omega(p) = sqrt(p^2 + m^2), builds smooth
//! convex localization functions, evaluates detector-style quadratic forms,
//! runs propagation-estimate diagnostics, and extracts asymptotic limits with
//! independent Fourier-side oracles. The `cli` module ties everything into
//! config-driven, reproducible batch runs.

pub mod bump;
pub mod error;
pub mod grid;
pub mod specops;
pub mod series;
pub mod detectors;
pub mod kgwave;
pub mod graf;
pub mod dynamics;
pub mod propest;
pub mod asymptotics;
pub mod scenario;
pub mod output;
pub mod cli;

pub use error::{Error, Result};
