//! Numerical laboratory for a singularly perturbed nonlocal equation with
//! reflecting (nonlocal Neumann) exterior condition on simple domains.
//!
//! The crate builds cell meshes over a domain and a truncated exterior,
//! assembles the nonlocal quadratic form with near-diagonal corrections,
//! runs a constrained descent to a least-energy critical point, and audits
//! the identities and estimates the scheme is supposed to satisfy.

pub mod analysis;
pub mod energy;
pub mod error;
pub mod fft;
pub mod field;
pub mod geometry;
pub mod kernel;
pub mod operators;
pub mod run;
pub mod solver;

pub use error::{Error, Result};
