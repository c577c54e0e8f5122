//! Numerical laboratory for correctors, Green's functions and renormalization
//! partitions on supercritical bond percolation clusters.
//!
//! The modules build on each other: [`env`] samples conductances, [`geometry`]
//! extracts clusters and classifies triadic cubes, [`partition`] assembles the
//! partition into good cubes, [`solver`] handles elliptic problems on clusters,
//! [`analysis`] holds estimators and inequality checks, and [`experiments`]
//! runs seeded ensembles.

pub mod error;
pub mod lattice;
pub mod env;
pub mod geometry;
pub mod partition;
pub mod solver;
pub mod analysis;
pub mod experiments;

pub use error::{Error, Result};
