//! Random conductance model laboratory.
//!
//! Conductance fields on periodic boxes, their percolation clusters, the
//! corrector problem for the effective diffusion matrix, the random walk and
//! simple exclusion process on the giant cluster, and spectral continuum
//! references for the homogenized equations.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cluster;
pub mod config;
pub mod corrector;
pub mod dense;
pub mod env;
pub mod error;
pub mod exclusion;
pub mod graph;
pub mod io;
pub mod lattice;
pub mod numeric;
pub mod pde;
pub mod solver;
pub mod streams;
pub mod walk;

pub use error::{Error, Result};
