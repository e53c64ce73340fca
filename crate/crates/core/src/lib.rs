//! Constructive equidecomposition on finite windows of the orbit graph `G_d`.
//!
//! The pipeline runs bottom-up: torus geometry and lattice windows, exact dyadic
//! flows `f_m`, toast layers, integer rounding along component boundaries, and a
//! Voronoi matching that turns the integer flow into translation pieces.

pub mod discrepancy;
pub mod discrete;
pub mod equi;
pub mod error;
pub mod flows;
pub mod grid;
pub mod io;
pub mod lattice;
pub mod maxflow;
pub mod rounding;
pub mod scalar;
pub mod toast;
pub mod torus;

pub use error::{Error, Result};
pub use lattice::{Cube, Window};
pub use scalar::Scalar;
pub use torus::{GeneratorSet, Region, TorusPoint};

/// Default number of fraction bits for torus coordinates.
pub const DEFAULT_BITS: u32 = 62;

pub type Real = f64;
pub type Real32 = f32;
pub type DiscrepancyReport = discrepancy::DiscrepancyReport<f64>;
pub type EtkReport = discrepancy::EtkReport<f64>;
pub type BoxDimensionReport = equi::BoxDimensionReport<f64>;
