//! Random walk coverage of the discrete torus `Z_n^d`, `d >= 3`.
//!
//! The crate simulates the walk, decomposes trajectories into excursions
//! across annuli, computes lattice potential-theory constants, samples and
//! tests late-point fields, and checks Monte Carlo output against exact
//! linear-algebra solutions on small tori.

pub mod error;
pub mod excursion;
pub mod harness;
pub mod latepoints;
pub mod lattice;
pub mod oracle;
pub mod potential;
pub mod rng;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
pub use lattice::{AnnulusSpec, Decomposition, Metric, Point, ShapeKind, ShapeSpec, TorusGeometry};
pub use walk::{VisitTracker, WalkConfig, Walker};
