//! Numerical laboratory for metastability of randomly perturbed expanding
//! interval maps.
//!
//! The crate models piecewise-affine expanding maps whose invariant
//! components become metastable wells under small asymmetric additive
//! noise, and provides the machinery to study them quantitatively:
//!
//! - [`maps`]: the maps themselves, their structural assumptions, and the
//!   per-component geometry (branches, preimages, escape points);
//! - [`scenarios`]: the built-in two- and three-well systems with their
//!   noise-sign assignments and restricted (folded) dynamics;
//! - [`noise`]: regional asymmetric noise laws, coupled through one master
//!   draw per step, with transition kernels and escape diagnostics;
//! - [`wells`]: holes and metastable wells induced by boundary
//!   neighborhoods, and measures of densities over them;
//! - [`ulam`]: grid (Ulam) discretizations of the transfer operators,
//!   stationary densities, spectral gaps, bounded-variation norms, and
//!   operator-closeness estimates;
//! - [`simulate`]: Monte Carlo for the perturbed chain and its sped-up
//!   jump process — escape times, transition-rate tallies, trace paths;
//! - [`resolvent`]: the generator of the jump process on the grid,
//!   resolvent solves, reduced finite-state problems, capacities, and
//!   rate identities;
//! - [`stability`]: comparison of the perturbed invariant measure with the
//!   metastable limit mixture and the associated closeness bounds.

pub mod geometry;
pub mod grid;
mod linalg;
pub mod maps;
pub mod noise;
pub mod resolvent;
pub mod scenarios;
pub mod simulate;
pub mod stability;
pub mod ulam;
pub mod wells;

pub use geometry::{Interval, IntervalUnion};
pub use maps::{PiecewiseLinearMap, WellId};
