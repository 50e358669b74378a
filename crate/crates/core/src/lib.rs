//! Milestoning for elliptic diffusion processes.
//!
//! The crate covers the whole pipeline needed to compute mean first passage
//! times (MFPTs) from coarse milestone statistics:
//!
//! - [`model`]: diffusion models `dX = (b + div a) dt + sqrt(2) sigma dW`,
//!   their invariant densities and stationary currents.
//! - [`integrate`]: Euler–Maruyama stepping with level-crossing detection and
//!   reflective confinement.
//! - [`milestones`]: milestones as nested level sets of a scalar function and
//!   the coarse-grained index chain.
//! - [`committor`]: grid solvers for the backward/forward committor, level-set
//!   extraction and the hitting densities on isocommittor milestones.
//! - [`estimate`]: transition statistics from long runs or from parallel
//!   reflected cells, the first-hitting kernel and a memory diagnostic.
//! - [`mfpt`]: the milestoning Poisson system, the exact-milestoning kernel
//!   equation, direct sampling and a 1D quadrature oracle.
//! - [`surfaces`]: curve-based approximations of isocommittor surfaces.
//! - [`validation`]: the end-to-end acceptance criteria.
//!
//! Points are always stored as 2-vectors; one-dimensional models keep the
//! second component at zero.

pub mod committor;
pub mod contour;
pub mod error;
pub mod estimate;
pub mod grid;
pub mod integrate;
pub mod io;
pub mod linalg;
pub mod milestones;
pub mod mfpt;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod special;
pub mod stats;
pub mod surfaces;
pub mod validation;

pub use error::{Error, Result};

/// A position in the (at most two-dimensional) state space.
pub type Point = nalgebra::Vector2<f64>;

/// A 2x2 matrix (diffusion tensor, noise factor, Hessian).
pub type Tensor = nalgebra::Matrix2<f64>;

/// Shorthand for building a [`Point`].
#[inline]
pub fn point(x: f64, y: f64) -> Point {
    Point::new(x, y)
}
