//! Dynamic optimal mass transport between densities with differing compact
//! supports, solved on a space-time grid.
//!
//! The mass density and momentum are blended into a single solenoidal
//! space-time field W = (rho, p) over a compact support whose boundary is
//! carried by a level set. The kinetic action is minimized by
//! Helmholtz-projected gradient descent with a Newton-sized step; the
//! support boundary co-evolves in a second phase driven by the boundary
//! sensitivity of the action, subject to user constraints. At the optimum
//! the action equals half the squared Wasserstein-2 distance.

pub mod error;
pub mod grid;
pub mod support;
pub mod fields;
pub mod elliptic;

pub use error::{Error, Result};
