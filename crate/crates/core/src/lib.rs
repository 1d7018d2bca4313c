//! Solver and verifiers for equilibrium singular control laws under
//! non-exponential discounting.
//!
//! The equilibrium value V solves a free-boundary problem whose source is
//! coupled to an s-indexed auxiliary family f^s through the diagonal
//! derivative d(x, t) = ∂_s f^s(x, t)|_{s=t}. [`equilibrium::solve_equilibrium`]
//! alternates an obstacle solve for v = V_x ([`obstacle`]) with family solves
//! on the resulting waiting region ([`coupling`]) until the pair is
//! self-consistent. [`simulate`] checks the result by Monte Carlo.

pub mod coupling;
pub mod equilibrium;
pub mod error;
pub mod grid;
pub mod model;
pub mod obstacle;
pub mod operators;
pub mod simulate;

pub use error::{Error, Result};
