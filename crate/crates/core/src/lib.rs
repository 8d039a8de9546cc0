//! Numerical stochastic calculus for orthogonal cylindrical martingale-valued
//! measures on finite-dimensional truncations of Hilbert spaces.

pub mod burkholder;
pub mod ensemble;
pub mod error;
pub mod hilbert;
pub mod integrate;
pub mod ito;
pub mod noise;
pub mod quadvar;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
