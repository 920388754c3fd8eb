//! Error calculus on finite-dimensional and Wiener spaces, with
//! applications to Black-Scholes hedging, level-dependent volatility and
//! integration by parts on the Monte Carlo sample space.

pub mod black_scholes;
pub mod error;
pub mod error_algebra;
pub mod level_vol;
pub mod mc_ibp;
pub mod numerics;
pub mod rng;
pub mod stats;
pub mod wiener;

pub use error::{Error, Result};
