//! Finite-blocklength link model, joint-convexity region analysis, and
//! min-max blocklength/power allocation.
//!
//! Modules:
//! - [`fbl`]: error-probability model of a fixed-gain link and the analytic
//!   curvature of its Q-function argument.
//! - [`region`]: certificates for joint convexity of the error in
//!   (blocklength, power), with a numeric PSD validation sweep.
//! - [`solver`]: small dense log-barrier interior-point minimizer.
//! - [`allocator`]: multi-user min-max error allocation, solved jointly,
//!   by integer enumeration, and by alternating search.
//! - [`fading`]: quasi-static fading extensions (per-state and average-CSI).
//! - [`relay`]: two-hop decode-and-forward end-to-end error optimization.

pub mod allocator;
pub mod error;
pub mod fading;
pub mod fbl;
pub mod region;
pub mod relay;
pub mod rng;
pub mod solver;

mod exec;

pub use error::{Error, Result};
