//! Sparse-anchor motion synthesis.
//!
//! The pipeline runs anchors → scaffold features → token-aligned memory →
//! discrete token sampling → decoded motion → residual scaffold → routed
//! soft-token refinement. Every stage is a pure function of its inputs plus an
//! explicit seeded generator where sampling is involved.

pub mod anchorkv;
pub mod cli;
pub mod error;
pub mod io;
pub mod par;
pub mod routesolver;
pub mod spline;
pub mod scaffold;
pub mod synthworld;
pub mod tmd;

pub use error::{Error, Result};
