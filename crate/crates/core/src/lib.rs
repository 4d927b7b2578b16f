//! Simulation and analysis of entanglement-based (BBM92) quantum key
//! distribution over telecom fibers that also carry classical traffic.
//!
//! The pipeline runs source ([`pairgen`]) → fiber arms ([`channel`]) →
//! detectors ([`receiver`]) → timetag processing ([`tagproc`]) → key rates
//! ([`distill`]). [`netsim`] strings the stages together for a star network
//! with a central source, and [`analytic`] gives closed-form expectations
//! for the same model.

pub mod analytic;
pub mod channel;
pub mod distill;
pub mod error;
pub mod netsim;
pub mod pairgen;
pub mod receiver;
pub mod seed;
pub mod tagproc;

pub use error::{Error, Result};

/// Time in integer picoseconds.
pub type Tick = i64;

pub const PS_PER_S: f64 = 1e12;
