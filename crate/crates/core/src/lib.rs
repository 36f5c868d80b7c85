//! Downlink simulator and power optimizer for cell-free massive MIMO with a
//! hybrid coherent (CJT) / non-coherent (NCJT) joint-transmission serving mode
//! under per-AP fronthaul capacity limits.
//!
//! Pipeline: [`netgen`] draws a scenario, [`chanstat`] estimates the precoding
//! statistics by Monte Carlo, [`rates`] evaluates hardening-bound rates and
//! fronthaul loads, [`sca`] optimizes the powers, and [`runner`] drives the
//! experiments and writes CSV output.

pub mod chanstat;
pub mod config;
pub mod error;
pub mod netgen;
pub mod output;
pub mod rates;
pub mod runner;
pub mod sca;
pub mod seeding;

pub use config::SystemConfig;
pub use error::{Error, Result};
