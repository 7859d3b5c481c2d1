//! Grid layout policies for whole-page recommendation.
//!
//! The crate trains a pointer-style policy that fills a 2-D grid of tiles
//! with items, one (item, tile) pair per decode step, against simulated
//! cascade-click feedback. Everything is 64-bit, single-threaded, and
//! deterministic under a fixed root seed.

pub mod adam;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod dataset;
pub mod env;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod page;
pub mod params;
pub mod policy;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
