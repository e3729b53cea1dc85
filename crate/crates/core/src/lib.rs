//! Distributed semantic SLAM with hybrid (continuous + discrete) beliefs.
//!
//! Each robot keeps a mixture of Gaussian pose beliefs, one per joint class
//! realization of the objects it knows about, and fuses the beliefs of other
//! robots through a timestamped stack that removes already-counted
//! information before multiplying new information in.

pub mod classifier;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod gaussian;
pub mod geometry;
pub mod hybrid;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
