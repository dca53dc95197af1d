//! Motion segmentation from variational optical flow.
//!
//! The pipeline estimates dense flow per frame pair by minimising a
//! Charbonnier energy, turns flow into moving-object proposals, optionally
//! refines masks with a small encoder-decoder network, and scores masks by
//! intersection over union.

pub mod config;
pub mod dataset;
pub mod energy;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod mop;
pub mod pipeline;
pub mod segnet;
pub mod selftest;
pub mod solver;
pub mod synthetic;

pub use error::{Error, Result};
