//! Per-frame mass regression from run-level totals.
//!
//! A run is an ordered image sequence with one measured total mass. The
//! network predicts a per-frame mass density, each prediction is scaled by
//! the frame's elevator speed and capture interval, and the scaled values
//! are summed and compared against the run total. [`trainer`] accumulates
//! the gradient of that loss batch by batch so memory does not grow with
//! run length.

pub mod data;
pub mod error;
pub mod model;
pub mod report;
pub mod synthgen;
pub mod trainer;
pub mod baseline;
pub mod explain;

pub use error::{Error, Result};
