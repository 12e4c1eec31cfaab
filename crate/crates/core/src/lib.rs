//! Compressing mixture-of-experts layers by replacing less important experts
//! with shared bases plus low-rank adapters, and recovering accuracy with an
//! annealed hand-over from the original weights.
//!
//! The crate is a self-contained lab: a toy MoE network with its own
//! reverse-mode autodiff, synthetic tasks with planted structure, and the
//! full calibrate → select → group → construct → fine-tune pipeline.

pub mod annealing;
pub mod calibration;
pub mod construction;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod selection;
pub mod tasks;

pub use error::{Error, Result};
