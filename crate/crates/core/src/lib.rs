//! Cycle-consistent cross-modal random walks for localizing multiple sound
//! sources, trained and evaluated on procedurally generated audio-visual
//! scenes with known ground truth.

pub mod arrayfile;
pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod scenegen;
pub mod trainer;
pub mod walk;

pub use error::{Error, Result};
