//! Attention-based multiple-instance learning for continuous biomarkers.
//!
//! The crate covers the whole desk-scale pipeline: tile preprocessing,
//! site-aware cross-validation, an attention-MIL model with classification
//! and regression heads, training presets, evaluation statistics, Cox
//! survival analysis, attention heatmaps, and a synthetic cohort generator
//! with known ground truth.

pub mod attmil;
pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod heatmaps;
pub mod numeric;
pub mod splitting;
pub mod survival;
pub mod synth;
pub mod tile_prep;
pub mod training;

pub use error::{Error, Result};
