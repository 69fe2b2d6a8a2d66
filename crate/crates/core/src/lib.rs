//! Multi-representation prompt tuning on a miniature dual encoder.
//!
//! The crate trains deep visual and text prompts for a small image/text
//! transformer pair whose weights stay frozen. Each image is described three
//! ways: the prompted class token (global), the projected visual prompt
//! outputs (augmented) and the unprompted class token (vanilla). Predictions
//! from the three are combined at the logit level.
//!
//! Everything runs on synthetic data with deterministic seeding; see the
//! `examples/` directory for one runnable program per capability.

pub mod datagen;
pub mod encoders;
pub mod ensemble;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod image;
pub mod numerics;
pub mod rng;
pub mod tuning;

pub use error::{Error, Result};
