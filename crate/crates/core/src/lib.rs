//! Multimodal anterior chamber inflammation diagnosis.
//!
//! Slit-lamp images are encoded by small residual convnets, AS-OCT scans are
//! quantified into cell count, cell area and aqueous-to-air relative
//! intensity, and the resulting tabular record steers a channel attention over
//! the AC observation features before a transformer fuses all modalities.

pub mod cli;
pub mod ecim;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod icim;
pub mod io;
pub mod model;
pub mod quantifier;
pub mod rng;
pub mod synthgen;
pub mod tabular;
pub mod tensor;

pub use error::{Error, Result};
