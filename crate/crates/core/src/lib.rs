//! District-specific CT-to-PET translation with 3D conditional GANs.
//!
//! The body is partitioned into four anatomical districts (head, trunk,
//! arms, legs); each district gets its own generator, and the synthesized
//! districts are reassembled into a whole-body volume. A single whole-body
//! model serves as the baseline.

pub mod config;
pub mod dataset;
pub mod districts;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod models;
pub mod patches;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
