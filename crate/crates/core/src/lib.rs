//! Mixture-of-knowledge-expert adapters for a frozen Vision Transformer,
//! trained with margin-truncated, difficulty-aware multi-label losses.

pub mod adapters;
pub mod collab;
pub mod config;
pub mod datagen;
pub mod error;
pub mod format;
pub mod layers;
pub mod losses;
pub mod moke;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
