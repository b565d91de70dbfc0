//! Two-stage structure-then-render image generation at desk scale.

pub mod backbone;
pub mod blob;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod flow;
pub mod image;
pub mod lora;
pub mod pipeline;
pub mod rng;
pub mod structure;

pub use error::{Error, Result};
pub use image::ImageGrid;
pub use structure::{CannyKind, CannyMap, CannyParams};
