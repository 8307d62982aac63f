pub mod bank;
pub mod cli;
pub mod codec;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod pseudo;
pub mod saliency;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Grid2D, Rect};
