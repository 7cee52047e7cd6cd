pub mod config;
pub mod dataset;
pub mod detector;
pub mod edit;
pub mod edit_script;
pub mod error;
pub mod field;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod registry;
pub mod render;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
