pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod predictor;
pub mod probe;
pub mod selfcheck;
pub mod synth;
pub mod text;
pub mod train;
pub mod trajectory;
pub mod vision;

pub use error::{Error, Result};
