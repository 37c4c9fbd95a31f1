//! Routability-map prediction from raw placement point clouds.

pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod io;
pub mod lds;
pub mod metrics;
pub mod model;
pub mod params;
pub mod train;

pub use config::{Config, Precision, TrainConfig};
pub use error::{Error, Result};
