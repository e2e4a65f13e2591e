pub mod checkpoint;
pub mod classifier;
pub mod counterfactual;
pub mod error;
pub mod experiment;
pub mod forge;
pub mod metrics;
pub mod nn;
pub mod raster;

pub use error::{Error, Result};
pub use raster::Image;
