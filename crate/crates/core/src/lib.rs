pub mod animation;
pub mod augment;
pub mod connectivity;
pub mod dataset;
pub mod evaluation;
pub mod error;
pub mod losses;
pub mod model;
pub mod network;
pub mod nn;
pub mod raster;
pub mod render;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
