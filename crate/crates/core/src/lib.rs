pub mod compositor;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod grid_context;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod polygonize;
pub mod pseudolabel;
pub mod raster;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
