//! Building footprint extraction from multispectral satellite scenes.
//!
//! The pipeline normalizes multiband rasters, encodes footprint polygons as
//! signed-distance labels, trains a small encoder-decoder network on three
//! input variants, averages their predictions and scores the extracted
//! polygons against ground truth at IoU 0.5.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! and [`Execution::Parallel`] is requested; results do not depend on the
//! thread count.

pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod geotransform;
pub mod labeling;
pub mod nn;
pub mod parallel;
pub mod raster;
pub mod tiling;

pub use error::{Error, Result};
pub use geotransform::GeoTransform;
pub use parallel::Execution;
pub use raster::MultiBandImage;
