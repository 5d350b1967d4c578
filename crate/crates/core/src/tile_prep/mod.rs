//! Tile pipeline: tessellation grid, Canny-based background rejection,
//! brightness standardization and Macenko stain normalization.

mod brightness;
mod canny;
mod grid;
mod macenko;
mod pipeline;

use image::RgbImage;

use crate::error::{Error, Result};

pub use brightness::{luminance, luminance_p90, standardize_brightness, P90_SLACK, TARGET_P90};
pub use canny::{canny_edges, count_segments, edge_segments, reject_patch, CannyConfig};
pub use grid::{build_tile_grid, extract_patch, TileGrid};
pub use macenko::{
    estimate_stains, nnls2, normalize_patch, optical_density, StainProfile, DEFAULT_ALPHA,
    DEFAULT_BETA, MIN_TISSUE_FRACTION,
};
pub use pipeline::{
    preprocess_dir, preprocess_raster, process_patch, write_tile_manifest, PreprocessConfig,
    PreprocessSummary, RejectReason, TileRecord,
};

pub const TILE_EDGE_UM: f64 = 256.0;
pub const TILE_PX: u32 = 224;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: RgbImage,
    pub grid_pos: (i32, i32),
    pub source_mpp: f64,
}

impl Patch {
    pub fn new(pixels: RgbImage, grid_pos: (i32, i32), source_mpp: f64) -> Result<Self> {
        if pixels.dimensions() != (TILE_PX, TILE_PX) {
            return Err(Error::DimensionMismatch(format!(
                "patch is {:?}, expected {TILE_PX}x{TILE_PX}",
                pixels.dimensions()
            )));
        }
        if !(source_mpp.is_finite() && source_mpp > 0.0) {
            return Err(Error::Invalid(format!("source mpp {source_mpp} must be positive")));
        }
        Ok(Self {
            pixels,
            grid_pos,
            source_mpp,
        })
    }
}
