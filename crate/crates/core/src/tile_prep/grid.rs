use image::imageops::{self, FilterType};
use image::RgbImage;

use super::{Patch, TILE_EDGE_UM, TILE_PX};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub tile_edge_um: f64,
    pub tile_px: u32,
    pub source_extent_px: u32,
    /// Grid indices; tile (x, y) covers source pixels from `x * extent`.
    pub positions: Vec<(u32, u32)>,
}

impl TileGrid {
    /// Microns per pixel of the resampled tiles.
    pub fn output_mpp(&self) -> f64 {
        self.tile_edge_um / self.tile_px as f64
    }
}

/// Non-overlapping, top-left anchored grid; partial edge tiles are dropped.
pub fn build_tile_grid(raster_w: u32, raster_h: u32, source_mpp: f64) -> Result<TileGrid> {
    if !(source_mpp.is_finite() && source_mpp > 0.0) {
        return Err(Error::Invalid(format!("source mpp {source_mpp} must be positive")));
    }
    let extent = (TILE_EDGE_UM / source_mpp).round();
    if extent < 1.0 || extent > u32::MAX as f64 {
        return Err(Error::Invalid(format!("tile extent {extent} px out of range")));
    }
    let extent = extent as u32;
    let (nx, ny) = (raster_w / extent, raster_h / extent);
    if nx == 0 || ny == 0 {
        log::warn!("raster {raster_w}x{raster_h} is smaller than one {extent}px tile");
    }
    let positions = (0..ny).flat_map(|y| (0..nx).map(move |x| (x, y))).collect();
    Ok(TileGrid {
        tile_edge_um: TILE_EDGE_UM,
        tile_px: TILE_PX,
        source_extent_px: extent,
        positions,
    })
}

/// Crops one grid square and resamples it bilinearly to the tile size.
pub fn extract_patch(raster: &RgbImage, grid: &TileGrid, pos: (u32, u32), source_mpp: f64) -> Result<Patch> {
    let e = grid.source_extent_px;
    let (x0, y0) = (pos.0 * e, pos.1 * e);
    if x0 + e > raster.width() || y0 + e > raster.height() {
        return Err(Error::Invalid(format!("tile {pos:?} exceeds the raster")));
    }
    let crop = imageops::crop_imm(raster, x0, y0, e, e).to_image();
    let pixels = if e == grid.tile_px {
        crop
    } else {
        imageops::resize(&crop, grid.tile_px, grid.tile_px, FilterType::Triangle)
    };
    Patch::new(pixels, (pos.0 as i32, pos.1 as i32), source_mpp)
}
