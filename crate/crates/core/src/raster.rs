//! 8-bit grayscale PNG previews of grids.

use std::path::Path;

use image::GrayImage;

use crate::data::ImageGrid;
use crate::error::Result;

/// Maps `[lo, hi]` linearly to `[0, 255]`, clipping outside values.
pub fn to_gray(grid: &ImageGrid, lo: f64, hi: f64) -> GrayImage {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = grid
        .values()
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    GrayImage::from_raw(grid.width() as u32, grid.height() as u32, pixels).expect("buffer size")
}

/// Writes a preview scaled by the grid's nominal range.
pub fn save_gray(grid: &ImageGrid, path: &Path) -> Result<()> {
    to_gray(grid, grid.range_lo(), grid.range_hi()).save(path)?;
    Ok(())
}

/// Writes a preview scaled by the grid's own min and max.
pub fn save_gray_autoscale(grid: &ImageGrid, path: &Path) -> Result<()> {
    to_gray(grid, grid.min(), grid.max()).save(path)?;
    Ok(())
}
