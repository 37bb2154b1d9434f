//! Fixed-stride tiling with final-offset clamping.

use std::collections::BTreeMap;

use ndarray::s;

use crate::error::{Error, Result};

use super::{Raster, Tile, TileRecord};

/// Start offsets of `patch`-sized windows along an axis of length `extent`.
///
/// Offsets advance by the fixed stride `patch - overlap`; the final offset is
/// clamped to `extent - patch` so the last tile never overruns the raster.
/// The union of windows covers the whole axis and consecutive windows overlap
/// by at least `overlap` pixels.
pub fn tile_positions(extent: usize, patch: usize, overlap: usize) -> Result<Vec<usize>> {
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if patch > extent {
        return Err(Error::invalid(format!(
            "patch {patch} exceeds raster extent {extent}"
        )));
    }
    if overlap >= patch {
        return Err(Error::invalid(format!(
            "overlap {overlap} must be smaller than patch {patch}"
        )));
    }
    let stride = patch - overlap;
    let mut offsets = Vec::new();
    let mut pos = 0usize;
    while pos + patch <= extent {
        offsets.push(pos);
        pos += stride;
    }
    if offsets.last().map(|&last| last + patch < extent).unwrap_or(true) {
        offsets.push(extent - patch);
    }
    Ok(offsets)
}

/// Cut a raster into `patch`x`patch` tiles using [`tile_positions`] on both
/// axes. Each tile carries its label histogram. Tiles are emitted in
/// row-major origin order, so the output is deterministic.
pub fn tile_raster(raster: &Raster, patch: usize, overlap: usize) -> Result<Vec<Tile>> {
    let rows = tile_positions(raster.height(), patch, overlap)?;
    let cols = tile_positions(raster.width(), patch, overlap)?;
    let mut tiles = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            let pixels = raster
                .pixels
                .slice(s![.., r..r + patch, c..c + patch])
                .to_owned();
            let labels = raster.labels.slice(s![r..r + patch, c..c + patch]).to_owned();
            let mut histogram = BTreeMap::new();
            for &v in labels.iter() {
                *histogram.entry(v).or_insert(0u64) += 1;
            }
            let record = TileRecord {
                id: format!("{}_r{:05}_c{:05}", raster.id, r, c),
                raster_id: raster.id.clone(),
                row: r,
                col: c,
                patch,
                partition: None,
                histogram,
            };
            tiles.push(Tile {
                record,
                pixels,
                labels,
            });
        }
    }
    Ok(tiles)
}
