//! Synthetic desk-scale datasets: colored rectangles and discs on a dark
//! background. Classes are color-separable by construction so a small
//! network can fit them quickly, and the tile distribution is invariant
//! under the eight axis-aligned symmetries (shapes are sampled
//! symmetrically and each finished tile gets a random dihedral transform).

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::dihedral::{apply_transform, sample_transform, ALL_TRANSFORMS};
use crate::error::{Error, Result};

use super::{LabelSpace, Tile, TileRecord, BACKGROUND};

/// Geometry and noise settings for [`generate_synthetic_dataset`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_tiles: usize,
    /// Square tile side in pixels, at least 16.
    pub size: usize,
    pub channels: usize,
    /// Per-channel Gaussian pixel noise; class colors sit far apart
    /// relative to this.
    pub noise_sigma: f32,
    /// Inclusive range of shapes drawn per tile.
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_tiles: 200,
            size: 64,
            channels: 3,
            noise_sigma: 0.04,
            min_shapes: 3,
            max_shapes: 6,
        }
    }
}

const TIER_LEVELS: [f32; 3] = [0.85, 0.60, 0.35];
const LOW_LEVEL: f32 = 0.15;
const BACKGROUND_LEVEL: f32 = 0.05;

/// Deterministic palette: index 0 is the background color, indices 1..=k
/// the foreground classes. Colors occupy hypercube corners (one brightness
/// tier per corner cycle), so distinct classes differ by at least 0.2 in
/// some channel while the noise sigma stays an order of magnitude smaller.
pub fn class_palette(num_foreground: usize, channels: usize) -> Result<Vec<Vec<f32>>> {
    if channels == 0 {
        return Err(Error::invalid("palette needs at least one channel"));
    }
    let bits = channels.min(8);
    let corners = (1usize << bits) - 1;
    if num_foreground > corners * TIER_LEVELS.len() {
        return Err(Error::invalid(format!(
            "palette supports at most {} classes for {channels} channels, got {num_foreground}",
            corners * TIER_LEVELS.len()
        )));
    }
    let mut colors = vec![vec![BACKGROUND_LEVEL; channels]];
    for i in 1..=num_foreground {
        let code = 1 + (i - 1) % corners;
        let hi = TIER_LEVELS[(i - 1) / corners];
        colors.push(
            (0..channels)
                .map(|j| {
                    if j < bits && code >> j & 1 == 1 {
                        hi
                    } else {
                        LOW_LEVEL
                    }
                })
                .collect(),
        );
    }
    Ok(colors)
}

/// Generate `cfg.num_tiles` labeled tiles. Deterministic per seed. Tile `i`
/// always contains foreground class `(i mod k)+1` drawn topmost, so every
/// class appears in at least a `1/k` fraction of tiles.
pub fn generate_synthetic_dataset(
    seed: u64,
    cfg: &SynthConfig,
    labels: &LabelSpace,
) -> Result<Vec<Tile>> {
    labels.validate()?;
    let foreground = labels.foreground_ids();
    if foreground.len() < 2 {
        return Err(Error::invalid(
            "synthetic generation needs at least two foreground classes",
        ));
    }
    if cfg.size < 16 {
        return Err(Error::invalid(format!(
            "tile size {} too small, need at least 16",
            cfg.size
        )));
    }
    if cfg.num_tiles == 0 {
        return Err(Error::invalid("num_tiles must be positive"));
    }
    if cfg.min_shapes == 0 || cfg.max_shapes < cfg.min_shapes {
        return Err(Error::invalid(format!(
            "invalid shapes-per-tile range {}..={}",
            cfg.min_shapes, cfg.max_shapes
        )));
    }
    if !cfg.noise_sigma.is_finite() || cfg.noise_sigma < 0.0 {
        return Err(Error::invalid("noise_sigma must be finite and non-negative"));
    }
    let palette = class_palette(foreground.len(), cfg.channels)?;
    let noise = Normal::new(0.0f32, cfg.noise_sigma)
        .map_err(|e| Error::invalid(format!("bad noise sigma: {e}")))?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut tiles = Vec::with_capacity(cfg.num_tiles);
    for i in 0..cfg.num_tiles {
        let mut pixels = Array3::<f32>::zeros((cfg.channels, cfg.size, cfg.size));
        for (ch, &v) in palette[0].iter().enumerate() {
            pixels.index_axis_mut(Axis(0), ch).fill(v);
        }
        let mut mask = Array2::<u8>::from_elem((cfg.size, cfg.size), BACKGROUND);

        let extra = rng.random_range(cfg.min_shapes..=cfg.max_shapes) - 1;
        for _ in 0..extra {
            let class = foreground[rng.random_range(0..foreground.len())];
            draw_shape(&mut rng, &mut pixels, &mut mask, class, &palette, cfg.size);
        }
        let guaranteed = foreground[i % foreground.len()];
        draw_shape(&mut rng, &mut pixels, &mut mask, guaranteed, &palette, cfg.size);

        let t = sample_transform(&mut rng, &ALL_TRANSFORMS)?;
        let mut pixels = apply_transform(t, &pixels)?;
        let mask = apply_transform(t, &mask)?;
        if cfg.noise_sigma > 0.0 {
            for v in pixels.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }

        let mut histogram = BTreeMap::new();
        for &v in mask.iter() {
            *histogram.entry(v).or_insert(0u64) += 1;
        }
        let id = format!("synth{i:05}");
        tiles.push(Tile {
            record: TileRecord {
                id: id.clone(),
                raster_id: id,
                row: 0,
                col: 0,
                patch: cfg.size,
                partition: None,
                histogram,
            },
            pixels,
            labels: mask,
        });
    }
    Ok(tiles)
}

/// Paint one disc or rectangle. Centers are uniform over the tile and
/// half-extents are sampled identically per axis, so the shape law is
/// already symmetric under axis swaps and flips.
fn draw_shape<R: Rng + ?Sized>(
    rng: &mut R,
    pixels: &mut Array3<f32>,
    mask: &mut Array2<u8>,
    class: u8,
    palette: &[Vec<f32>],
    size: usize,
) {
    let color = &palette[class as usize];
    let lo = (size / 10).max(1) as i64;
    let hi = (size / 4).max(2) as i64;
    let n = size as i64;
    let cy = rng.random_range(0..n);
    let cx = rng.random_range(0..n);
    let disc = rng.random::<bool>();
    let (ry, rx) = if disc {
        let r = rng.random_range(lo..=hi);
        (r, r)
    } else {
        (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
    };
    for y in (cy - ry).max(0)..=(cy + ry).min(n - 1) {
        for x in (cx - rx).max(0)..=(cx + rx).min(n - 1) {
            if disc {
                let (dy, dx) = (y - cy, x - cx);
                if dy * dy + dx * dx > ry * ry {
                    continue;
                }
            }
            mask[[y as usize, x as usize]] = class;
            for (ch, &v) in color.iter().enumerate() {
                pixels[[ch, y as usize, x as usize]] = v;
            }
        }
    }
}
