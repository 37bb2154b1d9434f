//! Loader for aerial benchmark directories: `<stem>_RGB.<ext>` or
//! `<stem>_RGBIR.<ext>` image rasters paired with `<stem>_label.<ext>`
//! color-coded masks (`ext` one of png/tif/tiff).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

use super::{LabelSpace, Raster};

/// The benchmark's published color legend for label rasters.
pub const POTSDAM_LEGEND: [([u8; 3], &str); 6] = [
    ([255, 255, 255], "impervious_surfaces"),
    ([0, 0, 255], "building"),
    ([0, 255, 255], "low_vegetation"),
    ([0, 255, 0], "tree"),
    ([255, 255, 0], "car"),
    ([255, 0, 0], "clutter"),
];

/// Label space with background 0 followed by the legend classes in order.
pub fn potsdam_label_space() -> LabelSpace {
    let mut names = vec!["background"];
    names.extend(POTSDAM_LEGEND.iter().map(|(_, n)| *n));
    LabelSpace::new(&names).expect("static names are distinct")
}

const IMAGE_SUFFIXES: [(&str, usize); 6] = [
    ("_RGB.png", 3),
    ("_RGB.tif", 3),
    ("_RGB.tiff", 3),
    ("_RGBIR.png", 4),
    ("_RGBIR.tif", 4),
    ("_RGBIR.tiff", 4),
];
const LABEL_SUFFIXES: [&str; 3] = ["_label.png", "_label.tif", "_label.tiff"];

/// Load every image/label pair under `root`, sorted by stem. Pixels are
/// scaled to `[0, 1]`; masks are decoded through [`POTSDAM_LEGEND`].
pub fn load_potsdam_layout(root: impl AsRef<Path>) -> Result<Vec<Raster>> {
    let root = root.as_ref();
    let mut images: BTreeMap<String, (std::path::PathBuf, usize)> = BTreeMap::new();
    let mut labels: BTreeMap<String, std::path::PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(root)
        .map_err(|e| Error::data(format!("cannot list {}: {e}", root.display())))?
    {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some((stem, channels)) = IMAGE_SUFFIXES
            .iter()
            .find_map(|(s, c)| name.strip_suffix(s).map(|stem| (stem.to_string(), *c)))
        {
            if images.insert(stem.clone(), (path.clone(), channels)).is_some() {
                return Err(Error::data(format!(
                    "raster {stem} has more than one image file"
                )));
            }
        } else if let Some(stem) = LABEL_SUFFIXES
            .iter()
            .find_map(|s| name.strip_suffix(s).map(str::to_string))
        {
            labels.insert(stem, path);
        }
    }
    if images.is_empty() {
        return Err(Error::data(format!(
            "no *_RGB / *_RGBIR rasters found under {}",
            root.display()
        )));
    }
    for stem in labels.keys() {
        if !images.contains_key(stem) {
            return Err(Error::data(format!(
                "label file for {stem} has no matching image raster"
            )));
        }
    }

    let space = potsdam_label_space();
    images
        .into_iter()
        .map(|(stem, (image_path, channels))| {
            let label_path = labels.get(&stem).ok_or_else(|| {
                Error::data(format!("raster {stem} is missing its _label file"))
            })?;
            let pixels = load_pixels(&image_path, channels)?;
            let mask = load_mask(label_path, &space)?;
            let (_, h, w) = pixels.dim();
            if mask.dim() != (h, w) {
                return Err(Error::shape(format!(
                    "raster {stem}: image is {h}x{w} but label mask is {}x{}",
                    mask.dim().0,
                    mask.dim().1
                )));
            }
            Raster::new(stem, pixels, mask)
        })
        .collect()
}

fn load_pixels(path: &Path, channels: usize) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((channels, h, w));
    if channels == 4 {
        let rgba = img.to_rgba8();
        for (x, y, p) in rgba.enumerate_pixels() {
            for ch in 0..4 {
                out[[ch, y as usize, x as usize]] = f32::from(p.0[ch]) / 255.0;
            }
        }
    } else {
        let rgb = img.to_rgb8();
        for (x, y, p) in rgb.enumerate_pixels() {
            for ch in 0..3 {
                out[[ch, y as usize, x as usize]] = f32::from(p.0[ch]) / 255.0;
            }
        }
    }
    Ok(out)
}

fn load_mask(path: &Path, space: &LabelSpace) -> Result<Array2<u8>> {
    let legend: Vec<([u8; 3], u8)> = POTSDAM_LEGEND
        .iter()
        .map(|(rgb, name)| (*rgb, space.id_of(name).expect("legend names in space")))
        .collect();
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut mask = Array2::zeros((h, w));
    for (x, y, p) in img.enumerate_pixels() {
        let id = legend
            .iter()
            .find_map(|(rgb, id)| (*rgb == p.0).then_some(*id))
            .ok_or_else(|| {
                Error::data(format!(
                    "unknown label color ({}, {}, {}) at ({x}, {y}) in {}",
                    p.0[0],
                    p.0[1],
                    p.0[2],
                    path.display()
                ))
            })?;
        mask[[y as usize, x as usize]] = id;
    }
    Ok(mask)
}
