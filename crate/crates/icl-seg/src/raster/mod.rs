//! Data ingestion: rasters, tiles, label spaces, task sequences, disjoint
//! partitions, synthetic data generation, and the on-disk tile store.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod partition;
mod potsdam;
mod sequence;
mod store;
mod synthetic;
mod tiling;

pub use partition::{partition_disjoint, split_validation};
pub use potsdam::{load_potsdam_layout, potsdam_label_space, POTSDAM_LEGEND};
pub use sequence::{make_task_sequence, remap_labels, remap_to_set, SequencePlan};
pub use store::{load_tiles, read_manifest, read_meta, write_dataset, DatasetMeta, StoredDataset};
pub use synthetic::{generate_synthetic_dataset, SynthConfig};
pub use tiling::{tile_positions, tile_raster};

/// Class id of the background label.
pub const BACKGROUND: u8 = 0;

/// A multi-channel image with an aligned label map.
#[derive(Debug, Clone)]
pub struct Raster {
    pub id: String,
    /// `[C, H, W]`, C is 3 (RGB) or 4 (RGBIR).
    pub pixels: Array3<f32>,
    /// `[H, W]` of class ids, 0 = background.
    pub labels: Array2<u8>,
}

impl Raster {
    pub fn new(id: impl Into<String>, pixels: Array3<f32>, labels: Array2<u8>) -> Result<Self> {
        let (_, h, w) = pixels.dim();
        if labels.dim() != (h, w) {
            return Err(Error::shape(format!(
                "pixel grid is {h}x{w} but label grid is {:?}",
                labels.dim()
            )));
        }
        Ok(Raster {
            id: id.into(),
            pixels,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }
}

/// Bookkeeping for one extracted tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub id: String,
    pub raster_id: String,
    /// Origin in source-raster pixels.
    pub row: usize,
    pub col: usize,
    /// Side length of the square tile.
    pub patch: usize,
    /// Class partition the tile was assigned to, if any.
    pub partition: Option<u8>,
    /// Pixel count per class id present in the tile; sums to `patch * patch`.
    pub histogram: BTreeMap<u8, u64>,
}

impl TileRecord {
    /// Non-background class ids present in the tile, ascending.
    pub fn present_classes(&self) -> Vec<u8> {
        self.histogram
            .iter()
            .filter(|(&c, &n)| c != BACKGROUND && n > 0)
            .map(|(&c, _)| c)
            .collect()
    }
}

/// One tile's data together with its record.
#[derive(Debug, Clone)]
pub struct Tile {
    pub record: TileRecord,
    /// `[C, P, P]`.
    pub pixels: Array3<f32>,
    /// `[P, P]` of global class ids.
    pub labels: Array2<u8>,
}

/// The ordered set of classes, background first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    /// `(class id, name)` pairs; ids dense from 0, id 0 is the background.
    pub classes: Vec<(u8, String)>,
}

impl LabelSpace {
    /// Build from names, which must start with the background entry.
    pub fn new(names: &[&str]) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for name in names {
            if !seen.insert(*name) {
                return Err(Error::invalid(format!("duplicate class name {name:?}")));
            }
        }
        if names.is_empty() {
            return Err(Error::invalid("label space needs at least the background"));
        }
        Ok(LabelSpace {
            classes: names
                .iter()
                .enumerate()
                .map(|(i, n)| (i as u8, n.to_string()))
                .collect(),
        })
    }

    /// Background plus `k` generic foreground classes (`class_1`..`class_k`).
    pub fn generic(k: usize) -> Self {
        let mut names = vec!["background".to_string()];
        names.extend((1..=k).map(|i| format!("class_{i}")));
        LabelSpace {
            classes: names
                .into_iter()
                .enumerate()
                .map(|(i, n)| (i as u8, n))
                .collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn name_of(&self, id: u8) -> Option<&str> {
        self.classes
            .iter()
            .find(|(c, _)| *c == id)
            .map(|(_, n)| n.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.classes
            .iter()
            .find(|(_, n)| n == name)
            .map(|(c, _)| *c)
    }

    /// Foreground ids in ascending order.
    pub fn foreground_ids(&self) -> Vec<u8> {
        self.classes
            .iter()
            .map(|(c, _)| *c)
            .filter(|&c| c != BACKGROUND)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        for (i, (id, _)) in self.classes.iter().enumerate() {
            if *id as usize != i {
                return Err(Error::invalid(format!(
                    "class ids must be dense from 0, found {id} at position {i}"
                )));
            }
        }
        Ok(())
    }
}

/// One learning step: the classes introduced at that step and the cumulative
/// set seen so far.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSpec {
    pub index: usize,
    /// Classes introduced at this step, in introduction order.
    pub new_classes: Vec<u8>,
    /// All classes seen up to and including this step (background included).
    pub cumulative: Vec<u8>,
}

/// An ordered list of learning steps over a label space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub steps: Vec<StepSpec>,
}

impl TaskSequence {
    /// Validate disjointness and cumulative bookkeeping against a label space.
    pub fn from_groups(groups: Vec<Vec<u8>>, labels: &LabelSpace) -> Result<Self> {
        labels.validate()?;
        if groups.is_empty() {
            return Err(Error::invalid("task sequence needs at least one step"));
        }
        let known: std::collections::BTreeSet<u8> =
            labels.classes.iter().map(|(c, _)| *c).collect();
        let mut seen = std::collections::BTreeSet::new();
        let mut cumulative = vec![BACKGROUND];
        let mut steps = Vec::with_capacity(groups.len());
        for (index, group) in groups.into_iter().enumerate() {
            if group.is_empty() {
                return Err(Error::invalid(format!("step {index} introduces no classes")));
            }
            for &c in &group {
                if c == BACKGROUND {
                    return Err(Error::invalid("background cannot be introduced as a class"));
                }
                if !known.contains(&c) {
                    return Err(Error::invalid(format!("unknown class id {c} in step {index}")));
                }
                if !seen.insert(c) {
                    return Err(Error::invalid(format!(
                        "class id {c} appears in more than one step"
                    )));
                }
            }
            cumulative.extend(group.iter().copied());
            steps.push(StepSpec {
                index,
                new_classes: group,
                cumulative: cumulative.clone(),
            });
        }
        Ok(TaskSequence { steps })
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// All foreground classes in introduction order.
    pub fn class_order(&self) -> Vec<u8> {
        self.steps
            .iter()
            .flat_map(|s| s.new_classes.iter().copied())
            .collect()
    }
}
