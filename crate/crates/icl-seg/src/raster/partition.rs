//! Disjoint single-label partitions and the validation split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

use super::{LabelSpace, TileRecord};

/// Assign every tile with at least one foreground label to exactly one class
/// partition, greedily choosing the currently smallest partition among the
/// labels present in the tile. Ties go to the lowest class id. Tiles that
/// contain only background are discarded.
///
/// Tiles are visited in an order shuffled by `rng`, so the result is
/// deterministic given the seed and the input order.
pub fn partition_disjoint<R: Rng + ?Sized>(
    tiles: &[TileRecord],
    labels: &LabelSpace,
    rng: &mut R,
) -> Result<BTreeMap<u8, Vec<TileRecord>>> {
    if tiles.is_empty() {
        return Err(Error::invalid("no tiles to partition"));
    }
    let mut partitions: BTreeMap<u8, Vec<TileRecord>> = labels
        .foreground_ids()
        .into_iter()
        .map(|c| (c, Vec::new()))
        .collect();

    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.shuffle(rng);

    for idx in order {
        let tile = &tiles[idx];
        let present = tile.present_classes();
        for &c in &present {
            if !partitions.contains_key(&c) {
                return Err(Error::data(format!(
                    "tile {} contains class id {c} not in the label space",
                    tile.id
                )));
            }
        }
        let Some(&target) = present.iter().min_by_key(|&&c| (partitions[&c].len(), c)) else {
            continue; // background-only tile
        };
        let mut assigned = tile.clone();
        assigned.partition = Some(target);
        partitions.get_mut(&target).unwrap().push(assigned);
    }
    Ok(partitions)
}

/// Split each partition into train and validation tiles, holding out
/// `val_fraction` of the tiles (at least one when the partition has more
/// than one tile). The draw is deterministic under the seed.
pub fn split_validation<R: Rng + ?Sized>(
    partitions: &BTreeMap<u8, Vec<TileRecord>>,
    val_fraction: f64,
    rng: &mut R,
) -> (BTreeMap<u8, Vec<TileRecord>>, BTreeMap<u8, Vec<TileRecord>>) {
    let mut train = BTreeMap::new();
    let mut val = BTreeMap::new();
    for (&class, tiles) in partitions {
        let mut order: Vec<usize> = (0..tiles.len()).collect();
        order.shuffle(rng);
        let mut n_val = ((tiles.len() as f64) * val_fraction).round() as usize;
        if n_val == 0 && tiles.len() > 1 && val_fraction > 0.0 {
            n_val = 1;
        }
        let (val_idx, train_idx) = order.split_at(n_val.min(tiles.len().saturating_sub(1)));
        let mut val_idx = val_idx.to_vec();
        let mut train_idx = train_idx.to_vec();
        // Stable output order regardless of the shuffle.
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        val.insert(class, val_idx.iter().map(|&i| tiles[i].clone()).collect());
        train.insert(class, train_idx.iter().map(|&i| tiles[i].clone()).collect());
    }
    (train, val)
}
