//! On-disk dataset layout, all little-endian and line-delimited JSON:
//!
//! ```text
//! <root>/meta.json            dataset metadata (label space, channels, patch, seed)
//! <root>/manifest.jsonl       one training TileRecord per line
//! <root>/test_manifest.jsonl  one held-out TileRecord per line
//! <root>/tiles/<id>.bin       pixel and label blob for one tile
//! ```
//!
//! Blob layout for a tile with C channels and patch P:
//! C*P*P f32 pixels, channel-planar (channel 0 row-major, then channel 1,
//! ...), followed by P*P u8 labels, row-major. No header; shapes come from
//! the manifest and metadata.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{LabelSpace, Tile, TileRecord};

const META_FILE: &str = "meta.json";
const TRAIN_MANIFEST: &str = "manifest.jsonl";
const TEST_MANIFEST: &str = "test_manifest.jsonl";
const TILES_DIR: &str = "tiles";

fn default_version() -> u32 {
    1
}

/// Dataset-level metadata stored as `meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default = "default_version")]
    pub version: u32,
    pub labels: LabelSpace,
    pub channels: usize,
    pub patch: usize,
    pub seed: u64,
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct StoredDataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub train: Vec<TileRecord>,
    pub test: Vec<TileRecord>,
}

impl StoredDataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let meta = read_meta(&root)?;
        let train = read_manifest(root.join(TRAIN_MANIFEST))?;
        let test_path = root.join(TEST_MANIFEST);
        let test = if test_path.exists() {
            read_manifest(test_path)?
        } else {
            Vec::new()
        };
        Ok(StoredDataset {
            root,
            meta,
            train,
            test,
        })
    }

    pub fn load(&self, records: &[TileRecord]) -> Result<Vec<Tile>> {
        load_tiles(&self.root, &self.meta, records)
    }
}

/// Write a complete dataset directory. Manifests are sorted by
/// `(raster_id, row, col)` so outputs are byte-stable no matter how tiles
/// were produced. Existing files are overwritten; callers gate on `--force`.
pub fn write_dataset(
    root: impl AsRef<Path>,
    meta: &DatasetMeta,
    train: &[Tile],
    test: &[Tile],
) -> Result<()> {
    let root = root.as_ref();
    for tile in train.iter().chain(test) {
        let (c, h, w) = tile.pixels.dim();
        if c != meta.channels || h != meta.patch || w != meta.patch {
            return Err(Error::shape(format!(
                "tile {} has shape [{c}, {h}, {w}], metadata says [{}, {}, {}]",
                tile.record.id, meta.channels, meta.patch, meta.patch
            )));
        }
    }
    fs::create_dir_all(root.join(TILES_DIR))?;
    let mut meta_json = serde_json::to_string_pretty(meta)?;
    meta_json.push('\n');
    fs::write(root.join(META_FILE), meta_json)?;
    write_manifest(root.join(TRAIN_MANIFEST), train.iter().map(|t| &t.record))?;
    write_manifest(root.join(TEST_MANIFEST), test.iter().map(|t| &t.record))?;
    for tile in train.iter().chain(test) {
        write_blob(root, tile)?;
    }
    Ok(())
}

fn write_manifest<'a>(
    path: PathBuf,
    records: impl Iterator<Item = &'a TileRecord>,
) -> Result<()> {
    let mut sorted: Vec<&TileRecord> = records.collect();
    sorted.sort_by(|a, b| {
        (&a.raster_id, a.row, a.col).cmp(&(&b.raster_id, b.row, b.col))
    });
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in sorted {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn write_blob(root: &Path, tile: &Tile) -> Result<()> {
    let (c, h, w) = tile.pixels.dim();
    let mut bytes = Vec::with_capacity(c * h * w * 4 + h * w);
    for &v in tile.pixels.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend(tile.labels.iter());
    fs::write(root.join(TILES_DIR).join(format!("{}.bin", tile.record.id)), bytes)?;
    Ok(())
}

pub fn read_meta(root: impl AsRef<Path>) -> Result<DatasetMeta> {
    let path = root.as_ref().join(META_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let meta: DatasetMeta = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("malformed {}: {e}", path.display())))?;
    meta.labels.validate()?;
    Ok(meta)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<TileRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TileRecord = serde_json::from_str(line).map_err(|e| {
            Error::data(format!(
                "malformed record at {}:{}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Load tile blobs for the given records, in the given order.
pub fn load_tiles(
    root: impl AsRef<Path>,
    meta: &DatasetMeta,
    records: &[TileRecord],
) -> Result<Vec<Tile>> {
    let root = root.as_ref();
    records
        .iter()
        .map(|record| {
            if record.patch != meta.patch {
                return Err(Error::data(format!(
                    "tile {} has patch {}, dataset metadata says {}",
                    record.id, record.patch, meta.patch
                )));
            }
            let path = root.join(TILES_DIR).join(format!("{}.bin", record.id));
            let bytes = fs::read(&path)
                .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
            decode_blob(record, meta, &bytes)
        })
        .collect()
}

fn decode_blob(record: &TileRecord, meta: &DatasetMeta, bytes: &[u8]) -> Result<Tile> {
    let p = meta.patch;
    let want = meta.channels * p * p * 4 + p * p;
    if bytes.len() != want {
        return Err(Error::data(format!(
            "tile {} blob is {} bytes, expected {want}",
            record.id,
            bytes.len()
        )));
    }
    let (pix, lab) = bytes.split_at(meta.channels * p * p * 4);
    let pixels = ndarray::Array3::from_shape_vec(
        (meta.channels, p, p),
        pix.chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
    )
    .map_err(|e| Error::shape(format!("tile {}: {e}", record.id)))?;
    let labels = ndarray::Array2::from_shape_vec((p, p), lab.to_vec())
        .map_err(|e| Error::shape(format!("tile {}: {e}", record.id)))?;
    Ok(Tile {
        record: record.clone(),
        pixels,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{generate_synthetic_dataset, SynthConfig};
    use tempfile::TempDir;

    fn sample() -> (DatasetMeta, Vec<Tile>) {
        let labels = LabelSpace::generic(3);
        let cfg = SynthConfig {
            num_tiles: 8,
            size: 16,
            ..SynthConfig::default()
        };
        let tiles = generate_synthetic_dataset(42, &cfg, &labels).unwrap();
        let meta = DatasetMeta {
            version: 1,
            labels,
            channels: 3,
            patch: 16,
            seed: 42,
        };
        (meta, tiles)
    }

    #[test]
    fn round_trip_exact() {
        let (meta, tiles) = sample();
        let dir = TempDir::new().unwrap();
        let (train, test) = tiles.split_at(6);
        write_dataset(dir.path(), &meta, train, test).unwrap();

        let ds = StoredDataset::open(dir.path()).unwrap();
        assert_eq!(ds.meta, meta);
        assert_eq!(ds.train.len(), 6);
        assert_eq!(ds.test.len(), 2);
        let loaded = ds.load(&ds.train).unwrap();
        for got in &loaded {
            let orig = train.iter().find(|t| t.record.id == got.record.id).unwrap();
            assert_eq!(got.pixels, orig.pixels, "f32 round trip must be bit-exact");
            assert_eq!(got.labels, orig.labels);
            assert_eq!(&got.record, &orig.record);
        }
    }

    #[test]
    fn rewrites_are_byte_identical() {
        let (meta, tiles) = sample();
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        write_dataset(a.path(), &meta, &tiles, &[]).unwrap();
        write_dataset(b.path(), &meta, &tiles, &[]).unwrap();
        for f in [META_FILE, TRAIN_MANIFEST, TEST_MANIFEST] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f} differs between identical writes"
            );
        }
        let id = &tiles[0].record.id;
        assert_eq!(
            fs::read(a.path().join(TILES_DIR).join(format!("{id}.bin"))).unwrap(),
            fs::read(b.path().join(TILES_DIR).join(format!("{id}.bin"))).unwrap()
        );
    }

    #[test]
    fn manifest_is_sorted() {
        let (meta, mut tiles) = sample();
        tiles.reverse();
        let dir = TempDir::new().unwrap();
        write_dataset(dir.path(), &meta, &tiles, &[]).unwrap();
        let records = read_manifest(dir.path().join(TRAIN_MANIFEST)).unwrap();
        let keys: Vec<_> = records
            .iter()
            .map(|r| (r.raster_id.clone(), r.row, r.col))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn truncated_blob_is_reported_with_id() {
        let (meta, tiles) = sample();
        let dir = TempDir::new().unwrap();
        write_dataset(dir.path(), &meta, &tiles, &[]).unwrap();
        let id = &tiles[0].record.id;
        let path = dir.path().join(TILES_DIR).join(format!("{id}.bin"));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        let ds = StoredDataset::open(dir.path()).unwrap();
        let err = ds.load(&ds.train[..1]).unwrap_err().to_string();
        assert!(err.contains(id.as_str()), "error should name the tile: {err}");
    }

    #[test]
    fn malformed_manifest_line_is_located() {
        let (meta, tiles) = sample();
        let dir = TempDir::new().unwrap();
        write_dataset(dir.path(), &meta, &tiles, &[]).unwrap();
        let path = dir.path().join(TRAIN_MANIFEST);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        fs::write(&path, text).unwrap();
        let err = read_manifest(&path).unwrap_err().to_string();
        assert!(err.contains(":9"), "expected line number 9 in: {err}");
    }

    #[test]
    fn shape_mismatch_rejected_on_write() {
        let (mut meta, tiles) = sample();
        meta.patch = 32;
        let dir = TempDir::new().unwrap();
        assert!(write_dataset(dir.path(), &meta, &tiles, &[]).is_err());
    }
}
