//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ICLSEGCK" | u32 format version | u64 meta length | meta JSON
//! | u64 tensor count
//! | per tensor: u64 name length, name (UTF-8), u32 ndim, u64 per dim, f32 data
//! | SHA-256 digest of every preceding byte
//! ```
//!
//! The digest makes truncation and bit corruption detectable before any
//! field is trusted.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{LabelSpace, BACKGROUND};
use crate::segnet::{SegNet, SegNetConfig};

pub const MAGIC: &[u8; 8] = b"ICLSEGCK";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to rebuild and interpret the model: the architecture,
/// the label space, and which global class each classifier channel holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: SegNetConfig,
    pub labels: LabelSpace,
    /// Global class id per classifier channel, in introduction order.
    /// Entry 0 is the background.
    pub channel_classes: Vec<u8>,
    /// Learning step this model completed.
    pub step: usize,
}

impl CheckpointMeta {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.channel_classes.len() != self.config.num_classes {
            return Err(Error::checkpoint(format!(
                "channel_classes lists {} entries for {} classifier channels",
                self.channel_classes.len(),
                self.config.num_classes
            )));
        }
        if self.channel_classes.first() != Some(&BACKGROUND) {
            return Err(Error::checkpoint("channel 0 must map to the background"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &c in &self.channel_classes {
            if self.labels.name_of(c).is_none() {
                return Err(Error::checkpoint(format!(
                    "channel class {c} is not in the label space"
                )));
            }
            if !seen.insert(c) {
                return Err(Error::checkpoint(format!(
                    "class {c} appears on more than one channel"
                )));
            }
        }
        Ok(())
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize the model and metadata to `path`.
pub fn save_checkpoint(path: &Path, net: &SegNet<f32>, meta: &CheckpointMeta) -> Result<()> {
    meta.validate()?;
    if meta.config != *net.config() {
        return Err(Error::checkpoint(
            "metadata config does not describe this network",
        ));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    let meta_json = serde_json::to_vec(meta)?;
    put_u64(&mut buf, meta_json.len() as u64);
    buf.extend_from_slice(&meta_json);
    let tensors = net.tensors();
    put_u64(&mut buf, tensors.len() as u64);
    for (name, view) in &tensors {
        put_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, view.ndim() as u32);
        for &d in view.shape() {
            put_u64(&mut buf, d as u64);
        }
        for v in view.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, &buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Read a checkpoint back into a freshly built network.
pub fn load_checkpoint(path: &Path) -> Result<(SegNet<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < Sha256::output_size() {
        return Err(Error::checkpoint("file too short to hold a digest"));
    }
    let (body, stored) = bytes.split_at(bytes.len() - Sha256::output_size());
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::checkpoint(
            "integrity check failed: stored digest does not match contents",
        ));
    }
    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::checkpoint("bad magic: not a checkpoint file"));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let meta_len = cur.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)?;
    meta.validate()?;
    let count = cur.u64()? as usize;
    let mut tensors: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u64()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::checkpoint("tensor name is not UTF-8"))?;
        let ndim = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        let mut len = 1usize;
        for _ in 0..ndim {
            let d = cur.u64()? as usize;
            dims.push(d);
            len = len.checked_mul(d).ok_or_else(|| {
                Error::checkpoint(format!("tensor {name} has an absurd shape"))
            })?;
        }
        let raw = cur.take(len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::checkpoint(format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), arr).is_some() {
            return Err(Error::checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if cur.pos != body.len() {
        return Err(Error::checkpoint(format!(
            "{} trailing bytes after the last tensor",
            body.len() - cur.pos
        )));
    }
    let mut net = SegNet::new(meta.config.clone())?;
    net.load_tensors(&tensors)?;
    Ok((net, meta))
}
