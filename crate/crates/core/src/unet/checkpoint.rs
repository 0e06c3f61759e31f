//! Checkpoint container.
//!
//! ```text
//! magic     8 bytes   "SEGKDCK1"
//! version   u16       1
//! manifest  u64 len + UTF-8 key=value lines (plan, seed, frozen flag, lineage)
//! blocks    u32 count, then per layer: u64 byte len + little-endian f32 weight||bias
//! crc       u32       CRC-32 (IEEE) over every preceding byte
//! ```
//! All integers are little-endian.

use std::collections::BTreeMap;

use thiserror::Error;

use super::network::Network;
use super::plan::NetworkPlan;
use crate::manifest::{sha256_hex, Manifest};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SEGKDCK1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("layer data does not match plan: {0}")]
    LayerMismatch(String),
}

impl CheckpointError {
    /// Stable numeric code per failure kind.
    pub fn code(&self) -> i32 {
        match self {
            CheckpointError::BadMagic => 1,
            CheckpointError::UnsupportedVersion(_) => 2,
            CheckpointError::Truncated { .. } => 3,
            CheckpointError::TrailingBytes(_) => 4,
            CheckpointError::ChecksumMismatch { .. } => 5,
            CheckpointError::Manifest(_) => 6,
            CheckpointError::LayerMismatch(_) => 7,
        }
    }
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

fn header_manifest(net: &Network) -> Manifest {
    let mut m = Manifest::from_map(net.plan().to_manifest());
    m.set("seed", net.seed());
    m.set("frozen", net.is_frozen());
    for (k, v) in net.lineage() {
        m.set(format!("lineage.{k}"), v);
    }
    m
}

pub fn save_checkpoint(net: &Network) -> Vec<u8> {
    let manifest = header_manifest(net).render();
    let mut out =
        Vec::with_capacity(64 + manifest.len() + 4 * net.param_count() + 12 * net.layers().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        let bytes = 4 * (layer.weight.len() + layer.bias.len());
        out.extend_from_slice(&(bytes as u64).to_le_bytes());
        for v in layer.weight.data().iter().chain(layer.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// SHA-256 of the serialized checkpoint.
pub fn checkpoint_hash(net: &Network) -> String {
    sha256_hex(&save_checkpoint(net))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Bytes reserved at the end for the CRC.
    limit: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> CkResult<&'a [u8]> {
        let available = self.limit.saturating_sub(self.pos);
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> CkResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> CkResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CkResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_prefixed(&mut self) -> CkResult<&'a [u8]> {
        let offset = self.pos;
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| CheckpointError::Truncated {
            offset,
            needed: usize::MAX,
            available: self.limit.saturating_sub(self.pos),
        })?;
        self.take(n)
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> std::result::Result<Network, CheckpointError> {
    if bytes.len() < MAGIC.len() {
        if MAGIC.starts_with(bytes) {
            return Err(CheckpointError::Truncated {
                offset: 0,
                needed: MAGIC.len(),
                available: bytes.len(),
            });
        }
        return Err(CheckpointError::BadMagic);
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 8 + 2 + 4 {
        return Err(CheckpointError::Truncated {
            offset: 8,
            needed: 6,
            available: bytes.len() - 8,
        });
    }
    let limit = bytes.len() - 4;
    let mut cur = Cursor {
        buf: bytes,
        pos: 8,
        limit,
    };
    let version = cur.u16()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let manifest_bytes = cur.len_prefixed()?;
    let count = cur.u32()? as usize;
    let mut blocks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        blocks.push(cur.len_prefixed()?);
    }
    if cur.pos != limit {
        return Err(CheckpointError::TrailingBytes(limit - cur.pos));
    }
    let stored = u32::from_le_bytes(bytes[limit..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..limit]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }

    let text = std::str::from_utf8(manifest_bytes)
        .map_err(|_| CheckpointError::Manifest("not UTF-8".into()))?;
    let manifest = Manifest::parse(text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let plan = NetworkPlan::from_manifest(manifest.entries())
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let seed: u64 = manifest
        .parse_value("seed")
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let frozen: bool = manifest
        .parse_value("frozen")
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let lineage: BTreeMap<String, String> = manifest
        .entries()
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix("lineage.")
                .map(|k| (k.to_string(), v.clone()))
        })
        .collect();

    let topology = plan.topology();
    if blocks.len() != topology.layers.len() {
        return Err(CheckpointError::LayerMismatch(format!(
            "plan has {} layers, checkpoint stores {}",
            topology.layers.len(),
            blocks.len()
        )));
    }
    let mut params = Vec::with_capacity(blocks.len());
    for (desc, block) in topology.layers.iter().zip(blocks) {
        let (ws, bs) = desc.param_shapes();
        let wn: usize = ws.iter().product();
        let bn: usize = bs.iter().product();
        if block.len() != 4 * (wn + bn) {
            return Err(CheckpointError::LayerMismatch(format!(
                "layer {} needs {} bytes, block holds {}",
                desc.name,
                4 * (wn + bn),
                block.len()
            )));
        }
        let values: Vec<f32> = block
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (w, b) = values.split_at(wn);
        let mismatch = |e: crate::error::Error| CheckpointError::LayerMismatch(e.to_string());
        params.push((
            Tensor::new(ws, w.to_vec()).map_err(mismatch)?,
            Tensor::new(bs, b.to_vec()).map_err(mismatch)?,
        ));
    }
    Network::from_parts(plan, seed, frozen, lineage, params)
        .map_err(|e| CheckpointError::LayerMismatch(e.to_string()))
}
