//! Versioned on-disk format for trained DCLS layers.
//!
//! Layout: the 8-byte magic `DCLSMODL`, a little-endian `u64` header length,
//! a JSON header, then a blob of `f64` values. The header records the blob's
//! byte order, so files written on big-endian hosts load anywhere.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{DclsError, Result};
use crate::grid::{KernelSpec, PositionTensor, WeightTensor};
use crate::layer::DclsLayer;

pub const MAGIC: &[u8; 8] = b"DCLSMODL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
    Big,
}

impl Endianness {
    pub fn native() -> Self {
        if cfg!(target_endian = "big") {
            Self::Big
        } else {
            Self::Little
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredLayer {
    pub name: String,
    pub spec: KernelSpec,
    pub weights: WeightTensor,
    pub positions: PositionTensor,
}

impl StoredLayer {
    pub fn from_layer(name: impl Into<String>, layer: &DclsLayer) -> Self {
        Self {
            name: name.into(),
            spec: layer.spec.clone(),
            weights: layer.weights().clone(),
            positions: layer.positions().clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelFile {
    pub layers: Vec<StoredLayer>,
    /// Free-form run information (seed, config, ...).
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    spec: KernelSpec,
    /// Offsets and lengths in `f64` elements.
    weights_offset: usize,
    weights_len: usize,
    positions_offset: usize,
    positions_len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    endianness: Endianness,
    blob_len: usize,
    layers: Vec<LayerEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

fn format_err(msg: impl Into<String>) -> DclsError {
    DclsError::Format(msg.into())
}

impl ModelFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.encode(Endianness::Little)
    }

    fn encode(&self, endianness: Endianness) -> Result<Vec<u8>> {
        let mut blob: Vec<f64> = Vec::new();
        let mut entries = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layer.spec.validate()?;
            layer.weights.check_shape(&layer.spec)?;
            layer.positions.check_shape(&layer.spec)?;
            let weights_offset = blob.len();
            blob.extend(layer.weights.0.iter());
            let positions_offset = blob.len();
            blob.extend(layer.positions.0.iter());
            entries.push(LayerEntry {
                name: layer.name.clone(),
                spec: layer.spec.clone(),
                weights_offset,
                weights_len: layer.weights.0.len(),
                positions_offset,
                positions_len: layer.positions.0.len(),
            });
        }
        let header = serde_json::to_vec(&Header {
            format_version: FORMAT_VERSION,
            endianness,
            blob_len: blob.len(),
            layers: entries,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in blob {
            match endianness {
                Endianness::Little => out.extend_from_slice(&v.to_le_bytes()),
                Endianness::Big => out.extend_from_slice(&v.to_be_bytes()),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(format_err("missing DCLSMODL magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                format_err(format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| format_err(format!("unreadable header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(DclsError::VersionMismatch {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let raw = &bytes[header_end..];
        if raw.len() != header.blob_len.saturating_mul(8) {
            return Err(format_err(format!(
                "blob holds {} bytes, header declares {} values ({} bytes)",
                raw.len(),
                header.blob_len,
                header.blob_len.saturating_mul(8)
            )));
        }
        let blob: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| {
                let b: [u8; 8] = c.try_into().expect("8 bytes");
                match header.endianness {
                    Endianness::Little => f64::from_le_bytes(b),
                    Endianness::Big => f64::from_be_bytes(b),
                }
            })
            .collect();

        let slice = |offset: usize, len: usize, what: &str| -> Result<Vec<f64>> {
            offset
                .checked_add(len)
                .filter(|&end| end <= blob.len())
                .map(|end| blob[offset..end].to_vec())
                .ok_or_else(|| {
                    format_err(format!(
                        "{what} range {offset}+{len} outside blob of {}",
                        blob.len()
                    ))
                })
        };
        let mut layers = Vec::with_capacity(header.layers.len());
        for entry in header.layers {
            entry.spec.validate()?;
            let w = slice(entry.weights_offset, entry.weights_len, "weights")?;
            let p = slice(entry.positions_offset, entry.positions_len, "positions")?;
            let weights = Array3::from_shape_vec(entry.spec.weight_shape(), w)
                .map_err(|e| format_err(format!("layer {}: weights: {e}", entry.name)))?;
            let positions = Array4::from_shape_vec(entry.spec.position_shape(), p)
                .map_err(|e| format_err(format!("layer {}: positions: {e}", entry.name)))?;
            layers.push(StoredLayer {
                name: entry.name,
                spec: entry.spec,
                weights: WeightTensor(weights),
                positions: PositionTensor(positions),
            });
        }
        Ok(Self {
            layers,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
