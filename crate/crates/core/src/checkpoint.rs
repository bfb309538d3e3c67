//! Binary checkpoint format.
//!
//! Layout: `b"MASA"`, a version byte, the header length as a little-endian
//! `u64`, a compact JSON header with sorted keys, then the payload of
//! little-endian row-major `f32` tensors. Tensors are listed by name with
//! ascending, non-overlapping byte offsets into the payload.
//!
//! Values are computed in `f64` and rounded to `f32` on save.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compress::GroupSpec;
use crate::error::{MasaError, Result};
use crate::linalg::Matrix;
use crate::masa::SharingMode;
use crate::model::config::{CoefficientPath, ToyConfig};
use crate::model::params::ModelParams;

pub const MAGIC: &[u8; 4] = b"MASA";
pub const VERSION: u8 = 1;
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 1 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupsMeta {
    /// Half-open `[start, end)` layer ranges.
    pub ranges: Vec<[usize; 2]>,
    pub basis: Vec<usize>,
}

impl GroupsMeta {
    pub fn from_spec(spec: &GroupSpec) -> Self {
        Self {
            ranges: spec.ranges.iter().map(|r| [r.start, r.end]).collect(),
            basis: spec.basis_counts.clone(),
        }
    }

    pub fn to_spec(&self, num_layers: usize) -> Result<GroupSpec> {
        GroupSpec::new(
            self.ranges.iter().map(|[s, e]| *s..*e).collect(),
            self.basis.clone(),
            num_layers,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    #[serde(rename = "L")]
    pub num_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub mode: SharingMode,
    #[serde(rename = "S")]
    pub num_atoms: usize,
    /// Present exactly when the checkpoint came out of compression.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<GroupsMeta>,
    pub format_version: u32,
    pub vocab: usize,
    pub ffn_mult: usize,
    pub context: usize,
    pub tie_embeddings: bool,
}

impl CheckpointMeta {
    pub fn from_config(config: &ToyConfig, layout: Option<&GroupSpec>) -> Self {
        Self {
            num_layers: config.num_layers,
            d: config.model_dim,
            heads: config.num_heads,
            mode: config.mode,
            num_atoms: if config.mode == SharingMode::Dense { 0 } else { config.num_atoms },
            groups: layout.map(GroupsMeta::from_spec),
            format_version: FORMAT_VERSION,
            vocab: config.vocab_size,
            ffn_mult: config.ffn_mult,
            context: config.context,
            tie_embeddings: config.tie_embeddings,
        }
    }

    pub fn to_config(&self) -> ToyConfig {
        let mut c = ToyConfig::new(self.num_layers, self.d, self.heads, self.mode, self.num_atoms);
        c.vocab_size = self.vocab;
        c.ffn_mult = self.ffn_mult;
        c.context = self.context;
        c.tie_embeddings = self.tie_embeddings;
        c.coefficient_path = CoefficientPath::Direct;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

/// Named tensors plus model metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    /// Bakes any MLP coefficients of a copy of `params` and collects tensors.
    pub fn from_params(params: &ModelParams) -> Result<Self> {
        let mut baked = params.clone();
        baked.bake()?;
        Ok(Self {
            meta: CheckpointMeta::from_config(&baked.config, baked.layout()),
            tensors: baked.tensors(),
        })
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        let config = self.meta.to_config();
        let layout = self
            .meta
            .groups
            .as_ref()
            .map(|g| g.to_spec(self.meta.num_layers))
            .transpose()?;
        ModelParams::from_tensors(&config, layout.as_ref(), self.tensors.clone())
    }

    /// Compact JSON header with sorted keys; offsets assume name order.
    pub fn header_json(&self) -> Result<String> {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let entry = TensorEntry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: vec![m.nrows(), m.ncols()],
                    offset,
                };
                offset += 4 * m.len() as u64;
                entry
            })
            .collect();
        let header = Header {
            tensors,
            meta: self.meta.clone(),
        };
        // going through Value sorts object keys
        let value = serde_json::to_value(&header).map_err(|e| MasaError::Header(e.to_string()))?;
        Ok(value.to_string())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.tensors.is_empty() {
            return Err(MasaError::invalid("refusing to save a checkpoint without tensors"));
        }
        for (name, m) in &self.tensors {
            if let Some(v) = m.iter().find(|v| !v.is_finite() || v.abs() > f32::MAX as f64) {
                return Err(MasaError::NonFinite(format!("tensor {name} (value {v})")));
            }
        }
        let header = self.header_json()?;
        let payload_len: usize = self.tensors.values().map(|m| 4 * m.len()).sum();
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for m in self.tensors.values() {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Parses and fully validates a checkpoint image.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(MasaError::BadMagic);
        }
        if bytes.len() < PREAMBLE {
            return Err(MasaError::PayloadShort {
                needed: PREAMBLE as u64,
                available: bytes.len() as u64,
            });
        }
        if bytes[4] != VERSION {
            return Err(MasaError::BadVersion(bytes[4]));
        }
        let header_len = u64::from_le_bytes(bytes[5..PREAMBLE].try_into().expect("8 bytes"));
        let available = (bytes.len() - PREAMBLE) as u64;
        if header_len > available {
            return Err(MasaError::PayloadShort {
                needed: header_len,
                available,
            });
        }
        let header_end = PREAMBLE + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| MasaError::Header(e.to_string()))?;
        if header.meta.format_version != FORMAT_VERSION {
            return Err(MasaError::Header(format!(
                "unsupported format_version {}",
                header.meta.format_version
            )));
        }
        if header.tensors.is_empty() {
            return Err(MasaError::Header("no tensors".into()));
        }
        let payload = &bytes[header_end..];
        let mut expected_offset = 0u64;
        let mut prev: Option<&str> = None;
        let mut tensors = BTreeMap::new();
        for entry in &header.tensors {
            if prev.is_some_and(|p| p >= entry.name.as_str()) {
                return Err(MasaError::Header(format!("tensor '{}' out of name order", entry.name)));
            }
            prev = Some(&entry.name);
            if entry.dtype != "f32" {
                return Err(MasaError::Header(format!("tensor '{}' has dtype {}", entry.name, entry.dtype)));
            }
            let [rows, cols] = entry.shape[..] else {
                return Err(MasaError::Header(format!("tensor '{}' is not two-dimensional", entry.name)));
            };
            if entry.offset != expected_offset {
                return Err(MasaError::Overlap(entry.name.clone()));
            }
            let size = 4 * (rows as u64) * (cols as u64);
            let end = entry.offset + size;
            if end > payload.len() as u64 {
                return Err(MasaError::PayloadShort {
                    needed: end,
                    available: payload.len() as u64,
                });
            }
            let raw = &payload[entry.offset as usize..end as usize];
            let mut values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
            let mut m = Matrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    m[(i, j)] = values.next().expect("sized above");
                }
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(MasaError::NonFinite(format!("tensor {}", entry.name)));
            }
            tensors.insert(entry.name.clone(), m);
            expected_offset = end;
        }
        if expected_offset != payload.len() as u64 {
            return Err(MasaError::Header(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected_offset
            )));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}

/// Writes atomically: a temporary file in the target directory is renamed
/// into place, so no partial file is left behind on error.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| MasaError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| MasaError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| MasaError::io(path, e))?;
    tmp.persist(path).map_err(|e| MasaError::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = Checkpoint::from_params(params)?.encode()?;
    write_atomic(path, &bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| MasaError::io(path, e))?;
    Checkpoint::decode(&bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(path)?.to_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelParams {
        let mut c = ToyConfig::new(1, 4, 2, SharingMode::Qkvo, 1);
        c.context = 4;
        c.vocab_size = 8;
        ModelParams::init(&c).unwrap()
    }

    #[test]
    fn encode_decode_round_trip() {
        let ck = Checkpoint::from_params(&tiny()).unwrap();
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode().unwrap(), bytes);
        for (name, m) in &ck.tensors {
            let rounded = m.map(|v| v as f32 as f64);
            assert_eq!(&rounded, &back.tensors[name]);
        }
    }

    #[test]
    fn distinct_failure_kinds() {
        let bytes = Checkpoint::from_params(&tiny()).unwrap().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let e = Checkpoint::decode(&bad).unwrap_err();
        assert!(matches!(e, MasaError::BadMagic));
        assert_eq!(e.to_string(), "not a MASA checkpoint");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::decode(&bad), Err(MasaError::BadVersion(9))));
        let e = Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(e, MasaError::PayloadShort { .. }));
        assert!(e.to_string().starts_with("payload short"));
    }

    #[test]
    fn overlapping_offsets_rejected() {
        let ck = Checkpoint::from_params(&tiny()).unwrap();
        let bytes = ck.encode().unwrap();
        let header_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[13..13 + header_len]).unwrap();
        // shift the second tensor's offset back onto the first
        let mut value: serde_json::Value = serde_json::from_str(header).unwrap();
        value["tensors"][1]["offset"] = serde_json::json!(0);
        let new_header = value.to_string();
        let mut out = bytes[..5].to_vec();
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(new_header.as_bytes());
        out.extend_from_slice(&bytes[13 + header_len..]);
        assert!(matches!(Checkpoint::decode(&out), Err(MasaError::Overlap(_))));
    }

    #[test]
    fn empty_checkpoint_rejected() {
        let ck = Checkpoint {
            meta: CheckpointMeta::from_config(&tiny().config, None),
            tensors: BTreeMap::new(),
        };
        assert!(ck.encode().is_err());
    }

    #[test]
    fn header_keys_sorted() {
        let ck = Checkpoint::from_params(&tiny()).unwrap();
        let h = ck.header_json().unwrap();
        assert!(h.starts_with("{\"meta\":{\"L\":1,\"S\":1,\"context\":4,\"d\":4,"));
        assert!(!h.contains("groups"));
    }
}
