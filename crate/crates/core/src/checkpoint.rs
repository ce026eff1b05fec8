//! Binary checkpoint format.
//!
//! ```text
//! "GNET" | version u32 | manifest_len u32 | manifest_fnv1a u64 | manifest | payload
//! ```
//!
//! All integers are little-endian. The manifest is UTF-8 text, one record
//! per line:
//!
//! ```text
//! arch <json ArchSpec>
//! provenance <json Provenance>
//! tensor <param|buffer> <name> <d0,d1,..> <offset> <len>
//! payload <values> <fnv1a hex>
//! ```
//!
//! Offsets and lengths count 32-bit little-endian floats in the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{io_err, CheckpointError, Result};
use crate::models::{ArchSpec, ModelGraph};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GNET";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// How a checkpoint's weights were produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub epochs: usize,
    pub augment: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelGraph<f32>,
    pub provenance: Provenance,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Param,
    Buffer,
}

impl TensorRole {
    fn as_str(self) -> &'static str {
        match self {
            TensorRole::Param => "param",
            TensorRole::Buffer => "buffer",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub role: TensorRole,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Parsed manifest of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub arch: ArchSpec,
    pub provenance: Provenance,
    pub tensors: Vec<TensorEntry>,
    pub payload_values: usize,
    pub payload_checksum: u64,
}

/// Serializes a model into checkpoint bytes.
pub fn encode(model: &ModelGraph<f32>, provenance: &Provenance) -> Result<Vec<u8>> {
    let graph = model.graph();
    let mut manifest = String::new();
    manifest.push_str(&format!("arch {}\n", serde_json::to_string(model.spec())?));
    manifest.push_str(&format!("provenance {}\n", serde_json::to_string(provenance)?));
    let mut payload = Vec::new();
    let mut offset = 0;
    let tensors = graph
        .params()
        .into_iter()
        .map(|(n, t)| (TensorRole::Param, n, t))
        .chain(graph.buffers().into_iter().map(|(n, t)| (TensorRole::Buffer, n, t)));
    for (role, name, t) in tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "tensor {} {} {} {} {}\n",
            role.as_str(),
            name,
            dims.join(","),
            offset,
            t.len()
        ));
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    manifest.push_str(&format!("payload {} {:016x}\n", offset, fnv1a(&payload)));

    let manifest = manifest.into_bytes();
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&fnv1a(&manifest).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn truncated(needed: usize, available: usize) -> CheckpointError {
    CheckpointError::Truncated { needed, available }
}

/// Validates the header and manifest checksum and parses the manifest.
/// Returns the manifest and the payload bytes.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN, bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN, bytes.len()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let stored = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let end = HEADER_LEN + manifest_len;
    if bytes.len() < end {
        return Err(truncated(end, bytes.len()));
    }
    let manifest_bytes = &bytes[HEADER_LEN..end];
    let computed = fnv1a(manifest_bytes);
    if computed != stored {
        return Err(CheckpointError::Integrity {
            section: "manifest",
            stored,
            computed,
        });
    }
    let text = std::str::from_utf8(manifest_bytes).map_err(|e| CheckpointError::Manifest {
        line: 0,
        reason: format!("not UTF-8: {e}"),
    })?;
    let manifest = parse_manifest(text)?;
    Ok((manifest, &bytes[end..]))
}

fn parse_manifest(text: &str) -> Result<Manifest, CheckpointError> {
    let mut arch = None;
    let mut provenance = None;
    let mut tensors = Vec::new();
    let mut payload = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let bad = |reason: String| CheckpointError::Manifest { line: n, reason };
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad("missing value".into()))?;
        match key {
            "arch" => arch = Some(serde_json::from_str::<ArchSpec>(rest).map_err(|e| bad(e.to_string()))?),
            "provenance" => {
                provenance = Some(serde_json::from_str::<Provenance>(rest).map_err(|e| bad(e.to_string()))?)
            }
            "tensor" => {
                let f: Vec<&str> = rest.split(' ').collect();
                let [role, name, dims, offset, len] = f[..] else {
                    return Err(bad(format!("expected 5 tensor fields, got {}", f.len())));
                };
                let role = match role {
                    "param" => TensorRole::Param,
                    "buffer" => TensorRole::Buffer,
                    other => return Err(bad(format!("unknown tensor role {other:?}"))),
                };
                let shape = dims
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| bad(format!("bad dims {dims:?}: {e}")))?;
                let offset = offset.parse().map_err(|e| bad(format!("bad offset: {e}")))?;
                let len: usize = len.parse().map_err(|e| bad(format!("bad length: {e}")))?;
                if shape.iter().product::<usize>() != len {
                    return Err(bad(format!("dims {dims} disagree with length {len}")));
                }
                tensors.push(TensorEntry {
                    role,
                    name: name.to_string(),
                    shape,
                    offset,
                    len,
                });
            }
            "payload" => {
                let (count, sum) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad("expected count and checksum".into()))?;
                let count = count.parse().map_err(|e| bad(format!("bad payload size: {e}")))?;
                let sum = u64::from_str_radix(sum, 16).map_err(|e| bad(format!("bad checksum: {e}")))?;
                payload = Some((count, sum));
            }
            other => return Err(bad(format!("unknown record {other:?}"))),
        }
    }
    let missing = |what: &str| CheckpointError::Manifest {
        line: 0,
        reason: format!("no {what} record"),
    };
    let (payload_values, payload_checksum) = payload.ok_or_else(|| missing("payload"))?;
    Ok(Manifest {
        arch: arch.ok_or_else(|| missing("arch"))?,
        provenance: provenance.ok_or_else(|| missing("provenance"))?,
        tensors,
        payload_values,
        payload_checksum,
    })
}

/// Rebuilds a model from checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, payload) = decode_manifest(bytes)?;
    let needed = manifest.payload_values * 4;
    if payload.len() < needed {
        return Err(truncated(bytes.len() - payload.len() + needed, bytes.len()).into());
    }
    let payload = &payload[..needed];
    let computed = fnv1a(payload);
    if computed != manifest.payload_checksum {
        return Err(CheckpointError::Integrity {
            section: "payload",
            stored: manifest.payload_checksum,
            computed,
        }
        .into());
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();

    let mut model = ModelGraph::<f32>::build(manifest.arch.clone(), 0)
        .map_err(|e| CheckpointError::ShapeMismatch(format!("architecture does not build: {e}")))?;
    let mut pending: Vec<&TensorEntry> = manifest.tensors.iter().collect();
    let mut assign = |role: TensorRole, name: &str, t: &mut Tensor<f32>| -> Result<(), CheckpointError> {
        let pos = pending
            .iter()
            .position(|e| e.role == role && e.name == name)
            .ok_or_else(|| CheckpointError::ShapeMismatch(format!("{} {name} missing", role.as_str())))?;
        let e = pending.swap_remove(pos);
        if e.shape != t.shape() {
            return Err(CheckpointError::ShapeMismatch(format!(
                "{name} stored as {:?}, architecture needs {:?}",
                e.shape,
                t.shape()
            )));
        }
        let end = e
            .offset
            .checked_add(e.len)
            .filter(|&end| end <= values.len())
            .ok_or_else(|| CheckpointError::ShapeMismatch(format!("{name} lies outside the payload")))?;
        t.data_mut().copy_from_slice(&values[e.offset..end]);
        Ok(())
    };
    for (name, t) in model.graph_mut().params_mut() {
        assign(TensorRole::Param, &name, t)?;
    }
    for (name, t) in model.graph_mut().buffers_mut() {
        assign(TensorRole::Buffer, &name, t)?;
    }
    if let Some(extra) = pending.first() {
        return Err(CheckpointError::ShapeMismatch(format!(
            "{} {} has no place in the architecture",
            extra.role.as_str(),
            extra.name
        ))
        .into());
    }
    Ok(Checkpoint {
        model,
        provenance: manifest.provenance,
    })
}

pub fn save_checkpoint(model: &ModelGraph<f32>, provenance: &Provenance, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model, provenance)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

/// The manifest text of a checkpoint file, after header and checksum validation.
pub fn read_manifest_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_manifest(&bytes)?;
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    Ok(String::from_utf8_lossy(&bytes[HEADER_LEN..HEADER_LEN + len]).into_owned())
}
