//! Binary checkpoint container.
//!
//! Layout: `SEALCKPT` magic, `u32` LE version, `u64` LE manifest length,
//! JSON manifest, little-endian `f32` payload, then the 32-byte SHA-256 of
//! the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 8] = b"SEALCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Byte length in the payload.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value, named: Vec<(String, &Tensor)>) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            tensors: named.into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    fn payload(&self) -> (Vec<u8>, Vec<TensorEntry>) {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len();
            for &x in t.data() {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                length: payload.len() - offset,
            });
        }
        (payload, entries)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (payload, tensors) = self.payload();
        let manifest = Manifest {
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors,
        };
        let header = serde_json::to_vec_pretty(&manifest)?;
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + payload.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = parse(bytes)?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let raw = &payload[e.offset..e.offset + e.length];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized payload.
    pub fn payload_hash(&self) -> String {
        hex(&Sha256::digest(self.payload().0))
    }
}

/// Validates framing, offsets and the payload hash; returns the manifest and
/// the payload slice.
pub fn parse(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let head = 8 + 4 + 8;
    if bytes.len() < head + 32 {
        return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if mlen > bytes.len() - head - 32 {
        return Err(Error::Checkpoint(format!("manifest length {mlen} runs past end of file")));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[head..head + mlen])
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let payload = &bytes[head + mlen..bytes.len() - 32];
    let stored = &bytes[bytes.len() - 32..];
    let found = Sha256::digest(payload);
    if stored != found.as_slice() {
        return Err(Error::HashMismatch {
            expected: hex(stored),
            found: hex(&found),
        });
    }
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.length != 4 * n {
            return Err(Error::Checkpoint(format!(
                "tensor {}: length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        if e.offset.checked_add(e.length).is_none_or(|end| end > payload.len()) {
            return Err(Error::Checkpoint(format!("tensor {} out of payload bounds", e.name)));
        }
        spans.push((e.offset, e.offset + e.length));
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::Checkpoint("overlapping tensor entries".into()));
    }
    Ok((manifest, payload))
}

/// Freeze witness: SHA-256 over names, shapes and exact `f64` bytes.
pub fn weights_hash(named: &[(String, &Tensor)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
