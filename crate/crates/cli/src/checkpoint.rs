//! Binary model checkpoints.
//!
//! Layout: `IBTL`, format version (u32 LE), header length (u32 LE), a JSON
//! header, then the parameters as little-endian f64.

use std::collections::BTreeMap;
use std::path::Path;

use ibtl_core::model::{ArchitectureSpec, ParameterVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{io_err, CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"IBTL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: ArchitectureSpec,
    layer_offsets: Vec<(usize, usize)>,
    metadata: BTreeMap<String, String>,
    digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchitectureSpec,
    pub params: ParameterVector,
    /// Free-form provenance (stage, seed, ...). Never holds timestamps so that
    /// reruns stay byte-identical.
    pub metadata: BTreeMap<String, String>,
}

pub fn payload_digest(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn new(spec: ArchitectureSpec, params: ParameterVector) -> Self {
        Checkpoint {
            spec,
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn digest(&self) -> String {
        payload_digest(self.params.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            spec: self.spec.clone(),
            layer_offsets: self.spec.layer_offsets(),
            metadata: self.metadata.clone(),
            digest: self.digest(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// `origin` only labels error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> CliResult<Self> {
        let bad = |m: String| CliError::config(origin, format!("bad checkpoint: {m}"));
        if bytes.len() < 12 {
            return Err(bad(format!(
                "file is {} bytes, shorter than the 12-byte preamble",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(bad(format!("magic {:?} is not \"IBTL\"", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(bad(format!("header length {hlen} runs past end of file")));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        header.spec.validate().map_err(|e| bad(e.to_string()))?;
        if header.layer_offsets != header.spec.layer_offsets() {
            return Err(bad("layer offsets disagree with the architecture".into()));
        }
        let payload = &body[hlen..];
        let p = header.spec.num_params();
        if payload.len() != 8 * p {
            return Err(bad(format!(
                "payload is {} bytes, expected {} for {p} parameters",
                payload.len(),
                8 * p
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let digest = payload_digest(&values);
        if digest != header.digest {
            return Err(bad(format!(
                "payload digest {digest} does not match header {}",
                header.digest
            )));
        }
        let params = ParameterVector::new(&header.spec, values).map_err(|e| bad(e.to_string()))?;
        Ok(Checkpoint {
            spec: header.spec,
            params,
            metadata: header.metadata,
        })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
