//! Binary tensor container.
//!
//! Layout: `b"MOLE"`, format version (`u32` LE), header length (`u64` LE),
//! UTF-8 JSON header, then a payload of little-endian `f32` values. The
//! header lists every tensor with its shape and byte range, carries free-form
//! metadata, and a SHA-256 checksum over the checksum-blanked header and the
//! payload. Headers are written in a canonical form and must be read back
//! in that form, so any single-byte change is detected.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MOLE";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    checksum: String,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory container contents; tensors keep insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub tensors: Vec<StoredTensor>,
}

impl Default for Container {
    fn default() -> Self {
        Self::new(Value::Object(Default::default()))
    }
}

impl Container {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor, rounding values to `f32`.
    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|s| s.name == name) {
            return Err(Error::format(&name, "duplicate tensor name"));
        }
        let data: Vec<f32> = t.data().iter().map(|&x| x as f32).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(&name, "value not representable as a finite f32"));
        }
        self.tensors.push(StoredTensor {
            name,
            shape: t.shape().to_vec(),
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.tensors.iter().find(|s| s.name == name).map(|s| {
            Tensor::new(s.shape.clone(), s.data.iter().map(|&x| f64::from(x)).collect()).expect("stored shape matches data")
        })
    }

    pub fn require(&self, name: &str) -> Result<Tensor> {
        self.get(name).ok_or_else(|| Error::format(name, "tensor missing from container"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|s| s.name.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for s in &self.tensors {
            let offset = payload.len() as u64;
            for x in &s.data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
                dtype: "f32".into(),
                offset,
                length: payload.len() as u64 - offset,
            });
        }
        let mut header = Header {
            checksum: String::new(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        header.checksum = checksum(&header, &payload)?;
        let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::format("header", e.to_string()))?;
        let mut out = Vec::with_capacity(PREAMBLE + header_bytes.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(Error::format("preamble", format!("file is {} bytes, too short", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format("preamble", "bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::format(
                "preamble",
                format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(PREAMBLE))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::format("header", format!("header length {header_len} exceeds file size")))?;
        let raw = &bytes[PREAMBLE..header_end];
        let header: Header = serde_json::from_slice(raw).map_err(|e| Error::format("header", e.to_string()))?;
        let canonical = serde_json::to_vec(&header).map_err(|e| Error::format("header", e.to_string()))?;
        if canonical != raw {
            return Err(Error::format("header", "header is not in canonical form"));
        }
        let payload = &bytes[header_end..];
        let expected = checksum(&Header { checksum: String::new(), ..header.clone() }, payload)?;
        if expected != header.checksum {
            return Err(Error::format("payload", "checksum mismatch"));
        }

        let mut ranges: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::format(&e.name, format!("unsupported dtype '{}'", e.dtype)));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::format(&e.name, "shape overflows"))?;
            if Some(e.length) != numel.checked_mul(4) {
                return Err(Error::format(
                    &e.name,
                    format!("byte length {} does not match shape {:?}", e.length, e.shape),
                ));
            }
            let end = e
                .offset
                .checked_add(e.length)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| Error::format(&e.name, "byte range runs past the payload"))?;
            ranges.push((e.offset, end, &e.name));
            let data: Vec<f32> = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::format(&e.name, "non-finite value"));
            }
            if tensors.iter().any(|s: &StoredTensor| s.name == e.name) {
                return Err(Error::format(&e.name, "duplicate tensor name"));
            }
            tensors.push(StoredTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        ranges.sort();
        let mut covered = 0u64;
        for (start, end, name) in &ranges {
            if *start < covered {
                return Err(Error::format(*name, "byte range overlaps another tensor"));
            }
            if *start > covered {
                return Err(Error::format(*name, "gap in payload before this tensor"));
            }
            covered = *end;
        }
        if covered != payload.len() as u64 {
            return Err(Error::format(
                "payload",
                format!("{} trailing bytes after the last tensor", payload.len() as u64 - covered),
            ));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn checksum(blank: &Header, payload: &[u8]) -> Result<String> {
    let header = serde_json::to_vec(blank).map_err(|e| Error::format("header", e.to_string()))?;
    let mut h = Sha256::new();
    h.update(&header);
    h.update(payload);
    Ok(hex::encode(h.finalize()))
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("'{}' is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
