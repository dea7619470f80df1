//! Versioned binary tensor container.
//!
//! One on-disk format serves both the encoded image sets and the GAN /
//! classifier checkpoints:
//!
//! ```text
//! bytes 0..8    magic "FAULTGRM"
//! bytes 8..12   format version, u32 little-endian
//! bytes 12..16  metadata length in bytes, u32 little-endian
//! ...           metadata, UTF-8 JSON
//! next 8        payload element count, u64 little-endian
//! ...           payload, little-endian f32, row-major
//! ```
//!
//! The payload dtype is pinned to 32-bit floats; round-trips are bit-exact
//! at that width. Writers that hold `f64` values quantize on save (see
//! [`quantize`]) and readers widen back.

use serde_json::Value;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"FAULTGRM";
pub const FORMAT_VERSION: u32 = 1;

/// Metadata blocks larger than this are rejected as corrupt rather than
/// allocated blindly.
const MAX_META_BYTES: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("container i/o: {0}")]
    Io(#[from] std::io::Error),
    /// Wrong magic bytes or an unsupported format version.
    #[error("container format mismatch: {reason}")]
    FormatVersionMismatch { reason: String },
    #[error("corrupt container: {reason}")]
    Corrupt { reason: String },
    #[error("container metadata: {0}")]
    Json(#[from] serde_json::Error),
}

/// Parsed container: free-form JSON metadata plus the flat payload.
#[derive(Debug, Clone)]
pub struct Container {
    pub meta: Value,
    pub payload: Vec<f32>,
}

pub fn write_container(path: &Path, meta: &Value, payload: &[f32]) -> Result<(), ContainerError> {
    let meta_bytes = serde_json::to_vec(meta)?;
    assert!(
        meta_bytes.len() <= MAX_META_BYTES as usize,
        "container metadata too large"
    );
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    for v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container, ContainerError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(ContainerError::FormatVersionMismatch {
            reason: format!("bad magic {:?}, expected {:?}", magic, MAGIC),
        });
    }

    let mut buf4 = [0u8; 4];
    read_exact(&mut r, &mut buf4, "version")?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(ContainerError::FormatVersionMismatch {
            reason: format!("version {version}, this build reads {FORMAT_VERSION}"),
        });
    }

    read_exact(&mut r, &mut buf4, "metadata length")?;
    let meta_len = u32::from_le_bytes(buf4);
    if meta_len > MAX_META_BYTES {
        return Err(ContainerError::Corrupt {
            reason: format!("metadata length {meta_len} exceeds limit"),
        });
    }
    let mut meta_bytes = vec![0u8; meta_len as usize];
    read_exact(&mut r, &mut meta_bytes, "metadata")?;
    let meta: Value = serde_json::from_slice(&meta_bytes)?;

    let mut buf8 = [0u8; 8];
    read_exact(&mut r, &mut buf8, "payload length")?;
    let count = u64::from_le_bytes(buf8) as usize;
    let mut raw = vec![0u8; count * 4];
    read_exact(&mut r, &mut raw, "payload")?;
    let payload: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    // Trailing bytes mean the file was not written by this format.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(ContainerError::Corrupt {
            reason: "trailing bytes after payload".to_string(),
        });
    }

    Ok(Container { meta, payload })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), ContainerError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ContainerError::Corrupt {
                reason: format!("truncated while reading {what}"),
            }
        } else {
            ContainerError::Io(e)
        }
    })
}

// ---------------------------------------------------------------------------
// named-array packing (checkpoints store many parameter tensors in one file)
// ---------------------------------------------------------------------------

/// One named tensor inside a packed payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Concatenate named arrays into one payload and describe the layout as a
/// JSON fragment (to be embedded under an `"arrays"` key).
pub fn pack_arrays(arrays: &[NamedArray]) -> (Value, Vec<f32>) {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(arrays.len());
    for a in arrays {
        let expected: usize = a.shape.iter().product();
        assert_eq!(
            expected,
            a.values.len(),
            "array {} shape/len mismatch",
            a.name
        );
        entries.push(serde_json::json!({
            "name": a.name,
            "shape": a.shape,
            "offset": payload.len(),
            "len": a.values.len(),
        }));
        payload.extend_from_slice(&a.values);
    }
    (Value::Array(entries), payload)
}

/// Inverse of [`pack_arrays`].
pub fn unpack_arrays(layout: &Value, payload: &[f32]) -> Result<Vec<NamedArray>, ContainerError> {
    let entries = layout.as_array().ok_or_else(|| ContainerError::Corrupt {
        reason: "array layout is not a JSON list".to_string(),
    })?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let bad = |what: &str| ContainerError::Corrupt {
            reason: format!("array layout entry missing {what}"),
        };
        let name = e["name"].as_str().ok_or_else(|| bad("name"))?.to_string();
        let shape: Vec<usize> = e["shape"]
            .as_array()
            .ok_or_else(|| bad("shape"))?
            .iter()
            .map(|v| v.as_u64().map(|u| u as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("shape"))?;
        let offset = e["offset"].as_u64().ok_or_else(|| bad("offset"))? as usize;
        let len = e["len"].as_u64().ok_or_else(|| bad("len"))? as usize;
        if offset + len > payload.len() {
            return Err(ContainerError::Corrupt {
                reason: format!("array {name} extends past payload end"),
            });
        }
        if shape.iter().product::<usize>() != len {
            return Err(ContainerError::Corrupt {
                reason: format!("array {name} shape does not match len"),
            });
        }
        out.push(NamedArray {
            name,
            shape,
            values: payload[offset..offset + len].to_vec(),
        });
    }
    Ok(out)
}

/// Narrow `f64` values to the container dtype.
pub fn quantize(values: &[f64]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

/// Widen container values back to working precision.
pub fn dequantize(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}
