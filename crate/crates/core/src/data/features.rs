//! Self-describing binary feature files: magic, version, dtype, shape,
//! row-major 64-bit payload, SHA-256 of the payload. Layout documented in
//! docs/FORMATS.md.

use crate::error::DataError;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TBFT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Write a feature matrix. Returns the hex payload digest for the manifest.
pub fn write_feature_file(path: &Path, tensor: &Tensor) -> Result<String, DataError> {
    let mut payload = Vec::with_capacity(tensor.len() * 8);
    for v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&payload);

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F64);
    buf.push(tensor.rank() as u8);
    for d in tensor.shape() {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&payload);
    buf.extend_from_slice(&digest);

    let mut f = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(&buf).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(hex::encode(digest))
}

/// Read a feature matrix, verifying the embedded checksum. Returns the
/// tensor and the hex payload digest.
pub fn read_feature_file(path: &Path) -> Result<(Tensor, String), DataError> {
    let path_str = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|source| DataError::MissingFile {
            path: path_str.clone(),
            source,
        })?
        .read_to_end(&mut bytes)
        .map_err(|source| DataError::Io {
            path: path_str.clone(),
            source,
        })?;

    let bad = |reason: &str| DataError::BadFormat {
        path: path_str.clone(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 + 4 + 1 + 1 + 32 {
        return Err(bad("file too short"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(DataError::Version {
            what: "feature file",
            got: version,
            path: path_str,
            supported: VERSION,
        });
    }
    if bytes[8] != DTYPE_F64 {
        return Err(bad("unsupported dtype"));
    }
    let rank = bytes[9] as usize;
    if rank == 0 || rank > 2 {
        return Err(bad("rank must be 1 or 2"));
    }
    let mut pos = 10;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if pos + 4 > bytes.len() {
            return Err(bad("truncated shape"));
        }
        shape.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
        pos += 4;
    }
    let numel: usize = shape.iter().product();
    let payload_len = numel * 8;
    if pos + payload_len + 32 != bytes.len() {
        return Err(bad("payload length disagrees with shape"));
    }
    let payload = &bytes[pos..pos + payload_len];
    let digest = Sha256::digest(payload);
    let stored = &bytes[pos + payload_len..];
    if stored != digest.as_slice() {
        return Err(DataError::ChecksumMismatch {
            path: path_str,
            expected: hex::encode(stored),
            got: hex::encode(digest),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let tensor = Tensor::new(shape, data).map_err(|e| DataError::BadFormat {
        path: path_str,
        reason: e.to_string(),
    })?;
    Ok((tensor, hex::encode(digest)))
}
