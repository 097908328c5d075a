//! Versioned binary checkpoint container: a JSON header (network kind, layer
//! dims, mode flags, config hash) followed by named parameter blobs with
//! shape and row-major 64-bit data, closed by a SHA-256 digest of everything
//! before it. Byte layout is documented in docs/FORMATS.md. Writes go to a
//! temp file and are renamed into place, so no partial checkpoint is ever
//! visible.

use crate::branches::{
    BatchNorm, BranchDims, BranchParams, EmbeddingDims, EmbeddingModel, Linear, Model,
    NetworkKind, SimilarityDims, SimilarityModel,
};
use crate::error::DataError;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TBCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: NetworkKind,
    nonlinear: bool,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    embedding_dims: Option<EmbeddingDims>,
    #[serde(skip_serializing_if = "Option::is_none")]
    similarity_dims: Option<SimilarityDims>,
}

fn branch_blobs(prefix: &str, p: &BranchParams, out: &mut Vec<(String, Tensor)>) {
    out.push((format!("{prefix}.fc1_weight"), p.fc1.weight.clone()));
    out.push((format!("{prefix}.fc1_bias"), p.fc1.bias.clone()));
    out.push((format!("{prefix}.fc2_weight"), p.fc2.weight.clone()));
    out.push((format!("{prefix}.fc2_bias"), p.fc2.bias.clone()));
    out.push((format!("{prefix}.bn_gamma"), p.norm.gamma.clone()));
    out.push((format!("{prefix}.bn_beta"), p.norm.beta.clone()));
    out.push((format!("{prefix}.bn_running_mean"), p.norm.running_mean.clone()));
    out.push((format!("{prefix}.bn_running_var"), p.norm.running_var.clone()));
}

fn blobs(model: &Model) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    match model {
        Model::Embedding(m) => {
            branch_blobs("image", &m.image, &mut out);
            branch_blobs("text", &m.text, &mut out);
        }
        Model::Similarity(m) => {
            branch_blobs("image", &m.image, &mut out);
            branch_blobs("text", &m.text, &mut out);
            for (i, l) in m.head.iter().enumerate() {
                out.push((format!("head.{i}.weight"), l.weight.clone()));
                out.push((format!("head.{i}.bias"), l.bias.clone()));
            }
        }
    }
    out
}

/// Serialize a model checkpoint to bytes.
pub fn to_bytes(model: &Model, config_hash: &str) -> Vec<u8> {
    let header = match model {
        Model::Embedding(m) => Header {
            kind: NetworkKind::Embedding,
            nonlinear: m.nonlinear,
            config_hash: config_hash.to_string(),
            embedding_dims: Some(m.dims()),
            similarity_dims: None,
        },
        Model::Similarity(m) => Header {
            kind: NetworkKind::Similarity,
            nonlinear: m.nonlinear,
            config_hash: config_hash.to_string(),
            embedding_dims: None,
            similarity_dims: Some(m.dims()),
        },
    };
    let header_json = serde_json::to_vec(&header).expect("serializable header");
    let blob_list = blobs(model);

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&(blob_list.len() as u32).to_le_bytes());
    for (name, tensor) in &blob_list {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.rank() as u8);
        for d in tensor.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Write a checkpoint atomically (temp file plus rename).
pub fn save(model: &Model, path: &Path, config_hash: &str) -> Result<(), DataError> {
    let bytes = to_bytes(model, config_hash);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let tmp = path.with_extension("tbck.tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|source| DataError::Io {
        path: tmp.display().to_string(),
        source,
    })?;
    f.write_all(&bytes).map_err(|source| DataError::Io {
        path: tmp.display().to_string(),
        source,
    })?;
    f.sync_all().map_err(|source| DataError::Io {
        path: tmp.display().to_string(),
        source,
    })?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::BadFormat {
                path: self.path.to_string(),
                reason: "truncated checkpoint".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Load a checkpoint. Returns the model and the config hash recorded at save
/// time.
pub fn load(path: &Path) -> Result<(Model, String), DataError> {
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
    if bytes.len() < 32 {
        return Err(DataError::BadFormat {
            path: path_str,
            reason: "shorter than a digest".into(),
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expected = Sha256::digest(body);
    if digest != expected.as_slice() {
        return Err(DataError::ChecksumMismatch {
            path: path_str,
            expected: hex::encode(expected),
            got: hex::encode(digest),
        });
    }

    let mut r = Reader {
        buf: body,
        pos: 0,
        path: &path_str,
    };
    if r.take(4)? != MAGIC {
        return Err(DataError::BadFormat {
            path: path_str.clone(),
            reason: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DataError::Version {
            what: "checkpoint",
            got: version,
            path: path_str.clone(),
            supported: VERSION,
        });
    }
    let header_len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| DataError::BadFormat {
            path: path_str.clone(),
            reason: format!("header: {e}"),
        })?;
    let blob_count = r.u32()? as usize;
    let mut map: HashMap<String, Tensor> = HashMap::with_capacity(blob_count);
    for _ in 0..blob_count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| {
            DataError::BadFormat {
                path: path_str.clone(),
                reason: format!("blob name: {e}"),
            }
        })?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| DataError::BadFormat {
            path: path_str.clone(),
            reason: format!("blob {name}: {e}"),
        })?;
        map.insert(name, tensor);
    }

    let mut take = |name: String| -> Result<Tensor, DataError> {
        map.remove(&name).ok_or_else(|| DataError::BadFormat {
            path: path_str.clone(),
            reason: format!("missing blob {name}"),
        })
    };
    let mut branch = |prefix: &str| -> Result<BranchParams, DataError> {
        Ok(BranchParams {
            fc1: Linear {
                weight: take(format!("{prefix}.fc1_weight"))?,
                bias: take(format!("{prefix}.fc1_bias"))?,
            },
            fc2: Linear {
                weight: take(format!("{prefix}.fc2_weight"))?,
                bias: take(format!("{prefix}.fc2_bias"))?,
            },
            norm: BatchNorm {
                gamma: take(format!("{prefix}.bn_gamma"))?,
                beta: take(format!("{prefix}.bn_beta"))?,
                running_mean: take(format!("{prefix}.bn_running_mean"))?,
                running_var: take(format!("{prefix}.bn_running_var"))?,
            },
        })
    };

    let model = match header.kind {
        NetworkKind::Embedding => {
            let m = EmbeddingModel {
                image: branch("image")?,
                text: branch("text")?,
                nonlinear: header.nonlinear,
            };
            if let Some(dims) = header.embedding_dims {
                check_branch_dims(&path_str, "image", m.image.dims(), dims.image)?;
                check_branch_dims(&path_str, "text", m.text.dims(), dims.text)?;
            }
            Model::Embedding(m)
        }
        NetworkKind::Similarity => {
            let image = branch("image")?;
            let text = branch("text")?;
            let head_len = header
                .similarity_dims
                .as_ref()
                .map(|d| d.head_hidden.len() + 1)
                .unwrap_or(3);
            let mut head = Vec::with_capacity(head_len);
            for i in 0..head_len {
                head.push(Linear {
                    weight: take(format!("head.{i}.weight"))?,
                    bias: take(format!("head.{i}.bias"))?,
                });
            }
            Model::Similarity(SimilarityModel {
                image,
                text,
                head,
                nonlinear: header.nonlinear,
            })
        }
    };
    Ok((model, header.config_hash))
}

fn check_branch_dims(
    path: &str,
    side: &str,
    got: BranchDims,
    expected: BranchDims,
) -> Result<(), DataError> {
    if got != expected {
        return Err(DataError::DimensionMismatch {
            path: path.to_string(),
            what: format!("{side} branch"),
            expected: expected.input,
            got: got.input,
        });
    }
    Ok(())
}
