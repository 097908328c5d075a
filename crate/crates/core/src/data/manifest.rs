//! JSON manifest binding dataset structure to feature files. Loading is
//! eager and fully validated: file checksums, feature dimensions, id
//! resolution. No partial dataset is ever returned.

use super::features::{read_feature_file, write_feature_file};
use crate::dataset::{
    GroundedDataset, ImageEntry, PhraseEntry, Proposal, SentenceEntry, TaskKind,
};
use crate::error::DataError;
use crate::geometry::BBox;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFileRef {
    pub path: String,
    pub rows: usize,
    pub dim: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestProposal {
    pub bbox: [f64; 4],
    pub feature_row: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub id: u32,
    pub feature_row: usize,
    #[serde(default)]
    pub sentences: Vec<u32>,
    #[serde(default)]
    pub proposals: Vec<ManifestProposal>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPhrase {
    pub id: u32,
    pub image_id: u32,
    pub feature_row: usize,
    pub gt_box: [f64; 4],
    pub chain_id: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSentence {
    pub id: u32,
    pub image_id: u32,
    pub feature_row: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub task_kind: TaskKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images_file: Option<FeatureFileRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposals_file: Option<FeatureFileRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phrases_file: Option<FeatureFileRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentences_file: Option<FeatureFileRef>,
    pub images: Vec<ManifestImage>,
    #[serde(default)]
    pub phrases: Vec<ManifestPhrase>,
    #[serde(default)]
    pub sentences: Vec<ManifestSentence>,
}

fn load_feature_table(
    manifest_dir: &Path,
    manifest_path: &str,
    what: &str,
    fref: &Option<FeatureFileRef>,
    required: bool,
) -> Result<Option<Tensor>, DataError> {
    let Some(fref) = fref else {
        if required {
            return Err(DataError::BadFormat {
                path: manifest_path.to_string(),
                reason: format!("missing {what} feature file reference"),
            });
        }
        return Ok(None);
    };
    let full = manifest_dir.join(&fref.path);
    let (tensor, digest) = read_feature_file(&full)?;
    if digest != fref.sha256 {
        return Err(DataError::ChecksumMismatch {
            path: full.display().to_string(),
            expected: fref.sha256.clone(),
            got: digest,
        });
    }
    if tensor.rows() != fref.rows || tensor.cols() != fref.dim {
        return Err(DataError::DimensionMismatch {
            path: full.display().to_string(),
            what: what.to_string(),
            expected: fref.rows * fref.dim,
            got: tensor.len(),
        });
    }
    Ok(Some(tensor))
}

fn fetch_row(
    table: &Option<Tensor>,
    row: usize,
    what: &str,
    id: u32,
    path: &str,
) -> Result<Vec<f64>, DataError> {
    let t = table.as_ref().ok_or_else(|| DataError::BadFormat {
        path: path.to_string(),
        reason: format!("{what} {id} references a feature table that is absent"),
    })?;
    if row >= t.rows() {
        return Err(DataError::BadFormat {
            path: path.to_string(),
            reason: format!("{what} {id}: feature row {row} out of range ({})", t.rows()),
        });
    }
    Ok(t.row(row).expect("checked range").to_vec())
}

fn to_bbox(c: [f64; 4], path: &str) -> Result<BBox, DataError> {
    BBox::from_corners(c).map_err(|e| DataError::BadFormat {
        path: path.to_string(),
        reason: e.to_string(),
    })
}

/// Load the manifest, verify every referenced file and id, and build a fully
/// validated in-memory dataset.
pub fn load_dataset(manifest_path: &Path) -> Result<(GroundedDataset, TaskKind), DataError> {
    let path_str = manifest_path.display().to_string();
    let text =
        std::fs::read_to_string(manifest_path).map_err(|source| DataError::MissingFile {
            path: path_str.clone(),
            source,
        })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DataError::ManifestParse {
            path: path_str.clone(),
            reason: e.to_string(),
        })?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(DataError::Version {
            what: "manifest",
            got: manifest.schema_version,
            path: path_str,
            supported: SCHEMA_VERSION,
        });
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let images_table = load_feature_table(dir, &path_str, "images", &manifest.images_file, true)?;
    let proposals_table = load_feature_table(
        dir,
        &path_str,
        "proposals",
        &manifest.proposals_file,
        manifest.images.iter().any(|i| !i.proposals.is_empty()),
    )?;
    let phrases_table = load_feature_table(
        dir,
        &path_str,
        "phrases",
        &manifest.phrases_file,
        !manifest.phrases.is_empty(),
    )?;
    let sentences_table = load_feature_table(
        dir,
        &path_str,
        "sentences",
        &manifest.sentences_file,
        !manifest.sentences.is_empty(),
    )?;

    let mut images = Vec::with_capacity(manifest.images.len());
    for mi in &manifest.images {
        let mut proposals = Vec::with_capacity(mi.proposals.len());
        for p in &mi.proposals {
            proposals.push(Proposal {
                bbox: to_bbox(p.bbox, &path_str)?,
                feature: fetch_row(&proposals_table, p.feature_row, "proposal", mi.id, &path_str)?,
            });
        }
        images.push(ImageEntry {
            id: mi.id,
            global_feature: fetch_row(&images_table, mi.feature_row, "image", mi.id, &path_str)?,
            proposals,
            sentences: mi.sentences.clone(),
        });
    }
    let mut phrases = Vec::with_capacity(manifest.phrases.len());
    for mp in &manifest.phrases {
        phrases.push(PhraseEntry {
            id: mp.id,
            image: mp.image_id,
            feature: fetch_row(&phrases_table, mp.feature_row, "phrase", mp.id, &path_str)?,
            gt_box: to_bbox(mp.gt_box, &path_str)?,
            chain: mp.chain_id,
        });
    }
    let mut sentences = Vec::with_capacity(manifest.sentences.len());
    for ms in &manifest.sentences {
        sentences.push(SentenceEntry {
            id: ms.id,
            image: ms.image_id,
            feature: fetch_row(&sentences_table, ms.feature_row, "sentence", ms.id, &path_str)?,
        });
    }

    let ds = GroundedDataset::build(images, phrases, sentences).map_err(|e| match e {
        crate::error::SamplingError::DanglingId { kind, id } => DataError::DanglingId {
            kind,
            id,
            path: path_str.clone(),
        },
        other => DataError::Sampling(other),
    })?;
    Ok((ds, manifest.task_kind))
}

/// Write a dataset as manifest plus feature files under `dir`. The manifest
/// lands last so a readable manifest always references complete files.
pub fn write_dataset(
    ds: &GroundedDataset,
    task: TaskKind,
    dir: &Path,
) -> Result<std::path::PathBuf, DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;

    let image_rows: Vec<Vec<f64>> = ds.images().iter().map(|i| i.global_feature.clone()).collect();
    let mut proposal_rows: Vec<Vec<f64>> = Vec::new();
    let mut images = Vec::with_capacity(ds.images().len());
    for (row, img) in ds.images().iter().enumerate() {
        let mut proposals = Vec::with_capacity(img.proposals.len());
        for p in &img.proposals {
            proposals.push(ManifestProposal {
                bbox: p.bbox.corners(),
                feature_row: proposal_rows.len(),
            });
            proposal_rows.push(p.feature.clone());
        }
        images.push(ManifestImage {
            id: img.id,
            feature_row: row,
            sentences: img.sentences.clone(),
            proposals,
        });
    }
    let phrase_rows: Vec<Vec<f64>> = ds.phrases().iter().map(|p| p.feature.clone()).collect();
    let sentence_rows: Vec<Vec<f64>> = ds.sentences().iter().map(|s| s.feature.clone()).collect();

    let write_table = |name: &str, rows: &[Vec<f64>]| -> Result<Option<FeatureFileRef>, DataError> {
        if rows.is_empty() {
            return Ok(None);
        }
        let tensor = Tensor::from_rows(rows).map_err(|e| DataError::BadFormat {
            path: name.to_string(),
            reason: e.to_string(),
        })?;
        let file = format!("{name}.tbf");
        let digest = write_feature_file(&dir.join(&file), &tensor)?;
        Ok(Some(FeatureFileRef {
            path: file,
            rows: tensor.rows(),
            dim: tensor.cols(),
            sha256: digest,
        }))
    };
    let images_file = write_table("image_features", &image_rows)?;
    let proposals_file = write_table("proposal_features", &proposal_rows)?;
    let phrases_file = write_table("phrase_features", &phrase_rows)?;
    let sentences_file = write_table("sentence_features", &sentence_rows)?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        task_kind: task,
        images_file,
        proposals_file,
        phrases_file,
        sentences_file,
        images,
        phrases: ds
            .phrases()
            .iter()
            .enumerate()
            .map(|(row, p)| ManifestPhrase {
                id: p.id,
                image_id: p.image,
                feature_row: row,
                gt_box: p.gt_box.corners(),
                chain_id: p.chain,
            })
            .collect(),
        sentences: ds
            .sentences()
            .iter()
            .enumerate()
            .map(|(row, s)| ManifestSentence {
                id: s.id,
                image_id: s.image,
                feature_row: row,
            })
            .collect(),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    std::fs::write(&manifest_path, json).map_err(|source| DataError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    Ok(manifest_path)
}
