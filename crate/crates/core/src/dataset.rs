//! In-memory grounded dataset: images with proposal regions, phrases linked
//! to ground-truth boxes through coreference chains, and sentence groupings.
//! Features arrive precomputed; this crate never extracts them.

use crate::error::SamplingError;
use crate::geometry::BBox;
use std::collections::HashMap;

pub type ImageId = u32;
pub type PhraseId = u32;
pub type SentenceId = u32;
pub type ChainId = u32;

/// Dense real vector describing one image, region, phrase or sentence.
pub type FeatureVector = Vec<f64>;

/// Which protocol a dataset is meant to drive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Localization,
    Retrieval,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Localization => write!(f, "localization"),
            TaskKind::Retrieval => write!(f, "retrieval"),
        }
    }
}

/// A candidate region with its precomputed feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub feature: FeatureVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub id: ImageId,
    pub global_feature: FeatureVector,
    pub proposals: Vec<Proposal>,
    pub sentences: Vec<SentenceId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseEntry {
    pub id: PhraseId,
    pub image: ImageId,
    pub feature: FeatureVector,
    pub gt_box: BBox,
    /// Phrases attached to the same ground-truth region share a chain.
    pub chain: ChainId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEntry {
    pub id: SentenceId,
    pub image: ImageId,
    pub feature: FeatureVector,
}

/// Validated dataset with lookup indexes. Immutable once built.
#[derive(Clone, Debug)]
pub struct GroundedDataset {
    images: Vec<ImageEntry>,
    phrases: Vec<PhraseEntry>,
    sentences: Vec<SentenceEntry>,
    image_index: HashMap<ImageId, usize>,
    phrase_index: HashMap<PhraseId, usize>,
    sentence_index: HashMap<SentenceId, usize>,
    /// Phrase indices per chain, in id order.
    chains: HashMap<ChainId, Vec<usize>>,
    /// Phrase indices per image index.
    image_phrases: Vec<Vec<usize>>,
    /// Exact-match proposal index of each phrase's ground-truth box, if any.
    gt_proposals: Vec<Option<usize>>,
}

impl GroundedDataset {
    /// Validate entries eagerly and build the lookup indexes.
    pub fn build(
        images: Vec<ImageEntry>,
        phrases: Vec<PhraseEntry>,
        sentences: Vec<SentenceEntry>,
    ) -> Result<Self, SamplingError> {
        let mut image_index = HashMap::new();
        for (i, img) in images.iter().enumerate() {
            if image_index.insert(img.id, i).is_some() {
                return Err(SamplingError::DuplicateId {
                    kind: "image",
                    id: img.id,
                });
            }
        }
        let mut sentence_index = HashMap::new();
        for (i, s) in sentences.iter().enumerate() {
            if sentence_index.insert(s.id, i).is_some() {
                return Err(SamplingError::DuplicateId {
                    kind: "sentence",
                    id: s.id,
                });
            }
            if !image_index.contains_key(&s.image) {
                return Err(SamplingError::DanglingId {
                    kind: "image (from sentence)",
                    id: s.image,
                });
            }
        }
        let mut phrase_index = HashMap::new();
        for (i, p) in phrases.iter().enumerate() {
            if phrase_index.insert(p.id, i).is_some() {
                return Err(SamplingError::DuplicateId {
                    kind: "phrase",
                    id: p.id,
                });
            }
            if !image_index.contains_key(&p.image) {
                return Err(SamplingError::DanglingId {
                    kind: "image (from phrase)",
                    id: p.image,
                });
            }
        }
        for img in &images {
            for sid in &img.sentences {
                let idx = sentence_index.get(sid).ok_or(SamplingError::DanglingId {
                    kind: "sentence (from image)",
                    id: *sid,
                })?;
                if sentences[*idx].image != img.id {
                    return Err(SamplingError::DanglingId {
                        kind: "sentence (image back-reference)",
                        id: *sid,
                    });
                }
            }
        }

        check_dims(
            "image",
            images.iter().map(|i| (i.id, i.global_feature.len())),
        )?;
        check_dims(
            "proposal",
            images
                .iter()
                .flat_map(|i| i.proposals.iter().map(move |p| (i.id, p.feature.len()))),
        )?;
        check_dims("phrase", phrases.iter().map(|p| (p.id, p.feature.len())))?;
        check_dims(
            "sentence",
            sentences.iter().map(|s| (s.id, s.feature.len())),
        )?;
        // Image and proposal features share the image-side input space.
        if let (Some(img), Some(prop_dim)) = (
            images.first(),
            images
                .iter()
                .flat_map(|i| i.proposals.first())
                .map(|p| p.feature.len())
                .next(),
        ) {
            if img.global_feature.len() != prop_dim {
                return Err(SamplingError::FeatureDim {
                    kind: "proposal (vs image)",
                    id: img.id,
                    expected: img.global_feature.len(),
                    got: prop_dim,
                });
            }
        }

        // Chains group phrases of one image around one ground-truth region.
        let mut chains: HashMap<ChainId, Vec<usize>> = HashMap::new();
        for (i, p) in phrases.iter().enumerate() {
            chains.entry(p.chain).or_default().push(i);
        }
        for members in chains.values() {
            let first = &phrases[members[0]];
            for &m in &members[1..] {
                let p = &phrases[m];
                if p.image != first.image || p.gt_box != first.gt_box {
                    return Err(SamplingError::DanglingId {
                        kind: "chain (mixed image or ground-truth box)",
                        id: p.chain,
                    });
                }
            }
        }

        let mut image_phrases = vec![Vec::new(); images.len()];
        for (i, p) in phrases.iter().enumerate() {
            image_phrases[image_index[&p.image]].push(i);
        }

        let gt_proposals = phrases
            .iter()
            .map(|p| {
                let img = &images[image_index[&p.image]];
                img.proposals.iter().position(|prop| prop.bbox == p.gt_box)
            })
            .collect();

        Ok(GroundedDataset {
            images,
            phrases,
            sentences,
            image_index,
            phrase_index,
            sentence_index,
            chains,
            image_phrases,
            gt_proposals,
        })
    }

    /// Task-level requirements, checked before training or evaluation.
    pub fn validate_for(&self, task: TaskKind) -> Result<(), SamplingError> {
        match task {
            TaskKind::Localization => {
                if self.phrases.is_empty() {
                    return Err(SamplingError::EmptyDataset {
                        task: task.to_string(),
                    });
                }
            }
            TaskKind::Retrieval => {
                if self.sentences.is_empty() || self.images.is_empty() {
                    return Err(SamplingError::EmptyDataset {
                        task: task.to_string(),
                    });
                }
                for img in &self.images {
                    if img.sentences.is_empty() {
                        return Err(SamplingError::DanglingId {
                            kind: "image without sentences",
                            id: img.id,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn images(&self) -> &[ImageEntry] {
        &self.images
    }

    pub fn phrases(&self) -> &[PhraseEntry] {
        &self.phrases
    }

    pub fn sentences(&self) -> &[SentenceEntry] {
        &self.sentences
    }

    pub fn image_idx(&self, id: ImageId) -> Option<usize> {
        self.image_index.get(&id).copied()
    }

    pub fn phrase_idx(&self, id: PhraseId) -> Option<usize> {
        self.phrase_index.get(&id).copied()
    }

    pub fn sentence_idx(&self, id: SentenceId) -> Option<usize> {
        self.sentence_index.get(&id).copied()
    }

    /// Phrase indices sharing the chain, in dataset order.
    pub fn chain_members(&self, chain: ChainId) -> &[usize] {
        self.chains.get(&chain).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Phrase indices of one image, in dataset order.
    pub fn phrases_of_image(&self, image_idx: usize) -> &[usize] {
        &self.image_phrases[image_idx]
    }

    /// Index of the proposal exactly matching the phrase's ground-truth box.
    /// Training requires it; evaluation-only datasets may lack it.
    pub fn gt_proposal(&self, phrase_idx: usize) -> Option<usize> {
        self.gt_proposals[phrase_idx]
    }

    pub fn image_feature_dim(&self) -> Option<usize> {
        self.images.first().map(|i| i.global_feature.len())
    }

    pub fn phrase_feature_dim(&self) -> Option<usize> {
        self.phrases.first().map(|p| p.feature.len())
    }

    pub fn sentence_feature_dim(&self) -> Option<usize> {
        self.sentences.first().map(|s| s.feature.len())
    }
}

fn check_dims(
    kind: &'static str,
    dims: impl Iterator<Item = (u32, usize)>,
) -> Result<(), SamplingError> {
    let mut expected = None;
    for (id, got) in dims {
        match expected {
            None => expected = Some(got),
            Some(e) if e != got => {
                return Err(SamplingError::FeatureDim {
                    kind,
                    id,
                    expected: e,
                    got,
                })
            }
            _ => {}
        }
    }
    Ok(())
}
