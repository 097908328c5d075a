//! Mini-batch construction: shard the ground-truth pairs, augment positives,
//! mine hard negatives within each shard under the current model, and apply
//! neighborhood sampling so targets carry at least two distinct positives.
//!
//! Region-phrase batches enumerate phrase negatives outside the target's
//! coreference chain and region negatives from the same image below the
//! negative IoU threshold, keeping the top-K violating triplets per pair and
//! direction. Image-sentence batches are the simplified variant: negatives
//! are any in-shard item not associated with the target, with neighborhood
//! sampling on the sentence side only.

use crate::branches::{EmbeddingModel, NormHyper};
use crate::dataset::{FeatureVector, GroundedDataset, TaskKind};
use crate::error::SamplingError;
use crate::geometry::{iou, RegionLabeling};
use crate::losses::{hinge, Triplet, TripletSet};
use crate::tensor::{row_distance, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeSet, HashMap};

/// A region addressed by image and proposal index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RegionRef {
    pub image: usize,
    pub proposal: usize,
}

/// A ground-truth region-phrase pair; the region is the proposal exactly
/// matching the phrase's ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtPair {
    pub phrase: usize,
    pub region: RegionRef,
}

/// A positive image-sentence pair, by dataset indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub image: usize,
    pub sentence: usize,
}

/// Source row of a batch feature matrix, kept for audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ItemKey {
    Region { image: usize, proposal: usize },
    Image(usize),
    Phrase(usize),
    Sentence(usize),
}

/// Which construction step produced a triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletStep {
    /// Hard-negative enumeration with top-K retention.
    Mined,
    /// Added by neighborhood sampling or derived for neighborhood terms.
    Neighborhood,
}

/// Per-triplet provenance, aligned with the lists in [`TripletSet`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub x2y: Vec<TripletStep>,
    pub y2x: Vec<TripletStep>,
    pub xx: Vec<TripletStep>,
    pub yy: Vec<TripletStep>,
}

/// A mined triplet batch: deduplicated feature rows for both sides plus the
/// triplet index sets over them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletBatch {
    pub x_rows: Vec<FeatureVector>,
    pub y_rows: Vec<FeatureVector>,
    pub x_keys: Vec<ItemKey>,
    pub y_keys: Vec<ItemKey>,
    pub triplets: TripletSet,
    pub provenance: Provenance,
}

impl TripletBatch {
    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn x_tensor(&self) -> Result<Tensor, crate::error::TensorError> {
        Tensor::from_rows(&self.x_rows)
    }

    pub fn y_tensor(&self) -> Result<Tensor, crate::error::TensorError> {
        Tensor::from_rows(&self.y_rows)
    }
}

/// A balanced labeled pair batch for the similarity network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatch {
    pub x_rows: Vec<FeatureVector>,
    pub y_rows: Vec<FeatureVector>,
    pub labels: Vec<f64>,
    pub x_keys: Vec<ItemKey>,
    pub y_keys: Vec<ItemKey>,
    /// Positives dropped for lack of a qualifying negative.
    pub skipped_positives: usize,
}

impl PairBatch {
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x_tensor(&self) -> Result<Tensor, crate::error::TensorError> {
        Tensor::from_rows(&self.x_rows)
    }

    pub fn y_tensor(&self) -> Result<Tensor, crate::error::TensorError> {
        Tensor::from_rows(&self.y_rows)
    }
}

/// Knobs for batch construction.
#[derive(Clone, Copy, Debug)]
pub struct SamplerOptions {
    pub shard_size: usize,
    /// Retention cap per (pair, direction).
    pub k_cap: usize,
    pub margin: f64,
    pub augment: bool,
    pub neighborhood_sampling: bool,
    /// Emit within-modality triplets derived from co-target positives.
    pub emit_neighborhood_terms: bool,
    /// Mine image-to-text triplets; off when that loss weight is zero.
    pub mine_x2y: bool,
    /// Mine text-to-image triplets; off when that loss weight is zero.
    pub mine_y2x: bool,
    pub labeling: RegionLabeling,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            shard_size: 100,
            k_cap: 30,
            margin: 0.05,
            augment: true,
            neighborhood_sampling: true,
            emit_neighborhood_terms: false,
            mine_x2y: true,
            mine_y2x: true,
            labeling: RegionLabeling::default(),
        }
    }
}

/// Shuffle all ground-truth region-phrase pairs into shards. Every pair
/// appears in exactly one shard; the last shard may be short.
pub fn shard_localization_pairs(
    ds: &GroundedDataset,
    shard_size: usize,
    seed: u64,
) -> Result<Vec<Vec<GtPair>>, SamplingError> {
    if shard_size == 0 {
        return Err(SamplingError::BadShardSize);
    }
    if ds.phrases().is_empty() {
        return Err(SamplingError::EmptyDataset {
            task: TaskKind::Localization.to_string(),
        });
    }
    let mut pairs = Vec::with_capacity(ds.phrases().len());
    for (pi, phrase) in ds.phrases().iter().enumerate() {
        let image = ds.image_idx(phrase.image).expect("validated image id");
        let proposal = ds
            .gt_proposal(pi)
            .ok_or(SamplingError::MissingGtProposal {
                phrase_id: phrase.id,
            })?;
        pairs.push(GtPair {
            phrase: pi,
            region: RegionRef { image, proposal },
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    Ok(pairs.chunks(shard_size).map(|c| c.to_vec()).collect())
}

/// Shuffle all positive image-sentence pairs into shards.
pub fn shard_sentence_pairs(
    ds: &GroundedDataset,
    shard_size: usize,
    seed: u64,
) -> Result<Vec<Vec<SentencePair>>, SamplingError> {
    if shard_size == 0 {
        return Err(SamplingError::BadShardSize);
    }
    if ds.sentences().is_empty() {
        return Err(SamplingError::EmptyDataset {
            task: TaskKind::Retrieval.to_string(),
        });
    }
    let mut pairs = Vec::with_capacity(ds.sentences().len());
    for (si, sentence) in ds.sentences().iter().enumerate() {
        let image = ds.image_idx(sentence.image).expect("validated image id");
        pairs.push(SentencePair {
            image,
            sentence: si,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    Ok(pairs.chunks(shard_size).map(|c| c.to_vec()).collect())
}

/// Proposals of the phrase's image qualifying as positives: IoU at or above
/// the positive threshold with the ground-truth box (the ground-truth
/// proposal always qualifies).
fn qualifying_positives(
    ds: &GroundedDataset,
    pair: &GtPair,
    labeling: &RegionLabeling,
) -> Vec<RegionRef> {
    let phrase = &ds.phrases()[pair.phrase];
    let image = &ds.images()[pair.region.image];
    image
        .proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| iou(&p.bbox, &phrase.gt_box) >= labeling.positive_threshold)
        .map(|(i, _)| RegionRef {
            image: pair.region.image,
            proposal: i,
        })
        .collect()
}

/// Proposals of the phrase's image strictly below the negative threshold.
fn qualifying_negatives(
    ds: &GroundedDataset,
    pair: &GtPair,
    labeling: &RegionLabeling,
) -> Vec<RegionRef> {
    let phrase = &ds.phrases()[pair.phrase];
    let image = &ds.images()[pair.region.image];
    image
        .proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| iou(&p.bbox, &phrase.gt_box) < labeling.negative_threshold)
        .map(|(i, _)| RegionRef {
            image: pair.region.image,
            proposal: i,
        })
        .collect()
}

/// Replace the pair's region with one drawn uniformly from the qualifying
/// positives. Falls back to the ground-truth region when nothing qualifies.
pub fn augment_positive_single(
    pair: &GtPair,
    ds: &GroundedDataset,
    labeling: &RegionLabeling,
    rng: &mut ChaCha8Rng,
) -> GtPair {
    let qualifying = qualifying_positives(ds, pair, labeling);
    if qualifying.is_empty() {
        return *pair;
    }
    let region = qualifying[rng.gen_range(0..qualifying.len())];
    GtPair {
        phrase: pair.phrase,
        region,
    }
}

/// One pair per qualifying region, ground truth included. Deterministic.
pub fn augment_positive_all(
    pair: &GtPair,
    ds: &GroundedDataset,
    labeling: &RegionLabeling,
) -> Vec<GtPair> {
    let qualifying = qualifying_positives(ds, pair, labeling);
    if qualifying.is_empty() {
        return vec![*pair];
    }
    qualifying
        .into_iter()
        .map(|region| GtPair {
            phrase: pair.phrase,
            region,
        })
        .collect()
}

/// Deduplicated feature rows with insertion-ordered keys.
struct RowSet {
    keys: Vec<ItemKey>,
    rows: Vec<FeatureVector>,
    index: HashMap<ItemKey, usize>,
}

impl RowSet {
    fn new() -> Self {
        RowSet {
            keys: Vec::new(),
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn intern(&mut self, key: ItemKey, feature: &[f64]) -> usize {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.rows.len();
        self.keys.push(key);
        self.rows.push(feature.to_vec());
        self.index.insert(key, i);
        i
    }

    fn get(&self, key: ItemKey) -> Option<usize> {
        self.index.get(&key).copied()
    }
}

fn region_feature<'a>(ds: &'a GroundedDataset, r: &RegionRef) -> &'a [f64] {
    &ds.images()[r.image].proposals[r.proposal].feature
}

/// Candidate ranked by hinge value, ties broken by stable item id.
fn top_k_by_hinge<I: Ord + Copy>(mut candidates: Vec<(f64, I)>, k: usize) -> Vec<(f64, I)> {
    candidates.retain(|(h, _)| *h > 0.0);
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    candidates.truncate(k);
    candidates
}

/// Highest-hinge candidate regardless of sign, ties by stable item id. Used
/// for the negatives of neighborhood-added triplets.
fn best_by_hinge<I: Ord + Copy>(candidates: &[(f64, I)]) -> Option<(f64, I)> {
    candidates
        .iter()
        .copied()
        .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
}

/// Distinct positives per target, in first-appearance order.
fn positives_by_target(list: &[Triplet]) -> Vec<(usize, Vec<usize>)> {
    let mut order: Vec<usize> = Vec::new();
    let mut map: HashMap<usize, Vec<usize>> = HashMap::new();
    for t in list {
        let entry = map.entry(t.target).or_insert_with(|| {
            order.push(t.target);
            Vec::new()
        });
        if !entry.contains(&t.positive) {
            entry.push(t.positive);
        }
    }
    order
        .into_iter()
        .map(|t| {
            let v = map.remove(&t).expect("inserted above");
            (t, v)
        })
        .collect()
}

/// Derive within-modality triplets from co-target positives: for each ordered
/// pair of distinct positives (a, b) of one target, pair a with b and with the
/// hard negative already mined for b.
fn derive_neighborhood_triplets(list: &[Triplet]) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (target, positives) in positives_by_target(list) {
        if positives.len() < 2 {
            continue;
        }
        for &a in &positives {
            for &b in &positives {
                if a == b {
                    continue;
                }
                let neg = list
                    .iter()
                    .find(|t| t.target == target && t.positive == b)
                    .map(|t| t.negative)
                    .expect("positive came from this target's triplets");
                if neg != a && neg != b {
                    out.push(Triplet {
                        target: a,
                        positive: b,
                        negative: neg,
                    });
                }
            }
        }
    }
    out
}

/// Drop feature rows no triplet references and remap indices.
fn prune_rows(batch: &mut TripletBatch) {
    let mut used_x = BTreeSet::new();
    let mut used_y = BTreeSet::new();
    let t = &batch.triplets;
    for tr in &t.x2y {
        used_x.insert(tr.target);
        used_y.insert(tr.positive);
        used_y.insert(tr.negative);
    }
    for tr in &t.y2x {
        used_y.insert(tr.target);
        used_x.insert(tr.positive);
        used_x.insert(tr.negative);
    }
    for tr in &t.xx {
        used_x.insert(tr.target);
        used_x.insert(tr.positive);
        used_x.insert(tr.negative);
    }
    for tr in &t.yy {
        used_y.insert(tr.target);
        used_y.insert(tr.positive);
        used_y.insert(tr.negative);
    }
    let remap = |used: &BTreeSet<usize>, keys: &mut Vec<ItemKey>, rows: &mut Vec<FeatureVector>| {
        let map: HashMap<usize, usize> = used.iter().enumerate().map(|(n, &o)| (o, n)).collect();
        let mut new_keys = Vec::with_capacity(used.len());
        let mut new_rows = Vec::with_capacity(used.len());
        for &o in used {
            new_keys.push(keys[o]);
            new_rows.push(std::mem::take(&mut rows[o]));
        }
        *keys = new_keys;
        *rows = new_rows;
        map
    };
    let x_map = remap(&used_x, &mut batch.x_keys, &mut batch.x_rows);
    let y_map = remap(&used_y, &mut batch.y_keys, &mut batch.y_rows);
    let fix = |list: &mut Vec<Triplet>, tm: &HashMap<usize, usize>, pm: &HashMap<usize, usize>| {
        for tr in list {
            tr.target = tm[&tr.target];
            tr.positive = pm[&tr.positive];
            tr.negative = pm[&tr.negative];
        }
    };
    fix(&mut batch.triplets.x2y, &x_map, &y_map);
    fix(&mut batch.triplets.y2x, &y_map, &x_map);
    fix(&mut batch.triplets.xx, &x_map, &x_map);
    fix(&mut batch.triplets.yy, &y_map, &y_map);
}

/// Build a region-phrase triplet batch for one shard: positive augmentation,
/// hard-negative enumeration with top-K retention in both directions, then
/// optional neighborhood sampling and neighborhood-term derivation. Distances
/// come from the current model in inference mode.
pub fn build_triplet_batch(
    shard: &[GtPair],
    ds: &GroundedDataset,
    model: &EmbeddingModel,
    opts: &SamplerOptions,
    hyper: &NormHyper,
    rng: &mut ChaCha8Rng,
) -> Result<TripletBatch, SamplingError> {
    let mut batch = TripletBatch::default();
    if shard.is_empty() {
        return Ok(batch);
    }
    let mut xrows = RowSet::new();
    let mut yrows = RowSet::new();

    // Positive pairs, augmented when requested. One rng draw per pair keeps
    // the stream aligned regardless of qualifying-set sizes.
    let mut positives = Vec::with_capacity(shard.len());
    for pair in shard {
        let chosen = if opts.augment {
            augment_positive_single(pair, ds, &opts.labeling, rng)
        } else {
            *pair
        };
        let x_row = xrows.intern(
            ItemKey::Region {
                image: chosen.region.image,
                proposal: chosen.region.proposal,
            },
            region_feature(ds, &chosen.region),
        );
        let phrase = &ds.phrases()[pair.phrase];
        let y_row = yrows.intern(ItemKey::Phrase(pair.phrase), &phrase.feature);
        positives.push((pair.phrase, chosen.region, x_row, y_row));
    }

    // Candidate rows: same-image negatives for every pair, qualifying
    // positives and chain mates when neighborhood sampling may need them.
    let mut neg_regions: HashMap<usize, Vec<(RegionRef, usize)>> = HashMap::new();
    let mut pos_regions: HashMap<usize, Vec<(RegionRef, usize)>> = HashMap::new();
    for pair in shard {
        let negs = qualifying_negatives(ds, pair, &opts.labeling)
            .into_iter()
            .map(|r| {
                let row = xrows.intern(
                    ItemKey::Region {
                        image: r.image,
                        proposal: r.proposal,
                    },
                    region_feature(ds, &r),
                );
                (r, row)
            })
            .collect();
        neg_regions.insert(pair.phrase, negs);
        if opts.neighborhood_sampling {
            let pos = qualifying_positives(ds, pair, &opts.labeling)
                .into_iter()
                .map(|r| {
                    let row = xrows.intern(
                        ItemKey::Region {
                            image: r.image,
                            proposal: r.proposal,
                        },
                        region_feature(ds, &r),
                    );
                    (r, row)
                })
                .collect();
            pos_regions.insert(pair.phrase, pos);
            let chain = ds.phrases()[pair.phrase].chain;
            for &member in ds.chain_members(chain) {
                yrows.intern(ItemKey::Phrase(member), &ds.phrases()[member].feature);
            }
        }
    }

    let x_emb = model.embed_images(&Tensor::from_rows(&xrows.rows)?, hyper)?;
    let y_emb = model.embed_texts(&Tensor::from_rows(&yrows.rows)?, hyper)?;
    let dist = |xr: usize, yr: usize| row_distance(&x_emb, xr, &y_emb, yr);

    // Hard-negative mining, both directions.
    for &(phrase_idx, _region, x_row, y_row) in &positives {
        let chain = ds.phrases()[phrase_idx].chain;
        let d_pos = dist(x_row, y_row);

        let phrase_cands: Vec<(f64, u32)> = if !opts.mine_x2y {
            Vec::new()
        } else {
            positives
            .iter()
            .filter(|(p, ..)| ds.phrases()[*p].chain != chain)
            .map(|&(p, _, _, yr)| {
                (
                    hinge(opts.margin, d_pos, dist(x_row, yr)),
                    ds.phrases()[p].id,
                )
            })
            .collect()
        };
        for (h, pid) in top_k_by_hinge(phrase_cands, opts.k_cap) {
            debug_assert!(h > 0.0);
            let neg_idx = ds.phrase_idx(pid).expect("id from dataset");
            let neg_row = yrows.get(ItemKey::Phrase(neg_idx)).expect("interned");
            batch.triplets.x2y.push(Triplet {
                target: x_row,
                positive: y_row,
                negative: neg_row,
            });
            batch.provenance.x2y.push(TripletStep::Mined);
        }

        let region_cands: Vec<(f64, (usize, usize))> = if !opts.mine_y2x {
            Vec::new()
        } else {
            neg_regions[&phrase_idx]
                .iter()
                .map(|(r, row)| {
                    (
                        hinge(opts.margin, d_pos, dist(*row, y_row)),
                        (r.image, r.proposal),
                    )
                })
                .collect()
        };
        for (h, (image, proposal)) in top_k_by_hinge(region_cands, opts.k_cap) {
            debug_assert!(h > 0.0);
            let neg_row = xrows
                .get(ItemKey::Region { image, proposal })
                .expect("interned");
            batch.triplets.y2x.push(Triplet {
                target: y_row,
                positive: x_row,
                negative: neg_row,
            });
            batch.provenance.y2x.push(TripletStep::Mined);
        }
    }

    if opts.neighborhood_sampling {
        // Region targets: guarantee a second distinct positive phrase, drawn
        // from the coreference chain of the existing one.
        for (target, pos_list) in positives_by_target(&batch.triplets.x2y) {
            if pos_list.len() >= 2 {
                continue;
            }
            let y1_row = pos_list[0];
            let y1_phrase = match yrows.keys[y1_row] {
                ItemKey::Phrase(p) => p,
                _ => unreachable!("x2y positives are phrases"),
            };
            let chain = ds.phrases()[y1_phrase].chain;
            let candidates: Vec<usize> = ds
                .chain_members(chain)
                .iter()
                .copied()
                .filter(|&m| {
                    let row = yrows.get(ItemKey::Phrase(m)).expect("chain interned");
                    !pos_list.contains(&row)
                })
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let y2_phrase = candidates[rng.gen_range(0..candidates.len())];
            let y2_row = yrows.get(ItemKey::Phrase(y2_phrase)).expect("interned");
            let d_pos2 = dist(target, y2_row);
            let neg_cands: Vec<(f64, u32)> = positives
                .iter()
                .filter(|(p, ..)| ds.phrases()[*p].chain != chain)
                .map(|&(p, _, _, yr)| {
                    (
                        hinge(opts.margin, d_pos2, dist(target, yr)),
                        ds.phrases()[p].id,
                    )
                })
                .collect();
            let Some((_, neg_id)) = best_by_hinge(&neg_cands) else {
                continue;
            };
            let neg_idx = ds.phrase_idx(neg_id).expect("id from dataset");
            let neg_row = yrows.get(ItemKey::Phrase(neg_idx)).expect("interned");
            batch.triplets.x2y.push(Triplet {
                target,
                positive: y2_row,
                negative: neg_row,
            });
            batch.provenance.x2y.push(TripletStep::Neighborhood);
        }

        // Phrase targets: guarantee a second distinct positive region, drawn
        // from the qualifying regions of the same picture.
        for (target, pos_list) in positives_by_target(&batch.triplets.y2x) {
            if pos_list.len() >= 2 {
                continue;
            }
            let phrase_idx = match yrows.keys[target] {
                ItemKey::Phrase(p) => p,
                _ => unreachable!("y2x targets are phrases"),
            };
            let candidates: Vec<usize> = pos_regions[&phrase_idx]
                .iter()
                .filter(|(_, row)| !pos_list.contains(row))
                .map(|(_, row)| *row)
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let x2_row = candidates[rng.gen_range(0..candidates.len())];
            let d_pos2 = dist(x2_row, target);
            let neg_cands: Vec<(f64, (usize, usize))> = neg_regions[&phrase_idx]
                .iter()
                .map(|(r, row)| {
                    (
                        hinge(opts.margin, d_pos2, dist(*row, target)),
                        (r.image, r.proposal),
                    )
                })
                .collect();
            let Some((_, (image, proposal))) = best_by_hinge(&neg_cands) else {
                continue;
            };
            let neg_row = xrows
                .get(ItemKey::Region { image, proposal })
                .expect("interned");
            batch.triplets.y2x.push(Triplet {
                target,
                positive: x2_row,
                negative: neg_row,
            });
            batch.provenance.y2x.push(TripletStep::Neighborhood);
        }
    }

    if opts.emit_neighborhood_terms {
        let xx = derive_neighborhood_triplets(&batch.triplets.y2x);
        let yy = derive_neighborhood_triplets(&batch.triplets.x2y);
        batch.provenance.xx = vec![TripletStep::Neighborhood; xx.len()];
        batch.provenance.yy = vec![TripletStep::Neighborhood; yy.len()];
        batch.triplets.xx = xx;
        batch.triplets.yy = yy;
    }

    batch.x_keys = xrows.keys;
    batch.x_rows = xrows.rows;
    batch.y_keys = yrows.keys;
    batch.y_rows = yrows.rows;
    prune_rows(&mut batch);
    Ok(batch)
}

/// Build an image-sentence triplet batch for one shard: the simplified
/// variant with in-shard negatives, top-K retention, and neighborhood
/// sampling on the sentence side only. Image-side neighborhood triplets are
/// never emitted.
pub fn build_sentence_batch(
    shard: &[SentencePair],
    ds: &GroundedDataset,
    model: &EmbeddingModel,
    opts: &SamplerOptions,
    hyper: &NormHyper,
    rng: &mut ChaCha8Rng,
) -> Result<TripletBatch, SamplingError> {
    let mut batch = TripletBatch::default();
    if shard.is_empty() {
        return Ok(batch);
    }
    let mut xrows = RowSet::new();
    let mut yrows = RowSet::new();

    let mut positives = Vec::with_capacity(shard.len());
    for pair in shard {
        let image = &ds.images()[pair.image];
        let x_row = xrows.intern(ItemKey::Image(pair.image), &image.global_feature);
        let y_row = yrows.intern(
            ItemKey::Sentence(pair.sentence),
            &ds.sentences()[pair.sentence].feature,
        );
        positives.push((pair.image, pair.sentence, x_row, y_row));
    }
    if opts.neighborhood_sampling {
        for pair in shard {
            for sid in &ds.images()[pair.image].sentences {
                let si = ds.sentence_idx(*sid).expect("validated");
                yrows.intern(ItemKey::Sentence(si), &ds.sentences()[si].feature);
            }
        }
    }

    let x_emb = model.embed_images(&Tensor::from_rows(&xrows.rows)?, hyper)?;
    let y_emb = model.embed_texts(&Tensor::from_rows(&yrows.rows)?, hyper)?;
    let dist = |xr: usize, yr: usize| row_distance(&x_emb, xr, &y_emb, yr);

    for &(image_idx, _sentence_idx, x_row, y_row) in &positives {
        let image_id = ds.images()[image_idx].id;
        let d_pos = dist(x_row, y_row);

        // Sentences in the shard not associated with the target image.
        let sent_cands: Vec<(f64, u32)> = if !opts.mine_x2y {
            Vec::new()
        } else {
            positives
                .iter()
                .filter(|(_, s, ..)| ds.sentences()[*s].image != image_id)
                .map(|&(_, s, _, yr)| {
                    (
                        hinge(opts.margin, d_pos, dist(x_row, yr)),
                        ds.sentences()[s].id,
                    )
                })
                .collect()
        };
        for (_, sid) in top_k_by_hinge(sent_cands, opts.k_cap) {
            let neg_idx = ds.sentence_idx(sid).expect("id from dataset");
            let neg_row = yrows.get(ItemKey::Sentence(neg_idx)).expect("interned");
            batch.triplets.x2y.push(Triplet {
                target: x_row,
                positive: y_row,
                negative: neg_row,
            });
            batch.provenance.x2y.push(TripletStep::Mined);
        }

        // Images in the shard not associated with the target sentence.
        let img_cands: Vec<(f64, u32)> = if !opts.mine_y2x {
            Vec::new()
        } else {
            positives
                .iter()
                .filter(|(i, ..)| ds.images()[*i].id != image_id)
                .map(|&(i, _, xr, _)| {
                    (
                        hinge(opts.margin, d_pos, dist(xr, y_row)),
                        ds.images()[i].id,
                    )
                })
                .collect()
        };
        for (_, iid) in top_k_by_hinge(img_cands, opts.k_cap) {
            let neg_idx = ds.image_idx(iid).expect("id from dataset");
            let neg_row = xrows.get(ItemKey::Image(neg_idx)).expect("interned");
            batch.triplets.y2x.push(Triplet {
                target: y_row,
                positive: x_row,
                negative: neg_row,
            });
            batch.provenance.y2x.push(TripletStep::Mined);
        }
    }

    if opts.neighborhood_sampling {
        for (target, pos_list) in positives_by_target(&batch.triplets.x2y) {
            if pos_list.len() >= 2 {
                continue;
            }
            let image_idx = match xrows.keys[target] {
                ItemKey::Image(i) => i,
                _ => unreachable!("x2y targets are images"),
            };
            let image = &ds.images()[image_idx];
            let candidates: Vec<usize> = image
                .sentences
                .iter()
                .map(|sid| ds.sentence_idx(*sid).expect("validated"))
                .filter(|si| {
                    let row = yrows.get(ItemKey::Sentence(*si)).expect("interned");
                    !pos_list.contains(&row)
                })
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let y2 = candidates[rng.gen_range(0..candidates.len())];
            let y2_row = yrows.get(ItemKey::Sentence(y2)).expect("interned");
            let d_pos2 = dist(target, y2_row);
            let neg_cands: Vec<(f64, u32)> = positives
                .iter()
                .filter(|(_, s, ..)| ds.sentences()[*s].image != image.id)
                .map(|&(_, s, _, yr)| {
                    (
                        hinge(opts.margin, d_pos2, dist(target, yr)),
                        ds.sentences()[s].id,
                    )
                })
                .collect();
            let Some((_, neg_id)) = best_by_hinge(&neg_cands) else {
                continue;
            };
            let neg_idx = ds.sentence_idx(neg_id).expect("id from dataset");
            let neg_row = yrows.get(ItemKey::Sentence(neg_idx)).expect("interned");
            batch.triplets.x2y.push(Triplet {
                target,
                positive: y2_row,
                negative: neg_row,
            });
            batch.provenance.x2y.push(TripletStep::Neighborhood);
        }
    }

    if opts.emit_neighborhood_terms {
        // Image-side constraints cannot be applied for image-sentence data,
        // so only the sentence side is derived.
        let yy = derive_neighborhood_triplets(&batch.triplets.x2y);
        batch.provenance.yy = vec![TripletStep::Neighborhood; yy.len()];
        batch.triplets.yy = yy;
    }

    batch.x_keys = xrows.keys;
    batch.x_rows = xrows.rows;
    batch.y_keys = yrows.keys;
    batch.y_rows = yrows.rows;
    prune_rows(&mut batch);
    Ok(batch)
}

/// Build a balanced region-phrase pair batch: one negative per positive,
/// drawn uniformly from the same image's sub-threshold proposals. Positives
/// without any qualifying negative are dropped and counted.
pub fn build_pair_batch(
    shard: &[GtPair],
    ds: &GroundedDataset,
    opts: &SamplerOptions,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch, SamplingError> {
    let mut batch = PairBatch::default();
    for pair in shard {
        let expanded = if opts.augment {
            augment_positive_all(pair, ds, &opts.labeling)
        } else {
            vec![*pair]
        };
        let negatives = qualifying_negatives(ds, pair, &opts.labeling);
        for positive in expanded {
            if negatives.is_empty() {
                batch.skipped_positives += 1;
                continue;
            }
            let neg = negatives[rng.gen_range(0..negatives.len())];
            let phrase = &ds.phrases()[positive.phrase];
            batch.x_rows.push(region_feature(ds, &positive.region).to_vec());
            batch.y_rows.push(phrase.feature.clone());
            batch.labels.push(1.0);
            batch.x_keys.push(ItemKey::Region {
                image: positive.region.image,
                proposal: positive.region.proposal,
            });
            batch.y_keys.push(ItemKey::Phrase(positive.phrase));

            batch.x_rows.push(region_feature(ds, &neg).to_vec());
            batch.y_rows.push(phrase.feature.clone());
            batch.labels.push(-1.0);
            batch.x_keys.push(ItemKey::Region {
                image: neg.image,
                proposal: neg.proposal,
            });
            batch.y_keys.push(ItemKey::Phrase(positive.phrase));
        }
    }
    Ok(batch)
}

/// Build a balanced image-sentence pair batch: for each positive, one
/// negative sentence drawn uniformly from sentences of other images.
pub fn build_pair_batch_sentences(
    shard: &[SentencePair],
    ds: &GroundedDataset,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch, SamplingError> {
    if ds.images().len() < 2 {
        return Err(SamplingError::TooFewImages {
            images: ds.images().len(),
        });
    }
    let total = ds.sentences().len();
    let mut batch = PairBatch::default();
    for pair in shard {
        let image = &ds.images()[pair.image];
        // Rejection sampling stays uniform over the complement set; the
        // complement is nonempty whenever another image has a sentence.
        if total == image.sentences.len() {
            batch.skipped_positives += 1;
            continue;
        }
        let neg = loop {
            let j = rng.gen_range(0..total);
            if ds.sentences()[j].image != image.id {
                break j;
            }
        };
        batch.x_rows.push(image.global_feature.clone());
        batch.y_rows.push(ds.sentences()[pair.sentence].feature.clone());
        batch.labels.push(1.0);
        batch.x_keys.push(ItemKey::Image(pair.image));
        batch.y_keys.push(ItemKey::Sentence(pair.sentence));

        batch.x_rows.push(image.global_feature.clone());
        batch.y_rows.push(ds.sentences()[neg].feature.clone());
        batch.labels.push(-1.0);
        batch.x_keys.push(ItemKey::Image(pair.image));
        batch.y_keys.push(ItemKey::Sentence(neg));
    }
    Ok(batch)
}
