//! Retrieval and localization metrics: phrase-localization recall@K,
//! bi-directional image-sentence recall@K, sentence-to-sentence recall@K,
//! and the weighted combination of global and region-phrase distances.
//!
//! Rankings sort by descending score with ties broken by ascending candidate
//! id, so every report is deterministic. Evaluation is read-only.

use crate::branches::{EmbeddingModel, Mode, NormHyper, SimilarityModel};
use crate::dataset::{GroundedDataset, Proposal};
use crate::error::EvalError;
use crate::geometry::{iou, BBox};
use crate::tensor::{row_distance, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Ranked candidates for one query, best first.
#[derive(Clone, Debug)]
pub struct RankedResult {
    pub query_id: u32,
    /// (candidate id, score), ordered by descending score then ascending id.
    pub ranking: Vec<(u32, f64)>,
}

/// Recall per cutoff plus the attainable upper bound.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: BTreeMap<usize, f64>,
    pub query_count: usize,
    /// Fraction of queries with any correct candidate at all.
    pub upper_bound: f64,
}

impl RecallReport {
    /// Machine-readable records, one per cutoff.
    pub fn records(&self, task: &str, direction: &str) -> Vec<MetricRecord> {
        self.recall
            .iter()
            .map(|(k, r)| MetricRecord {
                task: task.to_string(),
                direction: direction.to_string(),
                k: *k,
                recall: *r,
                query_count: self.query_count,
                upper_bound: self.upper_bound,
            })
            .collect()
    }

    /// Plain text table.
    pub fn table(&self, title: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{title}  (queries: {}, upper bound: {:.4})\n",
            self.query_count, self.upper_bound
        ));
        out.push_str("  K      R@K\n");
        for (k, r) in &self.recall {
            out.push_str(&format!("  {k:<6} {r:.4}\n"));
        }
        out
    }
}

/// One line of the machine-readable report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: String,
    pub direction: String,
    pub k: usize,
    pub recall: f64,
    pub query_count: usize,
    pub upper_bound: f64,
}

/// Per-query correctness, aligned with the requested cutoffs.
#[derive(Clone, Debug)]
pub struct QueryOutcome {
    pub correct_at: Vec<bool>,
    pub any_correct: bool,
}

/// Fraction of queries correct at each cutoff.
pub fn recall_at_k(outcomes: &[QueryOutcome], ks: &[usize]) -> Result<RecallReport, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let n = outcomes.len() as f64;
    let mut recall = BTreeMap::new();
    for (i, k) in ks.iter().enumerate() {
        let correct = outcomes.iter().filter(|o| o.correct_at[i]).count();
        recall.insert(*k, correct as f64 / n);
    }
    let upper = outcomes.iter().filter(|o| o.any_correct).count() as f64 / n;
    Ok(RecallReport {
        recall,
        query_count: outcomes.len(),
        upper_bound: upper,
    })
}

/// Indices sorted by descending score, ties by ascending candidate id.
pub fn rank_by_score(scores: &[f64], ids: &[u32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    order
}

/// A trained network viewed as a pair scorer: higher means better match.
pub enum Scorer<'a> {
    /// Negative Euclidean distance in the shared embedding space.
    Embedding(&'a EmbeddingModel),
    /// Raw regression score (sigmoid is monotone, so ranking is unchanged).
    Similarity(&'a SimilarityModel),
}

impl Scorer<'_> {
    /// Score every (x row, y row) combination.
    pub fn score_matrix(
        &self,
        x_feats: &Tensor,
        y_feats: &Tensor,
        hyper: &NormHyper,
    ) -> Result<Vec<Vec<f64>>, EvalError> {
        match self {
            Scorer::Embedding(m) => {
                let ex = m.embed_images(x_feats, hyper)?;
                let ey = m.embed_texts(y_feats, hyper)?;
                let mut out = Vec::with_capacity(ex.rows());
                for i in 0..ex.rows() {
                    let mut row = Vec::with_capacity(ey.rows());
                    for j in 0..ey.rows() {
                        row.push(-row_distance(&ex, i, &ey, j));
                    }
                    out.push(row);
                }
                Ok(out)
            }
            Scorer::Similarity(m) => similarity_score_matrix(m, x_feats, y_feats, hyper),
        }
    }
}

/// All-pairs similarity scores: branch outputs once, then the head over each
/// query's fused rows.
fn similarity_score_matrix(
    model: &SimilarityModel,
    x_feats: &Tensor,
    y_feats: &Tensor,
    hyper: &NormHyper,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let ex = branch_infer(model, true, x_feats, hyper)?;
    let ey = branch_infer(model, false, y_feats, hyper)?;
    let d = ex.cols();
    let mut out = Vec::with_capacity(ex.rows());
    for i in 0..ex.rows() {
        let xi = ex.row(i)?;
        let mut fused = Vec::with_capacity(ey.rows() * d);
        for j in 0..ey.rows() {
            let yj = ey.row(j)?;
            fused.extend(xi.iter().zip(yj.iter()).map(|(a, b)| a * b));
        }
        let fused = Tensor::matrix(ey.rows(), d, fused)?;
        out.push(head_infer(model, &fused)?);
    }
    Ok(out)
}

fn branch_infer(
    model: &SimilarityModel,
    image_side: bool,
    feats: &Tensor,
    hyper: &NormHyper,
) -> Result<Tensor, EvalError> {
    let params = if image_side { &model.image } else { &model.text };
    let mut tape = Tape::new();
    let nodes = crate::branches::bind_branch(params, &mut tape);
    let x = tape.leaf(feats.clone());
    let fwd = crate::branches::branch_forward(
        &mut tape,
        params,
        &nodes,
        x,
        model.nonlinear,
        Mode::Infer,
        &mut None,
        hyper,
    )?;
    Ok(tape.value(fwd.output).clone())
}

fn head_infer(model: &SimilarityModel, fused: &Tensor) -> Result<Vec<f64>, EvalError> {
    let mut tape = Tape::new();
    let mut h = tape.leaf(fused.clone());
    let last = model.head.len() - 1;
    for (i, layer) in model.head.iter().enumerate() {
        let w = tape.leaf(layer.weight.clone());
        let b = tape.leaf(layer.bias.clone());
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if i < last {
            h = tape.relu(h);
        }
    }
    let flat = tape.flatten(h)?;
    Ok(tape.value(flat).data().to_vec())
}

/// Outcome of ranking one phrase's proposals.
#[derive(Clone, Debug)]
pub struct LocalizationOutcome {
    pub outcome: QueryOutcome,
    /// Proposal indices, best first.
    pub ranking: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Rank an image's proposals against a query phrase; correct at K when any
/// of the top K overlaps the ground truth at or above the eval threshold.
pub fn localize_phrase(
    scorer: &Scorer<'_>,
    phrase_feature: &[f64],
    proposals: &[Proposal],
    gt_box: &BBox,
    ks: &[usize],
    eval_threshold: f64,
    hyper: &NormHyper,
) -> Result<LocalizationOutcome, EvalError> {
    if proposals.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let region_rows: Vec<Vec<f64>> = proposals.iter().map(|p| p.feature.clone()).collect();
    let x = Tensor::from_rows(&region_rows)?;
    let y = Tensor::from_rows(&[phrase_feature.to_vec()])?;
    let matrix = scorer.score_matrix(&x, &y, hyper)?;
    let scores: Vec<f64> = matrix.iter().map(|row| row[0]).collect();
    let ids: Vec<u32> = (0..proposals.len() as u32).collect();
    let ranking = rank_by_score(&scores, &ids);

    let hit: Vec<bool> = ranking
        .iter()
        .map(|&p| iou(&proposals[p].bbox, gt_box) >= eval_threshold)
        .collect();
    let any_correct = proposals
        .iter()
        .any(|p| iou(&p.bbox, gt_box) >= eval_threshold);
    let correct_at = ks
        .iter()
        .map(|&k| hit.iter().take(k).any(|h| *h))
        .collect();
    Ok(LocalizationOutcome {
        outcome: QueryOutcome {
            correct_at,
            any_correct,
        },
        ranking,
        scores,
    })
}

/// Localization protocol over every phrase of the dataset: rank each
/// phrase's image proposals (capped at `max_proposals`) and report recall.
pub fn localization_recall(
    scorer: &Scorer<'_>,
    ds: &GroundedDataset,
    ks: &[usize],
    eval_threshold: f64,
    max_proposals: usize,
    hyper: &NormHyper,
) -> Result<RecallReport, EvalError> {
    let mut outcomes = Vec::with_capacity(ds.phrases().len());
    for phrase in ds.phrases() {
        let img = &ds.images()[ds.image_idx(phrase.image).expect("validated")];
        let pool = &img.proposals[..img.proposals.len().min(max_proposals)];
        let out = localize_phrase(
            scorer,
            &phrase.feature,
            pool,
            &phrase.gt_box,
            ks,
            eval_threshold,
            hyper,
        )?;
        outcomes.push(out.outcome);
    }
    recall_at_k(&outcomes, ks)
}

/// Retrieval direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ImageToSentence,
    SentenceToImage,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::ImageToSentence => write!(f, "image-to-sentence"),
            Direction::SentenceToImage => write!(f, "sentence-to-image"),
        }
    }
}

/// Bi-directional retrieval: each query is correct at K when at least one
/// ground-truth match ranks among the top K.
pub fn cross_modal_retrieval(
    scorer: &Scorer<'_>,
    ds: &GroundedDataset,
    direction: Direction,
    ks: &[usize],
    hyper: &NormHyper,
) -> Result<RecallReport, EvalError> {
    for s in ds.sentences() {
        if ds.image_idx(s.image).is_none() {
            return Err(EvalError::DanglingSentence {
                sentence_id: s.id,
                image_id: s.image,
            });
        }
    }
    if ds.images().is_empty() || ds.sentences().is_empty() {
        return Err(EvalError::NoQueries);
    }
    let image_rows: Vec<Vec<f64>> = ds.images().iter().map(|i| i.global_feature.clone()).collect();
    let sentence_rows: Vec<Vec<f64>> = ds.sentences().iter().map(|s| s.feature.clone()).collect();
    let x = Tensor::from_rows(&image_rows)?;
    let y = Tensor::from_rows(&sentence_rows)?;
    // scores[i][s]: image i against sentence s.
    let scores = scorer.score_matrix(&x, &y, hyper)?;

    let sentence_ids: Vec<u32> = ds.sentences().iter().map(|s| s.id).collect();
    let image_ids: Vec<u32> = ds.images().iter().map(|i| i.id).collect();
    let mut outcomes = Vec::new();
    match direction {
        Direction::ImageToSentence => {
            for (i, img) in ds.images().iter().enumerate() {
                let order = rank_by_score(&scores[i], &sentence_ids);
                let correct =
                    |s: usize| -> bool { ds.sentences()[s].image == img.id };
                outcomes.push(outcome_from_ranking(&order, ks, correct));
            }
        }
        Direction::SentenceToImage => {
            for (s, sent) in ds.sentences().iter().enumerate() {
                let col: Vec<f64> = scores.iter().map(|row| row[s]).collect();
                let order = rank_by_score(&col, &image_ids);
                let correct = |i: usize| -> bool { ds.images()[i].id == sent.image };
                outcomes.push(outcome_from_ranking(&order, ks, correct));
            }
        }
    }
    recall_at_k(&outcomes, ks)
}

fn outcome_from_ranking(
    order: &[usize],
    ks: &[usize],
    correct: impl Fn(usize) -> bool,
) -> QueryOutcome {
    let hits: Vec<bool> = order.iter().map(|&c| correct(c)).collect();
    QueryOutcome {
        correct_at: ks
            .iter()
            .map(|&k| hits.iter().take(k).any(|h| *h))
            .collect(),
        any_correct: hits.iter().any(|h| *h),
    }
}

/// Within-modality retrieval: given a query sentence, retrieve other
/// sentences of the same image. Queries without any same-image partner are
/// excluded from the denominator.
pub fn sentence_to_sentence(
    model: &EmbeddingModel,
    ds: &GroundedDataset,
    ks: &[usize],
    hyper: &NormHyper,
) -> Result<RecallReport, EvalError> {
    let rows: Vec<Vec<f64>> = ds.sentences().iter().map(|s| s.feature.clone()).collect();
    if rows.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let emb = model.embed_texts(&Tensor::from_rows(&rows)?, hyper)?;
    let n = ds.sentences().len();
    let mut outcomes = Vec::new();
    for q in 0..n {
        let query = &ds.sentences()[q];
        let has_partner = ds
            .sentences()
            .iter()
            .enumerate()
            .any(|(j, s)| j != q && s.image == query.image);
        if !has_partner {
            continue;
        }
        let candidates: Vec<usize> = (0..n).filter(|&j| j != q).collect();
        let scores: Vec<f64> = candidates
            .iter()
            .map(|&j| -row_distance(&emb, q, &emb, j))
            .collect();
        let ids: Vec<u32> = candidates.iter().map(|&j| ds.sentences()[j].id).collect();
        let order = rank_by_score(&scores, &ids);
        let correct = |c: usize| ds.sentences()[candidates[c]].image == query.image;
        outcomes.push(outcome_from_ranking(&order, ks, correct));
    }
    recall_at_k(&outcomes, ks)
}

/// Weighted combination of a global distance with the region-phrase distance
/// d_rp, the mean over the sentence's phrases of each phrase's best-matching
/// region distance. A sentence with no phrases falls back to the global
/// distance alone.
pub fn combined_distance(
    d_global: f64,
    per_phrase_region_distances: &[Vec<f64>],
    alpha: f64,
) -> Result<f64, EvalError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EvalError::BadAlpha(alpha));
    }
    if per_phrase_region_distances.is_empty() {
        return Ok(d_global);
    }
    let mut sum = 0.0;
    for dists in per_phrase_region_distances {
        let best = dists
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return Err(EvalError::NoQueries);
        }
        sum += best;
    }
    let d_rp = sum / per_phrase_region_distances.len() as f64;
    Ok((1.0 - alpha) * d_global + alpha * d_rp)
}

/// Retrieval with the combined global + region-phrase distance. The region
/// model scores each phrase of the query sentence's image against the
/// candidate image's proposals.
#[allow(clippy::too_many_arguments)]
pub fn combined_retrieval(
    global: &EmbeddingModel,
    region_model: &EmbeddingModel,
    ds: &GroundedDataset,
    direction: Direction,
    alpha: f64,
    ks: &[usize],
    hyper: &NormHyper,
) -> Result<RecallReport, EvalError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EvalError::BadAlpha(alpha));
    }
    if ds.images().is_empty() || ds.sentences().is_empty() {
        return Err(EvalError::NoQueries);
    }
    let image_rows: Vec<Vec<f64>> = ds.images().iter().map(|i| i.global_feature.clone()).collect();
    let sentence_rows: Vec<Vec<f64>> = ds.sentences().iter().map(|s| s.feature.clone()).collect();
    let ex = global.embed_images(&Tensor::from_rows(&image_rows)?, hyper)?;
    let ey = global.embed_texts(&Tensor::from_rows(&sentence_rows)?, hyper)?;

    // Region/phrase embeddings per image, under the region model.
    let mut region_embs: Vec<Option<Tensor>> = Vec::with_capacity(ds.images().len());
    for img in ds.images() {
        if img.proposals.is_empty() {
            region_embs.push(None);
            continue;
        }
        let rows: Vec<Vec<f64>> = img.proposals.iter().map(|p| p.feature.clone()).collect();
        region_embs.push(Some(
            region_model.embed_images(&Tensor::from_rows(&rows)?, hyper)?,
        ));
    }
    let mut phrase_embs: Vec<Option<Tensor>> = Vec::with_capacity(ds.images().len());
    for (ii, _) in ds.images().iter().enumerate() {
        let phrase_idxs = ds.phrases_of_image(ii);
        if phrase_idxs.is_empty() {
            phrase_embs.push(None);
            continue;
        }
        let rows: Vec<Vec<f64>> = phrase_idxs
            .iter()
            .map(|&p| ds.phrases()[p].feature.clone())
            .collect();
        phrase_embs.push(Some(
            region_model.embed_texts(&Tensor::from_rows(&rows)?, hyper)?,
        ));
    }

    // d_rp depends only on (candidate image, query image); cache it.
    let n_images = ds.images().len();
    let mut d_rp_cache: Vec<Vec<Option<f64>>> = vec![vec![None; n_images]; n_images];
    let mut d_rp = |cand: usize, query_img: usize,
                    region_embs: &[Option<Tensor>],
                    phrase_embs: &[Option<Tensor>]|
     -> Option<f64> {
        if let Some(v) = d_rp_cache[cand][query_img] {
            return Some(v);
        }
        let regions = region_embs[cand].as_ref()?;
        let phrases = phrase_embs[query_img].as_ref()?;
        let mut sum = 0.0;
        for p in 0..phrases.rows() {
            let mut best = f64::INFINITY;
            for r in 0..regions.rows() {
                best = best.min(row_distance(regions, r, phrases, p));
            }
            sum += best;
        }
        let v = sum / phrases.rows() as f64;
        d_rp_cache[cand][query_img] = Some(v);
        Some(v)
    };

    let sentence_ids: Vec<u32> = ds.sentences().iter().map(|s| s.id).collect();
    let image_ids: Vec<u32> = ds.images().iter().map(|i| i.id).collect();
    let mut outcomes = Vec::new();
    match direction {
        Direction::ImageToSentence => {
            for (i, img) in ds.images().iter().enumerate() {
                let scores: Vec<f64> = (0..ds.sentences().len())
                    .map(|s| {
                        let d_global = row_distance(&ex, i, &ey, s);
                        let query_img = ds
                            .image_idx(ds.sentences()[s].image)
                            .expect("validated sentence image");
                        let d = match d_rp(i, query_img, &region_embs, &phrase_embs) {
                            Some(rp) => (1.0 - alpha) * d_global + alpha * rp,
                            None => d_global,
                        };
                        -d
                    })
                    .collect();
                let order = rank_by_score(&scores, &sentence_ids);
                let correct = |s: usize| ds.sentences()[s].image == img.id;
                outcomes.push(outcome_from_ranking(&order, ks, correct));
            }
        }
        Direction::SentenceToImage => {
            for (s, sent) in ds.sentences().iter().enumerate() {
                let query_img = ds.image_idx(sent.image).expect("validated sentence image");
                let scores: Vec<f64> = (0..n_images)
                    .map(|i| {
                        let d_global = row_distance(&ex, i, &ey, s);
                        let d = match d_rp(i, query_img, &region_embs, &phrase_embs) {
                            Some(rp) => (1.0 - alpha) * d_global + alpha * rp,
                            None => d_global,
                        };
                        -d
                    })
                    .collect();
                let order = rank_by_score(&scores, &image_ids);
                let correct = |i: usize| ds.images()[i].id == sent.image;
                outcomes.push(outcome_from_ranking(&order, ks, correct));
            }
        }
    }
    recall_at_k(&outcomes, ks)
}
