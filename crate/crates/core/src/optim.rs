//! Adam optimizer and the staged training loop. Neighborhood constraint
//! terms activate at a configured epoch: the run starts with the plain
//! bi-directional weights and switches to the full weights (and to emitting
//! within-modality triplets) from the activation epoch on.

use crate::branches::{
    embedding_forward, similarity_forward, DropoutCtx, Mode, Model, NetworkKind, NormHyper,
};
use crate::dataset::{GroundedDataset, TaskKind};
use crate::error::TrainError;
use crate::losses::{logistic_loss_graph, ranking_loss_graph, LossWeights};
use crate::sampling::{
    build_pair_batch, build_pair_batch_sentences, build_sentence_batch, build_triplet_batch,
    shard_localization_pairs, shard_sentence_pairs, PairBatch, SamplerOptions, TripletBatch,
};
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: step count plus first/second moment accumulators
/// mirroring the parameter shapes.
pub struct AdamState {
    pub step_count: u64,
    pub hyper: AdamHyper,
    moments: Vec<(Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(params: &[&Tensor], hyper: AdamHyper) -> Self {
        AdamState {
            step_count: 0,
            hyper,
            moments: params
                .iter()
                .map(|p| {
                    (
                        Tensor::zeros(p.shape().to_vec()),
                        Tensor::zeros(p.shape().to_vec()),
                    )
                })
                .collect(),
        }
    }

    /// One Adam update with bias correction:
    /// m <- b1 m + (1-b1) g, v <- b2 v + (1-b2) g^2,
    /// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
    ) -> Result<(), TrainError> {
        if params.len() != grads.len() || params.len() != self.moments.len() {
            return Err(TrainError::GradShape {
                index: usize::MAX,
                params: format!("{} tensors", params.len()),
                grads: format!("{} tensors", grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.shape() != g.shape() {
                return Err(TrainError::GradShape {
                    index: i,
                    params: p.shape_string(),
                    grads: g.shape_string(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.hyper.beta1.powi(t);
        let bc2 = 1.0 - self.hyper.beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.moments.iter_mut())
        {
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, g) in grad.data().iter().enumerate() {
                md[i] = self.hyper.beta1 * md[i] + (1.0 - self.hyper.beta1) * g;
                vd[i] = self.hyper.beta2 * vd[i] + (1.0 - self.hyper.beta2) * g * g;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= self.hyper.learning_rate * m_hat / (v_hat.sqrt() + self.hyper.eps);
            }
        }
        Ok(())
    }
}

/// Dropout as a tape operation: train mode zeroes entries with the given
/// probability and rescales survivors by 1/(1-rate); inference mode is the
/// identity.
pub fn dropout(
    tape: &mut Tape,
    a: NodeId,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, TrainError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TrainError::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(a);
    }
    let keep = 1.0 - rate;
    let mask = (0..tape.value(a).len())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect();
    Ok(tape.dropout(a, mask)?)
}

/// Staged training plan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    /// Epoch at which neighborhood terms switch on; none keeps them off.
    pub neighborhood_activation_epoch: Option<usize>,
    pub weights_before: LossWeights,
    pub weights_after: LossWeights,
    pub seed: u64,
    pub dropout_rate: f64,
}

impl TrainSchedule {
    pub fn validate(&self, kind: NetworkKind, task: TaskKind) -> Result<(), TrainError> {
        if let Some(e) = self.neighborhood_activation_epoch {
            if e > self.total_epochs {
                return Err(TrainError::Config(format!(
                    "activation epoch {e} exceeds total epochs {}",
                    self.total_epochs
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(TrainError::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        match kind {
            NetworkKind::Similarity => {
                if self.weights_after.has_neighborhood() || self.weights_before.has_neighborhood()
                {
                    return Err(TrainError::Config(
                        "neighborhood terms are undefined for the similarity network".into(),
                    ));
                }
            }
            NetworkKind::Embedding => {
                self.weights_before.validate()?;
                self.weights_after.validate()?;
                if task == TaskKind::Retrieval && self.weights_after.xx > 0.0 {
                    return Err(TrainError::Config(
                        "image-side neighborhood constraints cannot be applied to image-sentence data"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn weights_at(&self, epoch: usize) -> (LossWeights, bool) {
        match self.neighborhood_activation_epoch {
            Some(e) if epoch >= e => (self.weights_after, self.weights_after.has_neighborhood()),
            _ => (self.weights_before.without_neighborhood(), false),
        }
    }
}

/// Everything the training loop needs besides model and data.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub schedule: TrainSchedule,
    pub adam: AdamHyper,
    pub sampler: SamplerOptions,
    pub hyper: NormHyper,
    /// Global-norm gradient clip; off by default.
    pub gradient_clip: Option<f64>,
    /// Line-delimited epoch records are appended here when set.
    pub metrics_path: Option<std::path::PathBuf>,
    /// A checkpoint is written per epoch when set.
    pub checkpoint_dir: Option<std::path::PathBuf>,
    /// Recorded in checkpoint headers.
    pub config_hash: String,
}

impl TrainOptions {
    pub fn new(schedule: TrainSchedule) -> Self {
        TrainOptions {
            schedule,
            adam: AdamHyper::default(),
            sampler: SamplerOptions::default(),
            hyper: NormHyper::default(),
            gradient_clip: None,
            metrics_path: None,
            checkpoint_dir: None,
            config_hash: String::new(),
        }
    }
}

/// Weighted loss components of one step or epoch.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub x2y: f64,
    pub y2x: f64,
    pub xx: f64,
    pub yy: f64,
    pub logistic: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.x2y += other.x2y;
        self.y2x += other.y2x;
        self.xx += other.xx;
        self.yy += other.yy;
        self.logistic += other.logistic;
    }
}

/// Per-epoch record, also emitted as one JSON line to the metrics file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    /// Triplets or labeled pairs consumed.
    pub items: usize,
    pub loss: LossBreakdown,
    pub skipped_positives: usize,
    pub skipped_batches: usize,
    pub neighborhood_terms_active: bool,
    pub wall_secs: f64,
}

/// One training step as seen by an observer, before the parameter update.
pub struct StepContext<'a> {
    pub epoch: usize,
    pub shard_index: usize,
    /// Pre-step parameters.
    pub model: &'a Model,
    pub batch: BatchView<'a>,
    pub loss: &'a LossBreakdown,
    pub weights: &'a LossWeights,
}

pub enum BatchView<'a> {
    Triplets(&'a TripletBatch),
    Pairs(&'a PairBatch),
}

/// Hook into the training loop; the default observer does nothing.
pub trait TrainObserver {
    fn on_step(&mut self, _ctx: &StepContext<'_>) {}
}

struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Derive a decorrelated sub-seed from a base seed and two indices.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut x = base
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn clip_grads(grads: &mut [Tensor], clip: f64) {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > clip && norm > 0.0 {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

/// Train a model on a dataset per the staged schedule. Returns the per-epoch
/// reports; the model is updated in place.
pub fn train(
    model: &mut Model,
    ds: &GroundedDataset,
    opts: &TrainOptions,
    task: TaskKind,
) -> Result<Vec<EpochReport>, TrainError> {
    train_with_observer(model, ds, opts, task, &mut NoopObserver)
}

/// [`train`] with a step observer for audits and loss re-evaluation.
pub fn train_with_observer(
    model: &mut Model,
    ds: &GroundedDataset,
    opts: &TrainOptions,
    task: TaskKind,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochReport>, TrainError> {
    let kind = model.kind();
    opts.schedule.validate(kind, task)?;
    ds.validate_for(task)?;

    let mut adam = AdamState::new(&model.params(), opts.adam);
    let mut reports = Vec::with_capacity(opts.schedule.total_epochs);
    let mut metrics: Option<std::fs::File> = match &opts.metrics_path {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };

    for epoch in 0..opts.schedule.total_epochs {
        let started = Instant::now();
        let epoch_seed = mix_seed(opts.schedule.seed, epoch as u64 + 1, 0);
        let (weights, terms_active) = opts.schedule.weights_at(epoch);
        let mut sampler = opts.sampler;
        sampler.margin = weights.margin;
        sampler.emit_neighborhood_terms = terms_active;
        if kind == NetworkKind::Embedding {
            sampler.mine_x2y = weights.x2y > 0.0;
            sampler.mine_y2x = weights.y2x > 0.0;
        }

        let mut report = EpochReport {
            epoch,
            steps: 0,
            items: 0,
            loss: LossBreakdown::default(),
            skipped_positives: 0,
            skipped_batches: 0,
            neighborhood_terms_active: terms_active,
            wall_secs: 0.0,
        };

        enum Shards {
            Localization(Vec<Vec<crate::sampling::GtPair>>),
            Sentences(Vec<Vec<crate::sampling::SentencePair>>),
        }
        let shards = match task {
            TaskKind::Localization => {
                Shards::Localization(shard_localization_pairs(ds, sampler.shard_size, epoch_seed)?)
            }
            TaskKind::Retrieval => {
                Shards::Sentences(shard_sentence_pairs(ds, sampler.shard_size, epoch_seed)?)
            }
        };
        let shard_count = match &shards {
            Shards::Localization(s) => s.len(),
            Shards::Sentences(s) => s.len(),
        };
        for si in 0..shard_count {
            let mut sample_rng = ChaCha8Rng::seed_from_u64(mix_seed(epoch_seed, si as u64, 1));
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(epoch_seed, si as u64, 2));
            match (&shards, kind) {
                (Shards::Localization(shards), NetworkKind::Embedding) => {
                    let batch = {
                        let m = model.as_embedding().expect("kind checked");
                        build_triplet_batch(&shards[si], ds, m, &sampler, &opts.hyper, &mut sample_rng)?
                    };
                    step_embedding(
                        model, &batch, &weights, opts, &mut adam, &mut dropout_rng, epoch, si,
                        observer, &mut report,
                    )?;
                }
                (Shards::Localization(shards), NetworkKind::Similarity) => {
                    let batch = build_pair_batch(&shards[si], ds, &sampler, &mut sample_rng)?;
                    step_similarity(
                        model, &batch, &weights, opts, &mut adam, &mut dropout_rng, epoch, si,
                        observer, &mut report,
                    )?;
                }
                (Shards::Sentences(shards), NetworkKind::Embedding) => {
                    let batch = {
                        let m = model.as_embedding().expect("kind checked");
                        build_sentence_batch(&shards[si], ds, m, &sampler, &opts.hyper, &mut sample_rng)?
                    };
                    step_embedding(
                        model, &batch, &weights, opts, &mut adam, &mut dropout_rng, epoch, si,
                        observer, &mut report,
                    )?;
                }
                (Shards::Sentences(shards), NetworkKind::Similarity) => {
                    let batch = build_pair_batch_sentences(&shards[si], ds, &mut sample_rng)?;
                    step_similarity(
                        model, &batch, &weights, opts, &mut adam, &mut dropout_rng, epoch, si,
                        observer, &mut report,
                    )?;
                }
            }
        }

        report.wall_secs = started.elapsed().as_secs_f64();
        if let Some(f) = metrics.as_mut() {
            let line = serde_json::to_string(&report).expect("serializable report");
            writeln!(f, "{line}")?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let path = dir.join(format!("epoch-{epoch:03}.tbck"));
            crate::checkpoint::save(model, &path, &opts.config_hash)
                .map_err(|e| TrainError::Config(format!("checkpoint write failed: {e}")))?;
        }
        reports.push(report);
    }
    Ok(reports)
}

#[allow(clippy::too_many_arguments)]
fn step_embedding(
    model: &mut Model,
    batch: &TripletBatch,
    weights: &LossWeights,
    opts: &TrainOptions,
    adam: &mut AdamState,
    dropout_rng: &mut ChaCha8Rng,
    epoch: usize,
    shard_index: usize,
    observer: &mut dyn TrainObserver,
    report: &mut EpochReport,
) -> Result<(), TrainError> {
    let nonlinear = model.as_embedding().expect("embedding step").nonlinear;
    // Skip when nothing weighted survived mining; batch norm additionally
    // needs at least two rows per side in train mode.
    if batch.triplets.weighted_len(weights) == 0
        || (nonlinear && (batch.x_rows.len() < 2 || batch.y_rows.len() < 2))
    {
        report.skipped_batches += 1;
        return Ok(());
    }

    let (loss, grads, bn_image, bn_text) = {
        let m = model.as_embedding().expect("embedding step");
        let mut tape = Tape::new();
        let nodes = m.bind(&mut tape);
        let x = tape.leaf(batch.x_tensor()?);
        let y = tape.leaf(batch.y_tensor()?);
        let mut ctx = (opts.schedule.dropout_rate > 0.0).then_some(DropoutCtx {
            rate: opts.schedule.dropout_rate,
            rng: dropout_rng,
        });
        let fwd = embedding_forward(
            &mut tape,
            m,
            &nodes,
            x,
            y,
            Mode::Train,
            &mut ctx,
            &opts.hyper,
        )?;
        let loss_nodes = ranking_loss_graph(
            &mut tape,
            fwd.image_output,
            fwd.text_output,
            &batch.triplets,
            weights,
        )?;
        let (total, x2y, y2x, xx, yy) = loss_nodes.breakdown(&tape);
        let loss = LossBreakdown {
            total,
            x2y,
            y2x,
            xx,
            yy,
            logistic: 0.0,
        };
        let grads_map = tape.backward(loss_nodes.total)?;
        let node_list: Vec<_> = nodes
            .image
            .list()
            .into_iter()
            .chain(nodes.text.list())
            .collect();
        let mut grads: Vec<Tensor> = node_list
            .iter()
            .map(|&n| grads_map.tensor(n, &tape))
            .collect();
        if let Some(clip) = opts.gradient_clip {
            clip_grads(&mut grads, clip);
        }
        (loss, grads, fwd.image_bn, fwd.text_bn)
    };

    observer.on_step(&StepContext {
        epoch,
        shard_index,
        model,
        batch: BatchView::Triplets(batch),
        loss: &loss,
        weights,
    });

    let Model::Embedding(m) = model else {
        unreachable!("embedding step");
    };
    if let Some((mean, var)) = bn_image {
        m.image.norm.running_mean = mean;
        m.image.norm.running_var = var;
    }
    if let Some((mean, var)) = bn_text {
        m.text.norm.running_mean = mean;
        m.text.norm.running_var = var;
    }
    adam.step(&mut m.params_mut(), &grads)?;

    report.steps += 1;
    report.items += batch.triplets.len();
    report.loss.accumulate(&loss);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn step_similarity(
    model: &mut Model,
    batch: &PairBatch,
    weights: &LossWeights,
    opts: &TrainOptions,
    adam: &mut AdamState,
    dropout_rng: &mut ChaCha8Rng,
    epoch: usize,
    shard_index: usize,
    observer: &mut dyn TrainObserver,
    report: &mut EpochReport,
) -> Result<(), TrainError> {
    report.skipped_positives += batch.skipped_positives;
    let nonlinear = model.as_similarity().expect("similarity step").nonlinear;
    if batch.is_empty() || (nonlinear && batch.labels.len() < 2) {
        report.skipped_batches += 1;
        return Ok(());
    }

    let (loss, grads, bn_image, bn_text) = {
        let m = model.as_similarity().expect("similarity step");
        let mut tape = Tape::new();
        let nodes = m.bind(&mut tape);
        let x = tape.leaf(batch.x_tensor()?);
        let y = tape.leaf(batch.y_tensor()?);
        let mut ctx = (opts.schedule.dropout_rate > 0.0).then_some(DropoutCtx {
            rate: opts.schedule.dropout_rate,
            rng: dropout_rng,
        });
        let fwd =
            similarity_forward(&mut tape, m, &nodes, x, y, Mode::Train, &mut ctx, &opts.hyper)?;
        let loss_node = logistic_loss_graph(&mut tape, fwd.scores, &batch.labels)?;
        let total = tape.value(loss_node).item();
        let loss = LossBreakdown {
            total,
            logistic: total,
            ..LossBreakdown::default()
        };
        let grads_map = tape.backward(loss_node)?;
        let mut node_list: Vec<_> = nodes
            .image
            .list()
            .into_iter()
            .chain(nodes.text.list())
            .collect();
        for (w, b) in &nodes.head {
            node_list.push(*w);
            node_list.push(*b);
        }
        let mut grads: Vec<Tensor> = node_list
            .iter()
            .map(|&n| grads_map.tensor(n, &tape))
            .collect();
        if let Some(clip) = opts.gradient_clip {
            clip_grads(&mut grads, clip);
        }
        (loss, grads, fwd.image_bn, fwd.text_bn)
    };

    observer.on_step(&StepContext {
        epoch,
        shard_index,
        model,
        batch: BatchView::Pairs(batch),
        loss: &loss,
        weights,
    });

    let Model::Similarity(m) = model else {
        unreachable!("similarity step");
    };
    if let Some((mean, var)) = bn_image {
        m.image.norm.running_mean = mean;
        m.image.norm.running_var = var;
    }
    if let Some((mean, var)) = bn_text {
        m.text.norm.running_mean = mean;
        m.text.norm.running_var = var;
    }
    adam.step(&mut m.params_mut(), &grads)?;

    report.steps += 1;
    report.items += batch.labels.len();
    report.loss.accumulate(&loss);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branches::{BranchDims, EmbeddingDims, EmbeddingModel};
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::losses::hinge;
    use crate::sampling::TripletStep;
    use crate::tensor::row_distance;

    fn hyper_with_lr(lr: f64) -> AdamHyper {
        AdamHyper {
            learning_rate: lr,
            ..AdamHyper::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let g = Tensor::zeros(vec![3]);
        let mut state = AdamState::new(&[&p], hyper_with_lr(0.1));
        state.step(&mut [&mut p], &[g]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_magnitude_is_about_learning_rate() {
        // With bias correction, the first update is lr * g / (|g| + eps').
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let g = Tensor::vector(vec![0.5, -2.0]);
        let lr = 0.01;
        let mut state = AdamState::new(&[&p], hyper_with_lr(lr));
        state.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] + lr).abs() < 1e-6, "sign follows -g: {}", p.data()[0]);
        assert!((p.data()[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn adam_drives_quadratic_to_zero() {
        // f(theta) = |theta|^2, gradient 2 theta. Checked against an
        // independent scalar Adam transcription, step by step.
        let mut p = Tensor::vector(vec![1.0, 1.0]);
        let mut state = AdamState::new(&[&p], hyper_with_lr(0.1));

        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let mut theta = [1.0f64, 1.0];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        let mut norms = Vec::new();
        for t in 1..=100 {
            let g = Tensor::vector(p.data().iter().map(|v| 2.0 * v).collect());
            state.step(&mut [&mut p], &[g]).unwrap();

            let grad = [2.0 * theta[0], 2.0 * theta[1]];
            for i in 0..2 {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let m_hat = m[i] / (1.0 - b1_pow(b1, t));
                let v_hat = v[i] / (1.0 - b1_pow(b2, t));
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            for i in 0..2 {
                assert_eq!(
                    p.data()[i].to_bits(),
                    theta[i].to_bits(),
                    "step {t} diverges from the reference"
                );
            }
            norms.push(p.data().iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        let final_norm = *norms.last().unwrap();
        assert!(final_norm < 0.05, "final norm {final_norm}");
        // The descent phase shrinks the norm by orders of magnitude before
        // the oscillation around the minimum sets in.
        assert!(norms[40] < 0.5 * norms[5]);
    }

    fn b1_pow(b: f64, t: usize) -> f64 {
        b.powi(t as i32)
    }

    #[test]
    fn adam_is_invariant_to_parameter_partitioning() {
        // One flat tensor vs the same values split in two: updates agree
        // bit-exactly because the rule is elementwise.
        let values = vec![0.3, -1.2, 0.8, 2.0];
        let grads = vec![0.1, -0.4, 0.2, 0.9];
        let mut flat = Tensor::vector(values.clone());
        let mut s1 = AdamState::new(&[&flat], hyper_with_lr(0.05));
        s1.step(&mut [&mut flat], &[Tensor::vector(grads.clone())])
            .unwrap();

        let mut a = Tensor::vector(values[..2].to_vec());
        let mut b = Tensor::matrix(1, 2, values[2..].to_vec()).unwrap();
        let mut s2 = AdamState::new(&[&a, &b], hyper_with_lr(0.05));
        s2.step(
            &mut [&mut a, &mut b],
            &[
                Tensor::vector(grads[..2].to_vec()),
                Tensor::matrix(1, 2, grads[2..].to_vec()).unwrap(),
            ],
        )
        .unwrap();
        let recombined: Vec<u64> = a
            .data()
            .iter()
            .chain(b.data())
            .map(|v| v.to_bits())
            .collect();
        let flat_bits: Vec<u64> = flat.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(recombined, flat_bits);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut state = AdamState::new(&[&p], AdamHyper::default());
        assert!(state.step(&mut [&mut p], &[g]).is_err());
    }

    #[test]
    fn dropout_rate_zero_and_infer_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let same = dropout(&mut tape, a, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(same, a);
        let same = dropout(&mut tape, a, 0.9, Mode::Infer, &mut rng).unwrap();
        assert_eq!(same, a);
        assert!(dropout(&mut tape, a, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_statistics() {
        let n = 100_000;
        let rate = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0; n]));
        let d = dropout(&mut tape, a, rate, Mode::Train, &mut rng).unwrap();
        let out = tape.value(d).data();
        let survivors = out.iter().filter(|v| **v != 0.0).count() as f64;
        let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
        assert!(
            (survivors - n as f64 * (1.0 - rate)).abs() < 3.0 * sigma,
            "survivors {survivors}"
        );
        // Inverted scaling preserves the mean within a couple percent.
        let mean = out.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    fn tiny_ds(items: usize, seed: u64) -> crate::dataset::GroundedDataset {
        generate_synthetic(&SyntheticSpec {
            items,
            latent_dim: 6,
            image_feature_dim: 16,
            text_feature_dim: 12,
            texts_per_item: 3,
            proposals_per_item: 8,
            noise_scale: 0.05,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn tiny_model(seed: u64) -> Model {
        Model::Embedding(
            EmbeddingModel::init(
                EmbeddingDims {
                    image: BranchDims {
                        input: 16,
                        hidden: 12,
                        embed: 8,
                    },
                    text: BranchDims {
                        input: 12,
                        hidden: 12,
                        embed: 8,
                    },
                },
                true,
                seed,
            )
            .unwrap(),
        )
    }

    fn tiny_options(epochs: usize, seed: u64) -> TrainOptions {
        let weights = LossWeights {
            margin: 0.05,
            x2y: 1.0,
            y2x: 4.0,
            xx: 0.1,
            yy: 0.1,
        };
        let schedule = TrainSchedule {
            total_epochs: epochs,
            neighborhood_activation_epoch: Some(epochs.saturating_sub(1)),
            weights_before: weights.without_neighborhood(),
            weights_after: weights,
            seed,
            dropout_rate: 0.0,
        };
        let mut opts = TrainOptions::new(schedule);
        opts.adam.learning_rate = 0.005;
        opts.sampler.shard_size = 20;
        opts.sampler.k_cap = 5;
        opts
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let ds = tiny_ds(6, 3);
        let mut model = tiny_model(1);
        let before = model.clone();
        let reports = train(&mut model, &ds, &tiny_options(0, 5), TaskKind::Localization).unwrap();
        assert!(reports.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let ds = tiny_ds(8, 4);
        let run = || {
            let mut model = tiny_model(2);
            train(&mut model, &ds, &tiny_options(3, 11), TaskKind::Localization).unwrap();
            model
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn similarity_schedule_rejects_neighborhood_terms() {
        let weights = LossWeights {
            margin: 0.05,
            x2y: 1.0,
            y2x: 1.0,
            xx: 0.1,
            yy: 0.0,
        };
        let schedule = TrainSchedule {
            total_epochs: 1,
            neighborhood_activation_epoch: Some(0),
            weights_before: weights.without_neighborhood(),
            weights_after: weights,
            seed: 1,
            dropout_rate: 0.0,
        };
        assert!(schedule
            .validate(NetworkKind::Similarity, TaskKind::Localization)
            .is_err());
        assert!(schedule
            .validate(NetworkKind::Embedding, TaskKind::Localization)
            .is_ok());
        // Image-side term is also rejected for the image-sentence task.
        assert!(schedule
            .validate(NetworkKind::Embedding, TaskKind::Retrieval)
            .is_err());
    }

    /// Re-evaluates the logged loss with the pre-step parameters through an
    /// independent scalar pass over the batch.
    struct LossAudit {
        checked: usize,
        neighborhood_seen: bool,
    }

    impl TrainObserver for LossAudit {
        fn on_step(&mut self, ctx: &StepContext<'_>) {
            let BatchView::Triplets(batch) = ctx.batch else {
                panic!("embedding steps carry triplet batches");
            };
            if batch.is_empty() {
                return;
            }
            let model = ctx.model.as_embedding().expect("embedding model");
            // Train-mode forward: recompute embeddings on a fresh tape with
            // identical inputs, then sum hinges by hand.
            let mut tape = Tape::new();
            let nodes = model.bind(&mut tape);
            let x = tape.leaf(batch.x_tensor().unwrap());
            let y = tape.leaf(batch.y_tensor().unwrap());
            let fwd = embedding_forward(
                &mut tape,
                model,
                &nodes,
                x,
                y,
                Mode::Train,
                &mut None,
                &NormHyper::default(),
            )
            .unwrap();
            let ex = tape.value(fwd.image_output).clone();
            let ey = tape.value(fwd.text_output).clone();
            let w = ctx.weights;
            let term = |list: &[crate::losses::Triplet], anchor: &Tensor, other: &Tensor| -> f64 {
                list.iter()
                    .map(|t| {
                        hinge(
                            w.margin,
                            row_distance(anchor, t.target, other, t.positive),
                            row_distance(anchor, t.target, other, t.negative),
                        )
                    })
                    .sum()
            };
            let expected = w.x2y * term(&batch.triplets.x2y, &ex, &ey)
                + w.y2x * term(&batch.triplets.y2x, &ey, &ex)
                + w.xx * term(&batch.triplets.xx, &ex, &ex)
                + w.yy * term(&batch.triplets.yy, &ey, &ey);
            assert!(
                (ctx.loss.total - expected).abs() <= 1e-12 * expected.abs().max(1.0),
                "step loss {} vs re-evaluation {expected}",
                ctx.loss.total
            );
            if !batch.triplets.xx.is_empty() || !batch.triplets.yy.is_empty() {
                self.neighborhood_seen = true;
            }
            self.checked += 1;
        }
    }

    #[test]
    fn logged_step_loss_matches_independent_reevaluation() {
        let ds = tiny_ds(10, 6);
        let mut model = tiny_model(3);
        let mut audit = LossAudit {
            checked: 0,
            neighborhood_seen: false,
        };
        train_with_observer(
            &mut model,
            &ds,
            &tiny_options(3, 9),
            TaskKind::Localization,
            &mut audit,
        )
        .unwrap();
        assert!(audit.checked > 0);
        assert!(
            audit.neighborhood_seen,
            "activation epoch should emit within-modality triplets"
        );
    }

    /// Provenance audit: without neighborhood terms or sampling, no
    /// within-modality triplet is ever constructed.
    struct NoNeighborhoodAudit;

    impl TrainObserver for NoNeighborhoodAudit {
        fn on_step(&mut self, ctx: &StepContext<'_>) {
            let BatchView::Triplets(batch) = ctx.batch else {
                return;
            };
            assert!(batch.triplets.xx.is_empty() && batch.triplets.yy.is_empty());
            assert!(batch
                .provenance
                .x2y
                .iter()
                .all(|s| *s == TripletStep::Mined));
        }
    }

    #[test]
    fn plain_weights_never_touch_within_modality_distances() {
        let ds = tiny_ds(8, 7);
        let mut model = tiny_model(4);
        let mut opts = tiny_options(2, 13);
        opts.schedule.neighborhood_activation_epoch = None;
        opts.sampler.neighborhood_sampling = false;
        train_with_observer(
            &mut model,
            &ds,
            &opts,
            TaskKind::Localization,
            &mut NoNeighborhoodAudit,
        )
        .unwrap();
    }
}
