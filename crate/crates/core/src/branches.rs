//! The two-branch networks: an embedding network that maps both modalities
//! onto a shared unit sphere, and a similarity network that fuses the two
//! branches by element-wise product and regresses a scalar match score.
//!
//! Each branch is FC -> ReLU -> FC -> batch norm -> L2 normalization in the
//! nonlinear configuration, or a single FC followed by L2 normalization in
//! the linear one.

use crate::error::TensorError;
use crate::tensor::{NodeId, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

/// Forward-pass mode. Training uses batch statistics and dropout; inference
/// uses running statistics and is deterministic per row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

/// Network kind selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Embedding,
    Similarity,
}

impl std::fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NetworkKind::Embedding => write!(f, "embedding"),
            NetworkKind::Similarity => write!(f, "similarity"),
        }
    }
}

/// Numeric constants for normalization layers.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NormHyper {
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub l2_eps: f64,
}

impl Default for NormHyper {
    fn default() -> Self {
        NormHyper {
            bn_eps: 1e-5,
            bn_momentum: 0.9,
            l2_eps: 1e-12,
        }
    }
}

/// A fully connected layer. Weights are stored input-major: `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Linear {
            weight: Tensor::matrix(input, output, data).expect("positive dims"),
            bias: Tensor::zeros(vec![output]),
        }
    }
}

/// Batch normalization parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn init(dim: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(vec![dim], 1.0),
            beta: Tensor::zeros(vec![dim]),
            running_mean: Tensor::zeros(vec![dim]),
            running_var: Tensor::filled(vec![dim], 1.0),
        }
    }
}

/// Layer sizes of one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
}

/// One branch of a two-branch network.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm: BatchNorm,
}

impl BranchParams {
    pub fn init(dims: BranchDims, rng: &mut ChaCha8Rng) -> Self {
        BranchParams {
            fc1: Linear::init(dims.input, dims.hidden, rng),
            fc2: Linear::init(dims.hidden, dims.embed, rng),
            norm: BatchNorm::init(dims.embed),
        }
    }

    pub fn dims(&self) -> BranchDims {
        BranchDims {
            input: self.fc1.weight.rows(),
            hidden: self.fc1.weight.cols(),
            embed: self.fc2.weight.cols(),
        }
    }

    fn trainable(&self) -> [&Tensor; 6] {
        [
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
            &self.norm.gamma,
            &self.norm.beta,
        ]
    }

    fn trainable_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
            &mut self.norm.gamma,
            &mut self.norm.beta,
        ]
    }
}

/// Tape handles for one branch's trainable parameters.
#[derive(Clone, Copy, Debug)]
pub struct BranchNodes {
    pub fc1_weight: NodeId,
    pub fc1_bias: NodeId,
    pub fc2_weight: NodeId,
    pub fc2_bias: NodeId,
    pub bn_gamma: NodeId,
    pub bn_beta: NodeId,
}

/// Register one branch's parameters on a tape.
pub fn bind_branch(params: &BranchParams, tape: &mut Tape) -> BranchNodes {
    BranchNodes::bind(params, tape)
}

impl BranchNodes {
    fn bind(params: &BranchParams, tape: &mut Tape) -> Self {
        BranchNodes {
            fc1_weight: tape.leaf(params.fc1.weight.clone()),
            fc1_bias: tape.leaf(params.fc1.bias.clone()),
            fc2_weight: tape.leaf(params.fc2.weight.clone()),
            fc2_bias: tape.leaf(params.fc2.bias.clone()),
            bn_gamma: tape.leaf(params.norm.gamma.clone()),
            bn_beta: tape.leaf(params.norm.beta.clone()),
        }
    }

    pub fn list(&self) -> [NodeId; 6] {
        [
            self.fc1_weight,
            self.fc1_bias,
            self.fc2_weight,
            self.fc2_bias,
            self.bn_gamma,
            self.bn_beta,
        ]
    }
}

/// Dropout request threaded through a forward pass. Applied after every ReLU
/// in train mode, never after batch norm or L2 normalization.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl DropoutCtx<'_> {
    fn mask(&mut self, len: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..len)
            .map(|_| {
                if self.rng.gen::<f64>() < self.rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect()
    }
}

fn apply_dropout(
    tape: &mut Tape,
    node: NodeId,
    mode: Mode,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<NodeId, TensorError> {
    match dropout {
        Some(ctx) if mode == Mode::Train && ctx.rate > 0.0 => {
            let mask = ctx.mask(tape.value(node).len());
            tape.dropout(node, mask)
        }
        _ => Ok(node),
    }
}

/// Output of a branch forward pass. In train mode the updated running
/// statistics are handed back for the caller to commit.
pub struct BranchForward {
    pub output: NodeId,
    pub bn_update: Option<(Tensor, Tensor)>,
}

/// Run one branch. Nonlinear: FC1 -> ReLU -> FC2 -> batch norm -> L2
/// normalization; linear: FC1 -> L2 normalization. Output rows are unit norm.
pub fn branch_forward(
    tape: &mut Tape,
    params: &BranchParams,
    nodes: &BranchNodes,
    x: NodeId,
    nonlinear: bool,
    mode: Mode,
    dropout: &mut Option<DropoutCtx<'_>>,
    hyper: &NormHyper,
) -> Result<BranchForward, TensorError> {
    let h = tape.matmul(x, nodes.fc1_weight)?;
    let h = tape.add_row(h, nodes.fc1_bias)?;
    if !nonlinear {
        return Ok(BranchForward {
            output: tape.l2_normalize(h, hyper.l2_eps),
            bn_update: None,
        });
    }
    let r = tape.relu(h);
    let r = apply_dropout(tape, r, mode, dropout)?;
    let z = tape.matmul(r, nodes.fc2_weight)?;
    let z = tape.add_row(z, nodes.fc2_bias)?;
    let (normed, bn_update) = match mode {
        Mode::Train => {
            let (id, mean, var) = tape.batch_norm_train(
                z,
                nodes.bn_gamma,
                nodes.bn_beta,
                hyper.bn_eps,
                hyper.bn_momentum,
                &params.norm.running_mean,
                &params.norm.running_var,
            )?;
            (id, Some((mean, var)))
        }
        Mode::Infer => (
            tape.batch_norm_infer(
                z,
                nodes.bn_gamma,
                nodes.bn_beta,
                hyper.bn_eps,
                &params.norm.running_mean,
                &params.norm.running_var,
            )?,
            None,
        ),
    };
    Ok(BranchForward {
        output: tape.l2_normalize(normed, hyper.l2_eps),
        bn_update,
    })
}

/// Layer sizes of the embedding network. Both branches share the embedding
/// dimension of the joint latent space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingDims {
    pub image: BranchDims,
    pub text: BranchDims,
}

impl EmbeddingDims {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.image.embed != self.text.embed {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_dims",
                left: format!("image embed {}", self.image.embed),
                right: format!("text embed {}", self.text.embed),
            });
        }
        Ok(())
    }
}

/// The embedding network: two branches into a shared latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    pub image: BranchParams,
    pub text: BranchParams,
    pub nonlinear: bool,
}

/// Tape handles for the embedding network.
pub struct EmbeddingNodes {
    pub image: BranchNodes,
    pub text: BranchNodes,
}

impl EmbeddingModel {
    /// Initialize with uniform fan-based weights, zero biases, unit gamma.
    /// Deterministic given the seed.
    pub fn init(dims: EmbeddingDims, nonlinear: bool, seed: u64) -> Result<Self, TensorError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(EmbeddingModel {
            image: BranchParams::init(dims.image, &mut rng),
            text: BranchParams::init(dims.text, &mut rng),
            nonlinear,
        })
    }

    pub fn dims(&self) -> EmbeddingDims {
        EmbeddingDims {
            image: self.image.dims(),
            text: self.text.dims(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> EmbeddingNodes {
        EmbeddingNodes {
            image: BranchNodes::bind(&self.image, tape),
            text: BranchNodes::bind(&self.text, tape),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for side in ["image", "text"] {
            for p in [
                "fc1_weight",
                "fc1_bias",
                "fc2_weight",
                "fc2_bias",
                "bn_gamma",
                "bn_beta",
            ] {
                names.push(format!("{side}.{p}"));
            }
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.image.trainable().to_vec();
        v.extend(self.text.trainable());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let (image, text) = (&mut self.image, &mut self.text);
        let mut v: Vec<&mut Tensor> = image.trainable_mut().into_iter().collect();
        v.extend(text.trainable_mut());
        v
    }

    /// Embed image-side features in inference mode.
    pub fn embed_images(&self, feats: &Tensor, hyper: &NormHyper) -> Result<Tensor, TensorError> {
        self.embed_side(&self.image, feats, hyper)
    }

    /// Embed text-side features in inference mode.
    pub fn embed_texts(&self, feats: &Tensor, hyper: &NormHyper) -> Result<Tensor, TensorError> {
        self.embed_side(&self.text, feats, hyper)
    }

    fn embed_side(
        &self,
        params: &BranchParams,
        feats: &Tensor,
        hyper: &NormHyper,
    ) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let nodes = BranchNodes::bind(params, &mut tape);
        let x = tape.leaf(feats.clone());
        let fwd = branch_forward(
            &mut tape,
            params,
            &nodes,
            x,
            self.nonlinear,
            Mode::Infer,
            &mut None,
            hyper,
        )?;
        Ok(tape.value(fwd.output).clone())
    }

    /// Row-wise distances between image and text features in inference mode.
    pub fn distances(
        &self,
        image_feats: &Tensor,
        text_feats: &Tensor,
        hyper: &NormHyper,
    ) -> Result<Tensor, TensorError> {
        if image_feats.rows() != text_feats.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "embed_distance",
                left: image_feats.shape_string(),
                right: text_feats.shape_string(),
            });
        }
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape);
        let x = tape.leaf(image_feats.clone());
        let y = tape.leaf(text_feats.clone());
        let fwd = embedding_forward(
            &mut tape,
            self,
            &nodes,
            x,
            y,
            Mode::Infer,
            &mut None,
            hyper,
        )?;
        let d = tape.row_distance(fwd.image_output, fwd.text_output)?;
        Ok(tape.value(d).clone())
    }
}

/// Forward output for both embedding branches on one tape.
pub struct EmbeddingForward {
    pub image_output: NodeId,
    pub text_output: NodeId,
    pub image_bn: Option<(Tensor, Tensor)>,
    pub text_bn: Option<(Tensor, Tensor)>,
}

/// Run both embedding branches on a shared tape. Dropout draws are consumed
/// image branch first, then text branch, from the one stream.
#[allow(clippy::too_many_arguments)]
pub fn embedding_forward(
    tape: &mut Tape,
    model: &EmbeddingModel,
    nodes: &EmbeddingNodes,
    image_feats: NodeId,
    text_feats: NodeId,
    mode: Mode,
    dropout: &mut Option<DropoutCtx<'_>>,
    hyper: &NormHyper,
) -> Result<EmbeddingForward, TensorError> {
    let fx = branch_forward(
        tape,
        &model.image,
        &nodes.image,
        image_feats,
        model.nonlinear,
        mode,
        dropout,
        hyper,
    )?;
    let fy = branch_forward(
        tape,
        &model.text,
        &nodes.text,
        text_feats,
        model.nonlinear,
        mode,
        dropout,
        hyper,
    )?;
    Ok(EmbeddingForward {
        image_output: fx.output,
        text_output: fy.output,
        image_bn: fx.bn_update,
        text_bn: fy.bn_update,
    })
}

/// Layer sizes of the similarity network: two branches plus a fusion head of
/// three FC layers ending in a scalar.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityDims {
    pub image: BranchDims,
    pub text: BranchDims,
    /// Hidden widths of the head; the final layer to a scalar is implied.
    pub head_hidden: Vec<usize>,
}

impl SimilarityDims {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.image.embed != self.text.embed {
            return Err(TensorError::ShapeMismatch {
                op: "similarity_dims",
                left: format!("image embed {}", self.image.embed),
                right: format!("text embed {}", self.text.embed),
            });
        }
        Ok(())
    }

    /// Full head layer sizes: embed -> hidden... -> 1.
    pub fn head_layers(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.image.embed];
        sizes.extend(&self.head_hidden);
        sizes.push(1);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// The similarity network: element-wise product fusion followed by FC+ReLU
/// layers and a raw scalar score (the logistic loss consumes the raw score;
/// sigmoid is only a view).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityModel {
    pub image: BranchParams,
    pub text: BranchParams,
    pub head: Vec<Linear>,
    pub nonlinear: bool,
}

/// Tape handles for the similarity network.
pub struct SimilarityNodes {
    pub image: BranchNodes,
    pub text: BranchNodes,
    pub head: Vec<(NodeId, NodeId)>,
}

impl SimilarityModel {
    pub fn init(dims: SimilarityDims, nonlinear: bool, seed: u64) -> Result<Self, TensorError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = BranchParams::init(dims.image, &mut rng);
        let text = BranchParams::init(dims.text, &mut rng);
        let head = dims
            .head_layers()
            .into_iter()
            .map(|(i, o)| Linear::init(i, o, &mut rng))
            .collect();
        Ok(SimilarityModel {
            image,
            text,
            head,
            nonlinear,
        })
    }

    pub fn dims(&self) -> SimilarityDims {
        SimilarityDims {
            image: self.image.dims(),
            text: self.text.dims(),
            head_hidden: self.head[..self.head.len() - 1]
                .iter()
                .map(|l| l.weight.cols())
                .collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> SimilarityNodes {
        SimilarityNodes {
            image: BranchNodes::bind(&self.image, tape),
            text: BranchNodes::bind(&self.text, tape),
            head: self
                .head
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for side in ["image", "text"] {
            for p in [
                "fc1_weight",
                "fc1_bias",
                "fc2_weight",
                "fc2_bias",
                "bn_gamma",
                "bn_beta",
            ] {
                names.push(format!("{side}.{p}"));
            }
        }
        for i in 0..self.head.len() {
            names.push(format!("head.{i}.weight"));
            names.push(format!("head.{i}.bias"));
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.image.trainable().to_vec();
        v.extend(self.text.trainable());
        for l in &self.head {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.image.trainable_mut().into_iter().collect();
        v.extend(self.text.trainable_mut());
        for l in &mut self.head {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }

    /// Scores for aligned feature rows in inference mode.
    pub fn scores(
        &self,
        image_feats: &Tensor,
        text_feats: &Tensor,
        hyper: &NormHyper,
    ) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape);
        let x = tape.leaf(image_feats.clone());
        let y = tape.leaf(text_feats.clone());
        let fwd = similarity_forward(
            &mut tape,
            self,
            &nodes,
            x,
            y,
            Mode::Infer,
            &mut None,
            hyper,
        )?;
        Ok(tape.value(fwd.scores).clone())
    }
}

/// Forward output of the similarity network on one tape.
pub struct SimilarityForward {
    pub scores: NodeId,
    pub image_bn: Option<(Tensor, Tensor)>,
    pub text_bn: Option<(Tensor, Tensor)>,
}

/// Run the similarity network: both branches, element-wise product, then the
/// FC head with ReLU between layers and none after the last.
#[allow(clippy::too_many_arguments)]
pub fn similarity_forward(
    tape: &mut Tape,
    model: &SimilarityModel,
    nodes: &SimilarityNodes,
    image_feats: NodeId,
    text_feats: NodeId,
    mode: Mode,
    dropout: &mut Option<DropoutCtx<'_>>,
    hyper: &NormHyper,
) -> Result<SimilarityForward, TensorError> {
    if tape.value(image_feats).rows() != tape.value(text_feats).rows() {
        return Err(TensorError::ShapeMismatch {
            op: "similarity_score",
            left: tape.value(image_feats).shape_string(),
            right: tape.value(text_feats).shape_string(),
        });
    }
    let fx = branch_forward(
        tape,
        &model.image,
        &nodes.image,
        image_feats,
        model.nonlinear,
        mode,
        dropout,
        hyper,
    )?;
    let fy = branch_forward(
        tape,
        &model.text,
        &nodes.text,
        text_feats,
        model.nonlinear,
        mode,
        dropout,
        hyper,
    )?;
    let mut h = tape.mul(fx.output, fy.output)?;
    let last = nodes.head.len() - 1;
    for (i, (w, b)) in nodes.head.iter().enumerate() {
        h = tape.matmul(h, *w)?;
        h = tape.add_row(h, *b)?;
        if i < last {
            h = tape.relu(h);
            h = apply_dropout(tape, h, mode, dropout)?;
        }
    }
    let scores = tape.flatten(h)?;
    Ok(SimilarityForward {
        scores,
        image_bn: fx.bn_update,
        text_bn: fy.bn_update,
    })
}

/// Either network, as stored in checkpoints and driven by the trainer.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Embedding(EmbeddingModel),
    Similarity(SimilarityModel),
}

impl Model {
    pub fn kind(&self) -> NetworkKind {
        match self {
            Model::Embedding(_) => NetworkKind::Embedding,
            Model::Similarity(_) => NetworkKind::Similarity,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            Model::Embedding(m) => m.param_names(),
            Model::Similarity(m) => m.param_names(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Model::Embedding(m) => m.params(),
            Model::Similarity(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Embedding(m) => m.params_mut(),
            Model::Similarity(m) => m.params_mut(),
        }
    }

    pub fn as_embedding(&self) -> Option<&EmbeddingModel> {
        match self {
            Model::Embedding(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_similarity(&self) -> Option<&SimilarityModel> {
        match self {
            Model::Similarity(m) => Some(m),
            _ => None,
        }
    }
}

/// Sigmoid view of a raw similarity score.
pub fn score_probability(p: f64) -> f64 {
    if p >= 0.0 {
        1.0 / (1.0 + (-p).exp())
    } else {
        let e = p.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::row_distance;

    fn hyper() -> NormHyper {
        NormHyper::default()
    }

    fn small_dims() -> EmbeddingDims {
        EmbeddingDims {
            image: BranchDims {
                input: 6,
                hidden: 5,
                embed: 4,
            },
            text: BranchDims {
                input: 7,
                hidden: 5,
                embed: 4,
            },
        }
    }

    #[test]
    fn init_is_deterministic_given_seed() {
        let m1 = EmbeddingModel::init(small_dims(), true, 42).unwrap();
        let m2 = EmbeddingModel::init(small_dims(), true, 42).unwrap();
        assert_eq!(m1, m2);
        let m3 = EmbeddingModel::init(small_dims(), true, 43).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn init_gamma_ones_biases_zero() {
        let m = EmbeddingModel::init(small_dims(), true, 1).unwrap();
        assert!(m.image.norm.gamma.data().iter().all(|v| *v == 1.0));
        assert!(m.image.norm.beta.data().iter().all(|v| *v == 0.0));
        assert!(m.image.fc1.bias.data().iter().all(|v| *v == 0.0));
        assert!(m.text.fc2.bias.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_weight_variance_matches_fan_based_bound() {
        // Uniform(-a, a) with a^2 = 6/(fi+fo) has variance 2/(fi+fo).
        let dims = EmbeddingDims {
            image: BranchDims {
                input: 4096,
                hidden: 1024,
                embed: 16,
            },
            text: BranchDims {
                input: 64,
                hidden: 32,
                embed: 16,
            },
        };
        let m = EmbeddingModel::init(dims, true, 7).unwrap();
        let w = &m.image.fc1.weight;
        let n = w.len() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / (4096.0 + 1024.0);
        assert!(
            (var - expected).abs() < 0.2 * expected,
            "variance {var} vs expected {expected}"
        );
    }

    #[test]
    fn mismatched_embed_dims_rejected() {
        let mut dims = small_dims();
        dims.text.embed = 3;
        assert!(EmbeddingModel::init(dims, true, 1).is_err());
    }

    #[test]
    fn branch_outputs_are_unit_norm_both_modes() {
        let m = EmbeddingModel::init(small_dims(), true, 5).unwrap();
        let x = Tensor::matrix(3, 6, (0..18).map(|i| i as f64 * 0.3 - 2.0).collect()).unwrap();
        let emb = m.embed_images(&x, &hyper()).unwrap();
        for i in 0..emb.rows() {
            let norm: f64 = emb.row(i).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "row {i} norm {norm}");
        }
    }

    #[test]
    fn linear_branch_with_identity_weights_is_l2_normalize() {
        let dims = BranchDims {
            input: 3,
            hidden: 3,
            embed: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = BranchParams::init(dims, &mut rng);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        params.fc1.weight = Tensor::matrix(3, 3, eye).unwrap();
        params.fc1.bias = Tensor::zeros(vec![3]);
        let model = EmbeddingModel {
            image: params.clone(),
            text: params,
            nonlinear: false,
        };
        let x = Tensor::matrix(1, 3, vec![3.0, 4.0, 0.0]).unwrap();
        let emb = model.embed_images(&x, &hyper()).unwrap();
        let row = emb.row(0).unwrap();
        assert!((row[0] - 0.6).abs() < 1e-12);
        assert!((row[1] - 0.8).abs() < 1e-12);
        assert!(row[2].abs() < 1e-12);
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let m = EmbeddingModel::init(small_dims(), true, 5).unwrap();
        let x = Tensor::matrix(4, 6, (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        let a = m.embed_images(&x, &hyper()).unwrap();
        let b = m.embed_images(&x, &hyper()).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn distance_zero_for_identical_and_sqrt2_for_orthogonal() {
        // Distances between unit vectors: identical rows give 0, orthogonal
        // rows give sqrt(2).
        let e1 = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let e2 = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(row_distance(&e1, 0, &e2, 0), 0.0);
        let d = row_distance(&e1, 1, &e2, 1);
        assert!((d - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn unit_sphere_distance_cosine_identity() {
        // On the unit sphere, d^2 + 2 cos = 2. A wide hidden layer keeps
        // every ReLU row alive so no embedding collapses to zero.
        let dims = EmbeddingDims {
            image: BranchDims {
                input: 6,
                hidden: 24,
                embed: 4,
            },
            text: BranchDims {
                input: 7,
                hidden: 24,
                embed: 4,
            },
        };
        let m = EmbeddingModel::init(dims, true, 9).unwrap();
        let x = Tensor::matrix(5, 6, (0..30).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let y = Tensor::matrix(5, 7, (0..35).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let d = m.distances(&x, &y, &hyper()).unwrap();
        let ex = m.embed_images(&x, &hyper()).unwrap();
        let ey = m.embed_texts(&y, &hyper()).unwrap();
        for i in 0..5 {
            let norm: f64 = ey.row(i).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "text row {i} died: norm {norm}");
            let cos: f64 = ex
                .row(i)
                .unwrap()
                .iter()
                .zip(ey.row(i).unwrap())
                .map(|(a, b)| a * b)
                .sum();
            let lhs = d.data()[i] * d.data()[i] + 2.0 * cos;
            assert!((lhs - 2.0).abs() < 1e-9, "row {i}: {lhs}");
        }
    }

    #[test]
    fn distance_row_count_mismatch_errors() {
        let m = EmbeddingModel::init(small_dims(), true, 9).unwrap();
        let x = Tensor::matrix(2, 6, vec![0.1; 12]).unwrap();
        let y = Tensor::matrix(3, 7, vec![0.1; 21]).unwrap();
        assert!(m.distances(&x, &y, &hyper()).is_err());
    }

    fn small_sim() -> SimilarityModel {
        let dims = SimilarityDims {
            image: BranchDims {
                input: 6,
                hidden: 5,
                embed: 4,
            },
            text: BranchDims {
                input: 7,
                hidden: 5,
                embed: 4,
            },
            head_hidden: vec![4, 3],
        };
        SimilarityModel::init(dims, true, 13).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_scores() {
        let mut m = small_sim();
        for l in &mut m.head {
            m.image.fc1.bias = m.image.fc1.bias.clone();
            l.weight = Tensor::zeros(l.weight.shape().to_vec());
            l.bias = Tensor::zeros(l.bias.shape().to_vec());
        }
        let x = Tensor::matrix(3, 6, vec![0.5; 18]).unwrap();
        let y = Tensor::matrix(3, 7, vec![0.25; 21]).unwrap();
        let scores = m.scores(&x, &y, &hyper()).unwrap();
        assert!(scores.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn infer_scores_independent_of_batch_composition() {
        let m = small_sim();
        let x3 = Tensor::matrix(3, 6, (0..18).map(|i| (i as f64 * 0.31).sin()).collect()).unwrap();
        let y3 = Tensor::matrix(3, 7, (0..21).map(|i| (i as f64 * 0.17).cos()).collect()).unwrap();
        let all = m.scores(&x3, &y3, &hyper()).unwrap();
        // Score row 1 alone: identical bits.
        let x1 = Tensor::from_rows(&[x3.row(1).unwrap().to_vec()]).unwrap();
        let y1 = Tensor::from_rows(&[y3.row(1).unwrap().to_vec()]).unwrap();
        let alone = m.scores(&x1, &y1, &hyper()).unwrap();
        assert_eq!(alone.data()[0].to_bits(), all.data()[1].to_bits());
        // Swapping two rows jointly permutes the scores.
        let xs = Tensor::from_rows(&[
            x3.row(1).unwrap().to_vec(),
            x3.row(0).unwrap().to_vec(),
            x3.row(2).unwrap().to_vec(),
        ])
        .unwrap();
        let ys = Tensor::from_rows(&[
            y3.row(1).unwrap().to_vec(),
            y3.row(0).unwrap().to_vec(),
            y3.row(2).unwrap().to_vec(),
        ])
        .unwrap();
        let swapped = m.scores(&xs, &ys, &hyper()).unwrap();
        assert_eq!(swapped.data()[0].to_bits(), all.data()[1].to_bits());
        assert_eq!(swapped.data()[1].to_bits(), all.data()[0].to_bits());
    }

    #[test]
    fn score_probability_is_sigmoid() {
        assert!((score_probability(0.0) - 0.5).abs() < 1e-15);
        assert!(score_probability(50.0) > 1.0 - 1e-15);
        assert!(score_probability(-50.0) < 1e-15);
    }
}
