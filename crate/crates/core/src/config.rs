//! Run configuration: a TOML file covering every tunable knob, with
//! per-task defaults. Unknown keys are rejected. A file overlays the task
//! defaults key by key, so partial configs stay valid.

use crate::branches::{BranchDims, EmbeddingDims, NormHyper, SimilarityDims};
use crate::dataset::TaskKind;
use crate::error::ConfigError;
use crate::geometry::RegionLabeling;
use crate::losses::LossWeights;
use crate::optim::{AdamHyper, TrainOptions, TrainSchedule};
use crate::sampling::SamplerOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_input_dim: usize,
    pub text_input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Hidden widths of the similarity head; the final scalar layer is implied.
    pub head_dims: Vec<usize>,
    pub nonlinear: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda_x2y: f64,
    pub lambda_y2x: f64,
    /// Within-image weight, active from the activation epoch on.
    pub lambda_xx: f64,
    /// Within-text weight, active from the activation epoch on.
    pub lambda_yy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Epoch at which neighborhood terms activate; omit to keep them off.
    pub neighborhood_activation_epoch: Option<usize>,
    pub dropout: f64,
    /// Global-norm gradient clip; omit for no clipping.
    pub gradient_clip: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub shard_size: usize,
    pub k_cap: usize,
    pub augment: bool,
    pub neighborhood_sampling: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelingConfig {
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub eval_iou: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsConfig {
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub l2_eps: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Candidate pool cap for localization.
    pub max_proposals: usize,
    /// Weight of the region-phrase distance in the combined protocol.
    pub alpha: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub labeling: LabelingConfig,
    pub numerics: NumericsConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Region-phrase defaults: bi-directional weights 1/4, neighborhood
    /// weights 0.1 activating after epoch 8, Adam at 0.001, shard size 100,
    /// K = 30, no dropout.
    pub fn localization() -> Self {
        Config {
            model: ModelConfig {
                image_input_dim: 4096,
                text_input_dim: 6000,
                hidden_dim: 1024,
                embed_dim: 512,
                head_dims: vec![512, 256],
                nonlinear: true,
            },
            loss: LossConfig {
                margin: 0.05,
                lambda_x2y: 1.0,
                lambda_y2x: 4.0,
                lambda_xx: 0.1,
                lambda_yy: 0.1,
            },
            train: TrainConfig {
                learning_rate: 0.001,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                epochs: 10,
                neighborhood_activation_epoch: Some(8),
                dropout: 0.0,
                gradient_clip: None,
            },
            sampling: SamplingConfig {
                shard_size: 100,
                k_cap: 30,
                augment: true,
                neighborhood_sampling: true,
            },
            labeling: LabelingConfig {
                positive_iou: 0.7,
                negative_iou: 0.3,
                eval_iou: 0.5,
            },
            numerics: NumericsConfig {
                bn_eps: 1e-5,
                bn_momentum: 0.9,
                l2_eps: 1e-12,
            },
            eval: EvalConfig {
                max_proposals: 200,
                alpha: 0.3,
            },
        }
    }

    /// Image-sentence defaults: bi-directional weights 1/1.5, text-side
    /// neighborhood weight 0.05, Adam at 0.0001, shard size 500, K = 10,
    /// dropout 0.5.
    pub fn retrieval() -> Self {
        let mut c = Config::localization();
        c.loss.lambda_y2x = 1.5;
        c.loss.lambda_xx = 0.0;
        c.loss.lambda_yy = 0.05;
        c.train.learning_rate = 0.0001;
        c.train.dropout = 0.5;
        c.sampling.shard_size = 500;
        c.sampling.k_cap = 10;
        c
    }

    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Localization => Config::localization(),
            TaskKind::Retrieval => Config::retrieval(),
        }
    }

    /// Load a config file over the task defaults. Keys present in the file
    /// replace defaults; unknown keys are rejected.
    pub fn load(path: &Path, task: TaskKind) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let overlay: toml::Value = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let defaults =
            toml::Value::try_from(Config::for_task(task)).expect("defaults serialize");
        let merged = merge_toml(defaults, overlay);
        merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |reason: String| Err(ConfigError::Invalid(reason));
        if self.model.embed_dim == 0 || self.model.hidden_dim == 0 {
            return invalid("model dims must be positive".into());
        }
        if self.loss.margin < 0.0 {
            return invalid(format!("margin must be nonnegative, got {}", self.loss.margin));
        }
        let weights = self.loss_weights();
        weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..1.0).contains(&self.train.dropout) {
            return invalid(format!("dropout must be in [0, 1), got {}", self.train.dropout));
        }
        let l = self.region_labeling();
        l.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.sampling.shard_size == 0 || self.sampling.k_cap == 0 {
            return invalid("shard_size and k_cap must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.eval.alpha) {
            return invalid(format!("alpha must be in [0, 1], got {}", self.eval.alpha));
        }
        Ok(())
    }

    /// Canonical serialization used for hashing, persisted in checkpoints.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_toml().as_bytes()))
    }

    pub fn embedding_dims(&self) -> EmbeddingDims {
        EmbeddingDims {
            image: BranchDims {
                input: self.model.image_input_dim,
                hidden: self.model.hidden_dim,
                embed: self.model.embed_dim,
            },
            text: BranchDims {
                input: self.model.text_input_dim,
                hidden: self.model.hidden_dim,
                embed: self.model.embed_dim,
            },
        }
    }

    pub fn similarity_dims(&self) -> SimilarityDims {
        let e = self.embedding_dims();
        SimilarityDims {
            image: e.image,
            text: e.text,
            head_hidden: self.model.head_dims.clone(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            margin: self.loss.margin,
            x2y: self.loss.lambda_x2y,
            y2x: self.loss.lambda_y2x,
            xx: self.loss.lambda_xx,
            yy: self.loss.lambda_yy,
        }
    }

    pub fn region_labeling(&self) -> RegionLabeling {
        RegionLabeling {
            positive_threshold: self.labeling.positive_iou,
            negative_threshold: self.labeling.negative_iou,
            eval_threshold: self.labeling.eval_iou,
        }
    }

    pub fn norm_hyper(&self) -> NormHyper {
        NormHyper {
            bn_eps: self.numerics.bn_eps,
            bn_momentum: self.numerics.bn_momentum,
            l2_eps: self.numerics.l2_eps,
        }
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.train.learning_rate,
            beta1: self.train.adam_beta1,
            beta2: self.train.adam_beta2,
            eps: self.train.adam_eps,
        }
    }

    pub fn sampler_options(&self) -> SamplerOptions {
        SamplerOptions {
            shard_size: self.sampling.shard_size,
            k_cap: self.sampling.k_cap,
            margin: self.loss.margin,
            augment: self.sampling.augment,
            neighborhood_sampling: self.sampling.neighborhood_sampling,
            emit_neighborhood_terms: false,
            mine_x2y: self.loss.lambda_x2y > 0.0,
            mine_y2x: self.loss.lambda_y2x > 0.0,
            labeling: self.region_labeling(),
        }
    }

    /// Full train options for a seed. The weighted schedule starts without
    /// neighborhood terms and switches to the configured weights at the
    /// activation epoch. With zero neighborhood weights the activation epoch
    /// is moot and drops out.
    pub fn train_options(&self, seed: u64) -> TrainOptions {
        let weights = self.loss_weights();
        let schedule = TrainSchedule {
            total_epochs: self.train.epochs,
            neighborhood_activation_epoch: if weights.has_neighborhood() {
                self.train.neighborhood_activation_epoch
            } else {
                None
            },
            weights_before: weights.without_neighborhood(),
            weights_after: weights,
            seed,
            dropout_rate: self.train.dropout,
        };
        TrainOptions {
            schedule,
            adam: self.adam_hyper(),
            sampler: self.sampler_options(),
            hyper: self.norm_hyper(),
            gradient_clip: self.train.gradient_clip,
            metrics_path: None,
            checkpoint_dir: None,
            config_hash: self.hash(),
        }
    }
}

fn merge_toml(base: toml::Value, overlay: toml::Value) -> toml::Value {
    match (base, overlay) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(existing) => merge_toml(existing, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}
