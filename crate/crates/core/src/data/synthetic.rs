//! Synthetic planted-correspondence data. Each item owns a latent vector;
//! image and text features are fixed random full-rank linear maps of it plus
//! noise. For localization, proposal features are corrupted toward a
//! per-proposal distractor latent by an amount growing with (1 - IoU), so
//! scores can learn localization quality, not just semantic correspondence.

use crate::dataset::{GroundedDataset, ImageEntry, PhraseEntry, Proposal, SentenceEntry};
use crate::error::DataError;
use crate::geometry::{iou, BBox};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub items: usize,
    pub latent_dim: usize,
    pub image_feature_dim: usize,
    pub text_feature_dim: usize,
    pub texts_per_item: usize,
    pub proposals_per_item: usize,
    pub noise_scale: f64,
    /// How strongly (1 - IoU) pulls a proposal's feature toward its
    /// distractor latent; 1.0 makes the mix weight equal the IoU.
    pub corruption_scale: f64,
    pub canvas_size: f64,
    /// Include the exact ground-truth box among the proposals. Training
    /// needs it; held-out splits are more realistic without it.
    pub include_gt_proposal: bool,
    pub seed: u64,
    /// Seed for the feature maps alone. Splits of one corpus share it so
    /// their planted correspondences coincide; derived from `seed` when
    /// absent.
    pub map_seed: Option<u64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            items: 600,
            latent_dim: 16,
            image_feature_dim: 64,
            text_feature_dim: 48,
            texts_per_item: 5,
            proposals_per_item: 20,
            noise_scale: 0.05,
            corruption_scale: 1.0,
            canvas_size: 100.0,
            include_gt_proposal: true,
            seed: 7,
            map_seed: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.items == 0 || self.texts_per_item == 0 {
            return Err(DataError::BadSyntheticSpec(
                "items and texts_per_item must be positive".into(),
            ));
        }
        if self.latent_dim == 0
            || self.latent_dim > self.image_feature_dim.min(self.text_feature_dim)
        {
            return Err(DataError::BadSyntheticSpec(format!(
                "latent_dim {} must be in 1..=min(feature dims)",
                self.latent_dim
            )));
        }
        if self.proposals_per_item < 4 {
            return Err(DataError::BadSyntheticSpec(
                "proposals_per_item must be at least 4".into(),
            ));
        }
        if self.noise_scale < 0.0 || self.corruption_scale < 0.0 {
            return Err(DataError::BadSyntheticSpec(
                "noise_scale and corruption_scale must be nonnegative".into(),
            ));
        }
        if self.canvas_size <= 0.0 {
            return Err(DataError::BadSyntheticSpec(
                "canvas_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random full-rank map stored row-per-latent, scaled so outputs stay O(1).
fn random_map(rng: &mut ChaCha8Rng, latent: usize, out_dim: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / (latent as f64).sqrt();
    (0..latent)
        .map(|_| {
            (0..out_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect()
        })
        .collect()
}

fn apply_map(map: &[Vec<f64>], z: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let out_dim = map[0].len();
    let mut out = vec![0.0; out_dim];
    for (zl, row) in z.iter().zip(map.iter()) {
        for (o, m) in out.iter_mut().zip(row.iter()) {
            *o += zl * m;
        }
    }
    if noise > 0.0 {
        for o in out.iter_mut() {
            *o += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

fn mix_latents(z: &[f64], distractor: &[f64], weight: f64) -> Vec<f64> {
    z.iter()
        .zip(distractor.iter())
        .map(|(a, b)| weight * a + (1.0 - weight) * b)
        .collect()
}

/// Shifted copy of the ground-truth box, clamped to the canvas. The shift
/// fractions bound the IoU: up to 0.07 keeps IoU above 0.7, and a range
/// around 0.2 lands in the mid band.
fn shifted_box(gt: &BBox, fx: f64, fy: f64, canvas: f64) -> BBox {
    let w = gt.x_max - gt.x_min;
    let h = gt.y_max - gt.y_min;
    let dx = (fx * w).clamp(-gt.x_min, canvas - gt.x_max);
    let dy = (fy * h).clamp(-gt.y_min, canvas - gt.y_max);
    BBox::new(gt.x_min + dx, gt.y_min + dy, gt.x_max + dx, gt.y_max + dy).expect("shift keeps order")
}

/// A box guaranteed disjoint from the ground truth: placed on the roomier
/// side along x, separated axis-wise.
fn disjoint_box(gt: &BBox, canvas: f64, rng: &mut ChaCha8Rng) -> BBox {
    let w = canvas * rng.gen_range(0.08..0.18);
    let h = canvas * rng.gen_range(0.08..0.18);
    let room_left = gt.x_min;
    let room_right = canvas - gt.x_max;
    let (x0_lo, x0_hi) = if room_left >= room_right {
        (0.0, (room_left - w).max(0.0))
    } else {
        (gt.x_max, (canvas - w).max(gt.x_max))
    };
    let x0 = if x0_hi > x0_lo {
        rng.gen_range(x0_lo..x0_hi)
    } else {
        x0_lo
    };
    let y0_max = (canvas - h).max(0.0);
    let y0 = if y0_max > 0.0 {
        rng.gen_range(0.0..y0_max)
    } else {
        0.0
    };
    BBox::new(x0, y0, x0 + w, y0 + h).expect("positive extent")
}

/// Generate one dataset. Bit-identical for the same spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<GroundedDataset, DataError> {
    spec.validate()?;
    let mut map_rng =
        ChaCha8Rng::seed_from_u64(spec.map_seed.unwrap_or(crate::optim::mix_seed(spec.seed, 0, 0x3A9)));
    let image_map = random_map(&mut map_rng, spec.latent_dim, spec.image_feature_dim);
    let text_map = random_map(&mut map_rng, spec.latent_dim, spec.text_feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let canvas = spec.canvas_size;

    let mut images = Vec::with_capacity(spec.items);
    let mut phrases = Vec::with_capacity(spec.items * spec.texts_per_item);
    let mut sentences = Vec::with_capacity(spec.items * spec.texts_per_item);

    for item in 0..spec.items {
        let item_id = item as u32;
        let z = normal_vec(&mut rng, spec.latent_dim);
        let global_feature = apply_map(&image_map, &z, spec.noise_scale, &mut rng);

        let w = canvas * rng.gen_range(0.15..0.4);
        let h = canvas * rng.gen_range(0.15..0.4);
        let x0 = rng.gen_range(0.0..(canvas - w));
        let y0 = rng.gen_range(0.0..(canvas - h));
        let gt_box = BBox::new(x0, y0, x0 + w, y0 + h).expect("inside canvas");

        let mut boxes = Vec::with_capacity(spec.proposals_per_item);
        if spec.include_gt_proposal {
            boxes.push(gt_box);
        }
        let remaining = spec.proposals_per_item - boxes.len();
        let n_near = (remaining / 4).max(1);
        let n_mid = remaining / 4;
        let n_neg = remaining - n_near - n_mid;
        for _ in 0..n_near {
            let fx = rng.gen_range(-0.07..0.07);
            let fy = rng.gen_range(-0.07..0.07);
            boxes.push(shifted_box(&gt_box, fx, fy, canvas));
        }
        for _ in 0..n_mid {
            let sign = |rng: &mut ChaCha8Rng| if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let fx = sign(&mut rng) * rng.gen_range(0.15..0.3);
            let fy = sign(&mut rng) * rng.gen_range(0.15..0.3);
            boxes.push(shifted_box(&gt_box, fx, fy, canvas));
        }
        for _ in 0..n_neg {
            boxes.push(disjoint_box(&gt_box, canvas, &mut rng));
        }

        let proposals = boxes
            .into_iter()
            .map(|bbox| {
                let v = iou(&bbox, &gt_box);
                let weight = (1.0 - spec.corruption_scale * (1.0 - v)).clamp(0.0, 1.0);
                let distractor = normal_vec(&mut rng, spec.latent_dim);
                let z_prop = mix_latents(&z, &distractor, weight);
                Proposal {
                    bbox,
                    feature: apply_map(&image_map, &z_prop, spec.noise_scale, &mut rng),
                }
            })
            .collect();

        let mut sentence_ids = Vec::with_capacity(spec.texts_per_item);
        for t in 0..spec.texts_per_item {
            let text_id = (item * spec.texts_per_item + t) as u32;
            sentence_ids.push(text_id);
            sentences.push(SentenceEntry {
                id: text_id,
                image: item_id,
                feature: apply_map(&text_map, &z, spec.noise_scale, &mut rng),
            });
            phrases.push(PhraseEntry {
                id: text_id,
                image: item_id,
                feature: apply_map(&text_map, &z, spec.noise_scale, &mut rng),
                gt_box,
                chain: item_id,
            });
        }

        images.push(ImageEntry {
            id: item_id,
            global_feature,
            proposals,
            sentences: sentence_ids,
        });
    }

    Ok(GroundedDataset::build(images, phrases, sentences)?)
}

/// Item counts for the three splits.
#[derive(Clone, Copy, Debug)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 600,
            val: 100,
            test: 100,
        }
    }
}

/// Generate train/val/test datasets from one spec. Splits draw independent
/// latents via distinct derived seeds; held-out splits omit the exact
/// ground-truth proposal.
pub fn generate_split_datasets(
    spec: &SyntheticSpec,
    counts: &SplitCounts,
) -> Result<(GroundedDataset, GroundedDataset, GroundedDataset), DataError> {
    let map_seed = spec
        .map_seed
        .unwrap_or(crate::optim::mix_seed(spec.seed, 0, 0x3A9));
    let make = |items: usize, salt: u64, include_gt: bool| -> Result<GroundedDataset, DataError> {
        let split_spec = SyntheticSpec {
            items,
            include_gt_proposal: include_gt,
            seed: crate::optim::mix_seed(spec.seed, salt, 0xDA7A),
            map_seed: Some(map_seed),
            ..*spec
        };
        generate_synthetic(&split_spec)
    };
    Ok((
        make(counts.train, 1, spec.include_gt_proposal)?,
        make(counts.val, 2, false)?,
        make(counts.test, 3, false)?,
    ))
}
