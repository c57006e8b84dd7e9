//! Optimizer, schedule, augmentation and the training protocols.

mod augment;
mod fewshot;
mod finetune;
mod optim;
mod pretrain;
mod schedule;

pub use augment::{augment, augment_with};
pub use fewshot::{few_shot_eval, FewShotResult, FEW_SHOT_TEST_PER_CLASS};
pub use finetune::{
    evaluate_accuracy, finetune_classify, train_head_on_features, Classifier, ClassifierHead, FinetuneOutcome,
    HeadConfig,
};
pub use optim::{adamw_step, OptimState};
pub use pretrain::{pretrain_run, PretrainOutcome};
pub use schedule::{lr_at, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::geometry::{build_scale_pyramid, mask_and_backproject, MaskPlan, PointCloud, ScalePyramid};

/// One row of a training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Rows in step order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

/// Mixes run seed and coordinates into an independent stream seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce5_e4b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

pub(crate) fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Normalize, truncate to the configured length and build the pyramid.
pub fn prepare_pyramid(cloud: &PointCloud, cfg: &BackboneConfig) -> Result<ScalePyramid> {
    let c = cloud.truncated(cfg.n_points).normalized();
    build_scale_pyramid(&c, &cfg.sizes, &cfg.ks)
}

/// Pyramid plus mask for one pretraining sample.
pub fn prepare_masked(cloud: &PointCloud, cfg: &BackboneConfig, mask_seed: u64) -> Result<(ScalePyramid, MaskPlan)> {
    let pyramid = prepare_pyramid(cloud, cfg)?;
    let plan = mask_and_backproject(&pyramid, cfg.mask_ratio, mask_seed)?;
    Ok((pyramid, plan))
}

/// Runs `f` on every item (in parallel) and sums the returned gradient
/// buffers in item order, so the result does not depend on scheduling.
pub(crate) fn ordered_grad_sum<T, F>(items: &[T], n_params: usize, f: F) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    T: Sync,
    F: Fn(&T) -> Result<(f64, Vec<Vec<f64>>)> + Sync,
{
    use rayon::prelude::*;
    let chunk = rayon::current_num_threads().max(1);
    let mut losses = Vec::with_capacity(items.len());
    let mut total: Option<Vec<Vec<f64>>> = None;
    for group in items.chunks(chunk) {
        let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = group.par_iter().map(&f).collect();
        for r in results {
            let (loss, grads) = r?;
            debug_assert_eq!(grads.len(), n_params);
            losses.push(loss);
            match &mut total {
                None => total = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
        }
    }
    Ok((losses, total.unwrap_or_default()))
}

pub(crate) fn scale_grads(grads: &mut [Vec<f64>], s: f64) {
    for g in grads.iter_mut().flatten() {
        *g *= s;
    }
}
