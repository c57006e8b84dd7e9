use std::path::Path;

use rand::seq::SliceRandom;

use super::optim::{adamw_step, OptimState};
use super::schedule::{lr_at, TrainConfig};
use super::{augment, derive_seed, ordered_grad_sum, prepare_masked, rng_for, scale_grads, LogRow, RunLog};
use crate::backbone::{BackboneConfig, MaskedAutoencoder};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::io::Checkpoint;
use crate::params::ParamSet;
use crate::tensor::Tape;

#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: MaskedAutoencoder,
    pub params: ParamSet,
    pub optim: OptimState,
    pub log: RunLog,
    pub steps: usize,
}

/// Stream tags for [`derive_seed`].
const INIT: u64 = 0;
const SHUFFLE: u64 = 1;
const AUGMENT: u64 = 2;
const MASK: u64 = 3;

/// Self-supervised masked reconstruction training.
///
/// Per sample: augment, normalize, build the pyramid, mask, encode, decode
/// and score the reconstruction; batch gradients are averaged and applied
/// with AdamW at the epoch's scheduled rate. When `out_dir` is given the
/// final checkpoint is written to `checkpoint.pamr`, periodic ones to
/// `epoch_<n>.pamr`, and a failing step leaves `last_good.pamr` behind.
pub fn pretrain_run(
    dataset: &[PointCloud],
    model_cfg: &BackboneConfig,
    train: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Argument("empty pretraining dataset".into()));
    }
    if model_cfg.mask_ratio <= 0.0 {
        return Err(Error::Config("pretraining needs a positive mask ratio".into()));
    }
    train.validate()?;
    let (model, mut params) = MaskedAutoencoder::new(model_cfg.clone(), derive_seed(train.seed, &[INIT]))?;
    let mut optim = OptimState::from_config(&params, train);
    let mut log = RunLog::default();
    let fingerprint = model_cfg.fingerprint();
    let n_params = params.len();
    let mut step = 0usize;

    'epochs: for epoch in 0..train.epochs {
        let lr = lr_at(epoch, train);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_for(train.seed, &[SHUFFLE, epoch as u64]));
        for batch in order.chunks(train.batch_size) {
            if train.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let current = &params;
            let result = ordered_grad_sum(batch, n_params, |&i| {
                let mut rng = rng_for(train.seed, &[AUGMENT, step as u64, i as u64]);
                let cloud = augment(&dataset[i], train, &mut rng);
                let mask_seed = if train.resample_mask {
                    derive_seed(train.seed, &[MASK, step as u64, i as u64])
                } else {
                    derive_seed(train.seed, &[MASK, i as u64])
                };
                let (pyramid, plan) = prepare_masked(&cloud, model_cfg, mask_seed)?;
                let mut tape = Tape::new();
                let loss = model.loss(&mut tape, current, &pyramid, &plan)?;
                let grads = tape.backward(loss)?;
                Ok((tape.scalar_value(loss), tape.param_grads(&grads, current)))
            });
            let outcome = result.and_then(|(losses, mut grads)| {
                scale_grads(&mut grads, 1.0 / batch.len() as f64);
                adamw_step(&mut params, &grads, &mut optim, lr)?;
                Ok(losses.iter().sum::<f64>() / losses.len() as f64)
            });
            let loss = match outcome {
                Ok(l) => l,
                Err(e) => {
                    if let Some(dir) = out_dir {
                        Checkpoint::capture(&params, fingerprint, step as u64, Some(&optim))
                            .save(&dir.join("last_good.pamr"))?;
                    }
                    return Err(e);
                }
            };
            log.rows.push(LogRow { step, epoch, lr, loss, accuracy: None });
            step += 1;
        }
        if let Some(dir) = out_dir {
            if train.checkpoint_every > 0 && (epoch + 1) % train.checkpoint_every == 0 {
                Checkpoint::capture(&params, fingerprint, step as u64, Some(&optim))
                    .save(&dir.join(format!("epoch_{}.pamr", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        Checkpoint::capture(&params, fingerprint, step as u64, Some(&optim)).save(&dir.join("checkpoint.pamr"))?;
    }
    Ok(PretrainOutcome { model, params, optim, log, steps: step })
}
