use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{adamw_step, OptimState};
use super::schedule::{lr_at, TrainConfig};
use super::{augment, derive_seed, ordered_grad_sum, prepare_pyramid, rng_for, scale_grads, LogRow, RunLog};
use crate::backbone::{BackboneConfig, Encoder};
use crate::error::{Error, Result};
use crate::geometry::{MaskPlan, PointCloud, ScalePyramid};
use crate::io::Checkpoint;
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamSet};
use crate::tensor::{PoolMode, Tape, Tensor, Var};

/// Classification head shape and whether the backbone is trained.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub hidden: usize,
    pub freeze_backbone: bool,
}

impl HeadConfig {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, hidden: 256, freeze_backbone: false }
    }
}

/// Three linear layers with GELU between them.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl ClassifierHead {
    pub fn new(b: &mut ParamBuilder, d_in: usize, cfg: &HeadConfig) -> Result<Self> {
        if cfg.num_classes < 2 || cfg.hidden == 0 {
            return Err(Error::Config("classifier needs at least two classes and a hidden width".into()));
        }
        Ok(Self {
            fc1: Linear::new(b, "cls_head.fc1", d_in, cfg.hidden)?,
            fc2: Linear::new(b, "cls_head.fc2", cfg.hidden, cfg.hidden)?,
            fc3: Linear::new(b, "cls_head.fc3", cfg.hidden, cfg.num_classes)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, params, x)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, params, h)?;
        let h = tape.gelu(h)?;
        self.fc3.forward(tape, params, h)
    }
}

/// Encoder plus head; the global feature is max and mean pooling of the
/// final-stage tokens, concatenated.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub cfg: BackboneConfig,
    pub head_cfg: HeadConfig,
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl Classifier {
    pub fn new(cfg: BackboneConfig, head_cfg: HeadConfig, seed: u64) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder { params: &mut params, rng: &mut rng };
        let encoder = Encoder::new(&mut b, &cfg)?;
        let head = ClassifierHead::new(&mut b, 2 * cfg.dims[cfg.dims.len() - 1], &head_cfg)?;
        if head_cfg.freeze_backbone {
            params.set_trainable("encoder.", false);
        }
        Ok((Self { cfg, head_cfg, encoder, head }, params))
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.cfg.dims[self.cfg.dims.len() - 1]
    }

    /// Global feature `[1, 2 C_S]`.
    pub fn features(&self, tape: &mut Tape, params: &ParamSet, pyramid: &ScalePyramid) -> Result<Var> {
        let plan = MaskPlan::unmasked(pyramid);
        let tokens = self.encoder.forward(tape, params, pyramid, &plan)?;
        let last = tokens.last().ok_or_else(|| Error::Consistency("encoder produced no stages".into()))?;
        let c = tape.shape(last.tokens)[1];
        let mx = tape.pool(last.tokens, 0, PoolMode::Max)?;
        let mx = tape.reshape(mx, &[1, c])?;
        let avg = tape.pool(last.tokens, 0, PoolMode::Avg)?;
        let avg = tape.reshape(avg, &[1, c])?;
        tape.concat_cols(&[mx, avg])
    }

    pub fn logits(&self, tape: &mut Tape, params: &ParamSet, pyramid: &ScalePyramid) -> Result<Var> {
        let f = self.features(tape, params, pyramid)?;
        self.head.forward(tape, params, f)
    }

    /// Feature vector of one cloud with the current parameters.
    pub fn embed(&self, params: &ParamSet, cloud: &PointCloud) -> Result<Vec<f64>> {
        let pyramid = prepare_pyramid(cloud, &self.cfg)?;
        let mut tape = Tape::new();
        let f = self.features(&mut tape, params, &pyramid)?;
        Ok(tape.value(f).to_vec())
    }

    pub fn predict(&self, params: &ParamSet, cloud: &PointCloud) -> Result<usize> {
        let pyramid = prepare_pyramid(cloud, &self.cfg)?;
        let mut tape = Tape::new();
        let logits = self.logits(&mut tape, params, &pyramid)?;
        Ok(argmax(tape.value(logits)))
    }

    /// Copies encoder weights out of a pretraining checkpoint.
    pub fn load_backbone(&self, params: &mut ParamSet, ckpt: &Checkpoint, allow_mismatch: bool) -> Result<usize> {
        ckpt.check_fingerprint(&self.cfg.fingerprint(), allow_mismatch)?;
        let encoder_entries =
            ckpt.entries.iter().filter(|(n, _)| n.starts_with("encoder.")).map(|(n, t)| (n.as_str(), t));
        params.load_matching(encoder_entries)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn labels_of(clouds: &[PointCloud], num_classes: usize) -> Result<Vec<usize>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| match c.label {
            Some(l) if l < num_classes => Ok(l),
            Some(l) => Err(Error::Config(format!("sample {i} has label {l} but the head has {num_classes} classes"))),
            None => Err(Error::Config(format!("sample {i} has no label"))),
        })
        .collect()
}

/// Fraction of clouds whose predicted class matches the label.
pub fn evaluate_accuracy(model: &Classifier, params: &ParamSet, clouds: &[PointCloud]) -> Result<f64> {
    use rayon::prelude::*;
    if clouds.is_empty() {
        return Err(Error::Argument("no samples to evaluate".into()));
    }
    let labels = labels_of(clouds, model.head_cfg.num_classes)?;
    let preds: Vec<usize> = clouds.par_iter().map(|c| model.predict(params, c)).collect::<Result<_>>()?;
    let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / clouds.len() as f64)
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub model: Classifier,
    pub params: ParamSet,
    pub log: RunLog,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

const INIT: u64 = 10;
const SHUFFLE: u64 = 11;
const AUGMENT: u64 = 12;

/// Supervised classification, optionally starting from a pretrained encoder.
pub fn finetune_classify(
    pretrained: Option<&Checkpoint>,
    train_set: &[PointCloud],
    test_set: &[PointCloud],
    model_cfg: &BackboneConfig,
    head_cfg: &HeadConfig,
    train: &TrainConfig,
) -> Result<FinetuneOutcome> {
    if train_set.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    train.validate()?;
    let labels = labels_of(train_set, head_cfg.num_classes)?;
    labels_of(test_set, head_cfg.num_classes)?;
    let mut cfg = model_cfg.clone();
    cfg.mask_ratio = 0.0;
    let (model, mut params) = Classifier::new(cfg, head_cfg.clone(), derive_seed(train.seed, &[INIT]))?;
    if let Some(ckpt) = pretrained {
        model.load_backbone(&mut params, ckpt, false)?;
    }

    let log = if head_cfg.freeze_backbone {
        let feats = frozen_features(&model, &params, train_set)?;
        train_head_on_features(&model, &mut params, &feats, &labels, train)?
    } else {
        train_end_to_end(&model, &mut params, train_set, &labels, train)?
    };
    let train_accuracy = evaluate_accuracy(&model, &params, train_set)?;
    let test_accuracy = if test_set.is_empty() { None } else { Some(evaluate_accuracy(&model, &params, test_set)?) };
    Ok(FinetuneOutcome { model, params, log, train_accuracy, test_accuracy })
}

pub(crate) fn frozen_features(model: &Classifier, params: &ParamSet, clouds: &[PointCloud]) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    clouds.par_iter().map(|c| model.embed(params, c)).collect()
}

fn batch_accuracy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let hits = logits.chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count();
    hits as f64 / labels.len() as f64
}

fn train_end_to_end(
    model: &Classifier,
    params: &mut ParamSet,
    clouds: &[PointCloud],
    labels: &[usize],
    train: &TrainConfig,
) -> Result<RunLog> {
    let mut optim = OptimState::from_config(params, train);
    let mut log = RunLog::default();
    let n_params = params.len();
    let mut step = 0usize;
    'epochs: for epoch in 0..train.epochs {
        let lr = lr_at(epoch, train);
        let mut order: Vec<usize> = (0..clouds.len()).collect();
        order.shuffle(&mut rng_for(train.seed, &[SHUFFLE, epoch as u64]));
        for batch in order.chunks(train.batch_size) {
            if train.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let current = &*params;
            let hits = std::sync::atomic::AtomicUsize::new(0);
            let (losses, mut grads) = ordered_grad_sum(batch, n_params, |&i| {
                let mut rng = rng_for(train.seed, &[AUGMENT, step as u64, i as u64]);
                let cloud = augment(&clouds[i], train, &mut rng);
                let pyramid = prepare_pyramid(&cloud, &model.cfg)?;
                let mut tape = Tape::new();
                let logits = model.logits(&mut tape, current, &pyramid)?;
                if argmax(tape.value(logits)) == labels[i] {
                    hits.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                }
                let loss = tape.cross_entropy(logits, &[labels[i]])?;
                let g = tape.backward(loss)?;
                Ok((tape.scalar_value(loss), tape.param_grads(&g, current)))
            })?;
            scale_grads(&mut grads, 1.0 / batch.len() as f64);
            adamw_step(params, &grads, &mut optim, lr)?;
            let loss = losses.iter().sum::<f64>() / losses.len() as f64;
            let accuracy = hits.into_inner() as f64 / batch.len() as f64;
            log.rows.push(LogRow { step, epoch, lr, loss, accuracy: Some(accuracy) });
            step += 1;
        }
    }
    Ok(log)
}

/// Trains only the head on precomputed features, in mini-batches.
pub fn train_head_on_features(
    model: &Classifier,
    params: &mut ParamSet,
    features: &[Vec<f64>],
    labels: &[usize],
    train: &TrainConfig,
) -> Result<RunLog> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Argument("features and labels must be non-empty and aligned".into()));
    }
    let dim = model.feature_dim();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Dimension(format!("expected features of width {dim}")));
    }
    let k = model.head_cfg.num_classes;
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Config(format!("label {l} outside {k} classes")));
    }
    params.set_trainable("encoder.", false);
    let mut optim = OptimState::from_config(params, train);
    let mut log = RunLog::default();
    let mut step = 0usize;
    'epochs: for epoch in 0..train.epochs {
        let lr = lr_at(epoch, train);
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut rng_for(train.seed, &[SHUFFLE, epoch as u64]));
        for batch in order.chunks(train.batch_size) {
            if train.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let data: Vec<f64> = batch.iter().flat_map(|&i| features[i].iter().copied()).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[batch.len(), dim], data)?);
            let logits = model.head.forward(&mut tape, params, x)?;
            let accuracy = batch_accuracy(tape.value(logits), k, &batch_labels);
            let loss = tape.cross_entropy(logits, &batch_labels)?;
            let g = tape.backward(loss)?;
            let grads = tape.param_grads(&g, params);
            adamw_step(params, &grads, &mut optim, lr)?;
            log.rows.push(LogRow { step, epoch, lr, loss: tape.scalar_value(loss), accuracy: Some(accuracy) });
            step += 1;
        }
    }
    Ok(log)
}
