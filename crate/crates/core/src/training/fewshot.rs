use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::finetune::{argmax, frozen_features, train_head_on_features, Classifier, HeadConfig};
use super::schedule::TrainConfig;
use super::{derive_seed, rng_for};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::io::Checkpoint;
use crate::tensor::{Tape, Tensor};

/// Query clouds drawn per selected class in every trial.
pub const FEW_SHOT_TEST_PER_CLASS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotResult {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over trials.
    pub std: f64,
}

/// N-way M-shot evaluation with a frozen encoder.
///
/// Each trial picks `n_way` classes, `m_shot` support and
/// [`FEW_SHOT_TEST_PER_CLASS`] query clouds per class, trains a fresh head
/// on frozen features of the support set and scores the query set.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_eval(
    pretrained: Option<&Checkpoint>,
    dataset: &[PointCloud],
    model_cfg: &BackboneConfig,
    hidden: usize,
    n_way: usize,
    m_shot: usize,
    trials: usize,
    train: &TrainConfig,
) -> Result<FewShotResult> {
    if n_way < 2 || m_shot == 0 || trials == 0 {
        return Err(Error::Argument("few-shot needs n >= 2, m >= 1 and at least one trial".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in dataset.iter().enumerate() {
        let l = c.label.ok_or_else(|| Error::Argument(format!("sample {i} has no label")))?;
        by_class.entry(l).or_default().push(i);
    }
    let need = m_shot + FEW_SHOT_TEST_PER_CLASS;
    let eligible: Vec<usize> = by_class.iter().filter(|(_, v)| v.len() >= need).map(|(&l, _)| l).collect();
    if eligible.len() < n_way {
        return Err(Error::Argument(format!(
            "{n_way}-way {m_shot}-shot needs {n_way} classes with at least {need} samples, found {}",
            eligible.len()
        )));
    }

    let mut cfg = model_cfg.clone();
    cfg.mask_ratio = 0.0;
    let head_cfg = HeadConfig { num_classes: n_way, hidden, freeze_backbone: true };
    let (base, mut base_params) = Classifier::new(cfg, head_cfg, derive_seed(train.seed, &[20]))?;
    if let Some(ckpt) = pretrained {
        base.load_backbone(&mut base_params, ckpt, false)?;
    }
    let features = frozen_features(&base, &base_params, dataset)?;

    let mut accuracies = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = rng_for(train.seed, &[21, trial as u64]);
        let mut classes = eligible.clone();
        classes.shuffle(&mut rng);
        classes.truncate(n_way);
        let (mut support, mut support_y, mut query, mut query_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (new_label, class) in classes.iter().enumerate() {
            let mut members = by_class[class].clone();
            members.shuffle(&mut rng);
            for &i in &members[..m_shot] {
                support.push(features[i].clone());
                support_y.push(new_label);
            }
            for &i in &members[m_shot..need] {
                query.push(features[i].clone());
                query_y.push(new_label);
            }
        }
        let mut trial_train = train.clone();
        trial_train.seed = derive_seed(train.seed, &[22, trial as u64]);
        let (_, mut params) = Classifier::new(base.cfg.clone(), base.head_cfg.clone(), trial_train.seed)?;
        train_head_on_features(&base, &mut params, &support, &support_y, &trial_train)?;

        let dim = base.feature_dim();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[query.len(), dim], query.concat())?);
        let logits = base.head.forward(&mut tape, &params, x)?;
        let hits = tape.value(logits).chunks(n_way).zip(&query_y).filter(|(row, &l)| argmax(row) == l).count();
        accuracies.push(hits as f64 / query.len() as f64);
    }
    let mean = accuracies.iter().sum::<f64>() / trials as f64;
    let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / trials as f64).sqrt();
    Ok(FewShotResult { accuracies, mean, std })
}
