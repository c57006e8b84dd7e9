use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Optimisation and augmentation settings for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translate: f64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Draw a fresh mask for every sample at every step. When off, each
    /// sample keeps one mask for the whole run.
    pub resample_mask: bool,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    /// Full pretraining regime.
    pub fn pretrain() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            base_lr: 1e-4,
            weight_decay: 0.05,
            warmup_epochs: 10,
            min_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            scale_min: 0.8,
            scale_max: 1.25,
            translate: 0.1,
            checkpoint_every: 0,
            resample_mask: true,
            max_steps: None,
        }
    }

    /// Classification fine-tuning regime.
    pub fn finetune() -> Self {
        Self { base_lr: 5e-4, batch_size: 32, ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 || self.min_lr < 0.0 || self.min_lr > self.base_lr {
            return Err(Error::Config("need 0 <= min_lr <= base_lr and base_lr > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
        {
            return Err(Error::Config("invalid AdamW moments settings".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) || self.translate < 0.0 {
            return Err(Error::Config("invalid augmentation ranges".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay reaching `min_lr` at the
/// final epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let span = cfg.epochs.saturating_sub(cfg.warmup_epochs + 1);
    let progress = if span == 0 { 1.0 } else { ((epoch - cfg.warmup_epochs) as f64 / span as f64).min(1.0) };
    cfg.min_lr + (cfg.base_lr - cfg.min_lr) * (1.0 + (PI * progress).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig { epochs: 21, warmup_epochs: 10, base_lr: 1e-3, min_lr: 1e-6, ..TrainConfig::pretrain() };
        assert_eq!(lr_at(9, &cfg), 1e-3);
        assert_eq!(lr_at(10, &cfg), 1e-3);
        assert!((lr_at(20, &cfg) - 1e-6).abs() < 1e-12);
        assert!((lr_at(15, &cfg) - (1e-3 + 1e-6) / 2.0).abs() < 1e-15);
        assert_eq!(lr_at(0, &cfg), 1e-4);
    }

    #[test]
    fn paper_defaults() {
        let p = TrainConfig::pretrain();
        assert_eq!((p.epochs, p.batch_size, p.warmup_epochs), (300, 64, 10));
        assert_eq!((p.base_lr, p.weight_decay), (1e-4, 0.05));
        let f = TrainConfig::finetune();
        assert_eq!((f.base_lr, f.weight_decay, f.batch_size), (5e-4, 0.05, 32));
        assert!(TrainConfig { warmup_epochs: 300, ..p }.validate().is_err());
    }
}
