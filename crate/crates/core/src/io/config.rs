use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::shapes::ShapeKind;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::training::{HeadConfig, TrainConfig};

/// Synthetic dataset settings for `gen-data`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kinds: Vec<ShapeKind>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kinds: vec![ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Torus, ShapeKind::Cone],
            train_per_class: 64,
            test_per_class: 32,
            points: 2048,
            jitter: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotConfig {
    pub n_way: usize,
    pub m_shot: usize,
    pub trials: usize,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self { n_way: 5, m_shot: 10, trials: 10 }
    }
}

/// Everything a CLI run needs, resolved from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: BackboneConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub head_hidden: usize,
    pub freeze_backbone: bool,
    pub data: DataConfig,
    pub fewshot: FewShotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_preset("paper").expect("built-in preset")
    }
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse { line, msg: format!("bad value {v:?} for {key}") })
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).map(|s| parse(line, key, s)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        let model = BackboneConfig::preset(name)?;
        Ok(Self {
            preset: name.to_string(),
            model,
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            head_hidden: 256,
            freeze_backbone: false,
            data: DataConfig::default(),
            fewshot: FewShotConfig::default(),
        })
    }

    pub fn head(&self, num_classes: usize) -> HeadConfig {
        HeadConfig { num_classes, hidden: self.head_hidden, freeze_backbone: self.freeze_backbone }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// `#` starts a comment; `preset` is applied first regardless of position;
    /// unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: format!("expected `key = value`, got {content:?}") })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() {
                return Err(Error::Parse { line, msg: "empty key".into() });
            }
            if !seen.insert(k.clone()) {
                return Err(Error::Parse { line, msg: format!("duplicate key {k}") });
            }
            pairs.push((line, k, v));
        }
        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "preset") {
            Some((line, _, v)) => Self::from_preset(v).map_err(|e| Error::Parse { line: *line, msg: e.to_string() })?,
            None => Self::default(),
        };
        for (line, k, v) in &pairs {
            if k != "preset" {
                cfg.set(*line, k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.data.kinds.len() < 2 {
            return Err(Error::Config("data.kinds needs at least two shapes".into()));
        }
        Ok(())
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => {
                let s = parse(line, key, v)?;
                self.set_seed(s);
            }
            "n_points" => m.n_points = parse(line, key, v)?,
            "sizes" => m.sizes = parse_list(line, key, v)?,
            "ks" => m.ks = parse_list(line, key, v)?,
            "dims" => m.dims = parse_list(line, key, v)?,
            "encoder_blocks" => m.encoder_blocks = parse(line, key, v)?,
            "decoder_blocks" => m.decoder_blocks = parse(line, key, v)?,
            "heads" => m.heads = parse(line, key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(line, key, v)?,
            "embed_hidden" => m.embed_hidden = parse(line, key, v)?,
            "la_window" => m.la.window = parse(line, key, v)?,
            "la_groups" => m.la.groups = parse(line, key, v)?,
            "la_avg" => m.la.use_avg = parse(line, key, v)?,
            "la_max" => m.la.use_max = parse(line, key, v)?,
            "interp_k" => m.interp_k = parse(line, key, v)?,
            "zero_scale_head" => m.zero_scale_head = parse(line, key, v)?,
            "mask_ratio" => m.mask_ratio = parse(line, key, v)?,
            "head_hidden" => self.head_hidden = parse(line, key, v)?,
            "freeze_backbone" => self.freeze_backbone = parse(line, key, v)?,
            "data.kinds" => {
                self.data.kinds = v
                    .split(',')
                    .map(|s| s.trim().parse::<ShapeKind>().map_err(|e| Error::Parse { line, msg: e.to_string() }))
                    .collect::<Result<_>>()?
            }
            "data.train_per_class" => self.data.train_per_class = parse(line, key, v)?,
            "data.test_per_class" => self.data.test_per_class = parse(line, key, v)?,
            "data.points" => self.data.points = parse(line, key, v)?,
            "data.jitter" => self.data.jitter = parse(line, key, v)?,
            "fewshot.n_way" => self.fewshot.n_way = parse(line, key, v)?,
            "fewshot.m_shot" => self.fewshot.m_shot = parse(line, key, v)?,
            "fewshot.trials" => self.fewshot.trials = parse(line, key, v)?,
            _ => {
                let (section, field) = key.split_once('.').unwrap_or(("", key));
                let t = match section {
                    "pretrain" => &mut self.pretrain,
                    "finetune" => &mut self.finetune,
                    _ => return Err(Error::Parse { line, msg: format!("unknown key {key}") }),
                };
                match field {
                    "epochs" => t.epochs = parse(line, key, v)?,
                    "batch_size" => t.batch_size = parse(line, key, v)?,
                    "lr" => t.base_lr = parse(line, key, v)?,
                    "weight_decay" => t.weight_decay = parse(line, key, v)?,
                    "warmup_epochs" => t.warmup_epochs = parse(line, key, v)?,
                    "min_lr" => t.min_lr = parse(line, key, v)?,
                    "beta1" => t.beta1 = parse(line, key, v)?,
                    "beta2" => t.beta2 = parse(line, key, v)?,
                    "adam_eps" => t.adam_eps = parse(line, key, v)?,
                    "scale_min" => t.scale_min = parse(line, key, v)?,
                    "scale_max" => t.scale_max = parse(line, key, v)?,
                    "translate" => t.translate = parse(line, key, v)?,
                    "checkpoint_every" => t.checkpoint_every = parse(line, key, v)?,
                    "resample_mask" => t.resample_mask = parse(line, key, v)?,
                    "max_steps" => {
                        t.max_steps = if v == "none" { None } else { Some(parse(line, key, v)?) };
                    }
                    _ => return Err(Error::Parse { line, msg: format!("unknown key {key}") }),
                }
            }
        }
        Ok(())
    }

    /// Every setting, in a fixed order; parses back to the same config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.clone());
        kv("seed", self.pretrain.seed.to_string());
        kv("n_points", m.n_points.to_string());
        kv("sizes", join(&m.sizes));
        kv("ks", join(&m.ks));
        kv("dims", join(&m.dims));
        kv("encoder_blocks", m.encoder_blocks.to_string());
        kv("decoder_blocks", m.decoder_blocks.to_string());
        kv("heads", m.heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("embed_hidden", m.embed_hidden.to_string());
        kv("la_window", m.la.window.to_string());
        kv("la_groups", m.la.groups.to_string());
        kv("la_avg", m.la.use_avg.to_string());
        kv("la_max", m.la.use_max.to_string());
        kv("interp_k", m.interp_k.to_string());
        kv("zero_scale_head", m.zero_scale_head.to_string());
        kv("mask_ratio", m.mask_ratio.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("freeze_backbone", self.freeze_backbone.to_string());
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            kv(&format!("{name}.epochs"), t.epochs.to_string());
            kv(&format!("{name}.batch_size"), t.batch_size.to_string());
            kv(&format!("{name}.lr"), t.base_lr.to_string());
            kv(&format!("{name}.weight_decay"), t.weight_decay.to_string());
            kv(&format!("{name}.warmup_epochs"), t.warmup_epochs.to_string());
            kv(&format!("{name}.min_lr"), t.min_lr.to_string());
            kv(&format!("{name}.beta1"), t.beta1.to_string());
            kv(&format!("{name}.beta2"), t.beta2.to_string());
            kv(&format!("{name}.adam_eps"), t.adam_eps.to_string());
            kv(&format!("{name}.scale_min"), t.scale_min.to_string());
            kv(&format!("{name}.scale_max"), t.scale_max.to_string());
            kv(&format!("{name}.translate"), t.translate.to_string());
            kv(&format!("{name}.checkpoint_every"), t.checkpoint_every.to_string());
            kv(&format!("{name}.resample_mask"), t.resample_mask.to_string());
            kv(&format!("{name}.max_steps"), t.max_steps.map_or("none".to_string(), |n| n.to_string()));
        }
        kv("data.kinds", join(&self.data.kinds));
        kv("data.train_per_class", self.data.train_per_class.to_string());
        kv("data.test_per_class", self.data.test_per_class.to_string());
        kv("data.points", self.data.points.to_string());
        kv("data.jitter", self.data.jitter.to_string());
        kv("fewshot.n_way", self.fewshot.n_way.to_string());
        kv("fewshot.m_shot", self.fewshot.m_shot.to_string());
        kv("fewshot.trials", self.fewshot.trials.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_applies_first() {
        let c = RunConfig::parse(
            "dims = 16, 32 # wider\npreset = tiny\nseed = 9\npretrain.epochs = 3\npretrain.warmup_epochs = 1\n",
        )
        .unwrap();
        assert_eq!(c.model.dims, vec![16, 32]);
        assert_eq!(c.model.sizes, vec![16, 8]);
        assert_eq!(c.pretrain.seed, 9);
        assert_eq!(c.finetune.seed, 9);
        assert_eq!(c.pretrain.epochs, 3);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::from_preset("small").unwrap();
        c.pretrain.max_steps = Some(17);
        c.pretrain.base_lr = 3.3e-4;
        c.data.kinds = vec![ShapeKind::PlaneWithBump, ShapeKind::Cube];
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let line_of = |text: &str| match RunConfig::parse(text) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(line_of("preset = tiny\n\nbogus = 1\n"), 3);
        assert_eq!(line_of("heads = two\n"), 1);
        assert_eq!(line_of("seed = 1\nseed = 2\n"), 2);
        assert_eq!(line_of("just words\n"), 1);
        assert_eq!(line_of("data.kinds = sphere, blob\n"), 1);
    }
}
