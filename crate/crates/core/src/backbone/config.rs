use sha2::{Digest, Sha256};

use crate::embedding::LaConfig;
use crate::error::{Error, Result};

/// Architecture and masking hyperparameters of the autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Input points per cloud; longer clouds are truncated.
    pub n_points: usize,
    /// Points per scale `N_1 > ... > N_S`.
    pub sizes: Vec<usize>,
    /// Neighbors per scale `k_1 .. k_S`.
    pub ks: Vec<usize>,
    /// Token widths per scale `C_1 .. C_S`.
    pub dims: Vec<usize>,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the first pointwise layer of the patch encoder.
    pub embed_hidden: usize,
    pub la: LaConfig,
    /// Coarse tokens blended per fine position during token propagation.
    pub interp_k: usize,
    /// Adds a second head that predicts scale-0 neighborhoods.
    pub zero_scale_head: bool,
    pub mask_ratio: f64,
}

impl BackboneConfig {
    /// The full-size three-stage setup.
    pub fn paper() -> Self {
        Self {
            n_points: 2048,
            sizes: vec![512, 256, 64],
            ks: vec![16, 8, 8],
            dims: vec![96, 192, 384],
            encoder_blocks: 5,
            decoder_blocks: 1,
            heads: 6,
            mlp_ratio: 4,
            embed_hidden: 96,
            la: LaConfig { window: 5, groups: 32, use_avg: true, use_max: true },
            interp_k: 3,
            zero_scale_head: false,
            mask_ratio: 0.6,
        }
    }

    /// Two-stage model small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            n_points: 32,
            sizes: vec![16, 8],
            ks: vec![4, 4],
            dims: vec![8, 16],
            encoder_blocks: 1,
            decoder_blocks: 2,
            heads: 2,
            mlp_ratio: 4,
            embed_hidden: 8,
            la: LaConfig { window: 3, groups: 2, use_avg: true, use_max: true },
            interp_k: 3,
            zero_scale_head: false,
            mask_ratio: 0.6,
        }
    }

    /// Desk-scale model used for the synthetic classification runs. Widths
    /// are multiples of 32 so every attention setting of the ablation grid fits.
    pub fn small() -> Self {
        Self {
            n_points: 128,
            sizes: vec![32, 8],
            ks: vec![8, 4],
            dims: vec![64, 128],
            encoder_blocks: 1,
            decoder_blocks: 1,
            heads: 4,
            mlp_ratio: 2,
            embed_hidden: 64,
            la: LaConfig { window: 5, groups: 32, use_avg: true, use_max: true },
            interp_k: 3,
            zero_scale_head: false,
            mask_ratio: 0.6,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn num_scales(&self) -> usize {
        self.sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.sizes.len();
        if s < 2 {
            return Err(Error::Config("at least two scales are required".into()));
        }
        if self.ks.len() != s || self.dims.len() != s {
            return Err(Error::Config("sizes, ks and dims must have one entry per scale".into()));
        }
        let mut prev = self.n_points;
        for (i, &n) in self.sizes.iter().enumerate() {
            if n == 0 || n > prev || (i > 0 && n == prev) {
                return Err(Error::Config(format!("scale sizes must strictly decrease: {:?}", self.sizes)));
            }
            if self.ks[i] == 0 || self.ks[i] > prev {
                return Err(Error::Config(format!("k_{} = {} exceeds {prev} points", i + 1, self.ks[i])));
            }
            prev = n;
        }
        if self.heads == 0 || self.dims.iter().any(|&c| c == 0 || c % self.heads != 0) {
            return Err(Error::Config(format!("dims {:?} must be divisible by {} heads", self.dims, self.heads)));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("block counts and mlp ratio must be positive".into()));
        }
        self.la.validate(self.embed_hidden)?;
        self.la.validate(self.dims[0])?;
        if self.interp_k == 0 {
            return Err(Error::Config("interp_k must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        Ok(())
    }

    /// Architecture keys only, one `key = value` per line. Masking and the
    /// input length do not change the parameter layout and are excluded.
    pub fn canonical_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "sizes = {}\nks = {}\ndims = {}\nencoder_blocks = {}\ndecoder_blocks = {}\nheads = {}\n\
             mlp_ratio = {}\nembed_hidden = {}\nla_window = {}\nla_groups = {}\nla_avg_branch = {}\n\
             la_max_branch = {}\ninterp_k = {}\nzero_scale_head = {}\n",
            list(&self.sizes),
            list(&self.ks),
            list(&self.dims),
            self.encoder_blocks,
            self.decoder_blocks,
            self.heads,
            self.mlp_ratio,
            self.embed_hidden,
            self.la.window,
            self.la.groups,
            self.la.use_avg,
            self.la.use_max,
            self.interp_k,
            self.zero_scale_head,
        )
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}
