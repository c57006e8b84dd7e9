//! Hierarchical encoder, light decoder and the masked reconstruction objective.

mod block;
mod config;

pub use block::{SelfAttention, TransformerBlock};
pub use config::BackboneConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{PatchEmbed, PosEmbed, TokenBatch, TokenMerge};
use crate::error::{Error, Result};
use crate::geometry::{gather_patches, MaskPlan, NeighborTable, Point, PointCloud, ScalePyramid};
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

/// Distances below this are clamped before inverting in token propagation.
pub const MIN_INTERP_DIST: f64 = 1e-8;

/// S-stage encoder over visible tokens.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: PatchEmbed,
    pub merges: Vec<TokenMerge>,
    pub pos: Vec<PosEmbed>,
    pub stages: Vec<Vec<TransformerBlock>>,
}

impl Encoder {
    pub fn new(b: &mut ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let embed = PatchEmbed::new(b, "encoder.embed", cfg.embed_hidden, cfg.dims[0], cfg.la)?;
        let mut merges = Vec::new();
        let mut pos = Vec::new();
        let mut stages = Vec::new();
        for (i, &dim) in cfg.dims.iter().enumerate() {
            if i > 0 {
                merges.push(TokenMerge::new(b, &format!("encoder.merge{i}"), cfg.dims[i - 1], dim)?);
            }
            pos.push(PosEmbed::new(b, &format!("encoder.stage{i}.pos"), dim)?);
            let blocks = (0..cfg.encoder_blocks)
                .map(|k| TransformerBlock::new(b, &format!("encoder.stage{i}.block{k}"), dim, cfg.heads, cfg.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        Ok(Self { embed, merges, pos, stages })
    }

    /// Visible tokens of every stage, `T'_1 .. T'_S`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        pyramid: &ScalePyramid,
        plan: &MaskPlan,
    ) -> Result<Vec<TokenBatch>> {
        let s = self.stages.len();
        if pyramid.num_scales() != s || plan.num_scales() != s {
            return Err(Error::Consistency(format!(
                "encoder has {s} stages but pyramid/mask have {}/{} scales",
                pyramid.num_scales(),
                plan.num_scales()
            )));
        }
        let mut outputs: Vec<TokenBatch> = Vec::with_capacity(s);
        for stage in 0..s {
            let scale = stage + 1;
            let mut batch = if stage == 0 {
                let centers = plan.visible(1).to_vec();
                let patches = gather_patches(pyramid, 1, &centers)?;
                let tokens = self.embed.tokenize(tape, params, &patches)?;
                let coords = centers.iter().map(|&c| pyramid.points(1)[c]).collect();
                TokenBatch { tokens, coords, indices: centers, scale }
            } else {
                self.merges[stage - 1].forward(tape, params, &outputs[stage - 1], pyramid, plan, scale)?
            };
            let pe = self.pos[stage].forward(tape, params, &batch.coords)?;
            let mut x = tape.add(batch.tokens, pe)?;
            for block in &self.stages[stage] {
                x = block.forward(tape, params, x)?;
            }
            batch.tokens = x;
            outputs.push(batch);
        }
        Ok(outputs)
    }
}

/// Inverse-distance interpolation table from `coarse` to `fine` points:
/// `k` nearest coarse points per fine point with weights `(1/d)/sum(1/d)`.
pub fn interpolation_weights(fine: &[Point], coarse: &[Point], k: usize) -> Result<(NeighborTable, Vec<f64>)> {
    if coarse.is_empty() {
        return Err(Error::Argument("token propagation from an empty coarse set".into()));
    }
    let k = k.min(coarse.len());
    let (table, sq) = crate::geometry::knn_with_dist(fine, coarse, k)?;
    let mut w = Vec::with_capacity(sq.len());
    for row in sq.chunks_exact(k) {
        let inv: Vec<f64> = row.iter().map(|d| 1.0 / d.sqrt().max(MIN_INTERP_DIST)).collect();
        let total: f64 = inv.iter().sum();
        w.extend(inv.iter().map(|v| v / total));
    }
    Ok((table, w))
}

/// Spreads coarse tokens to fine positions by inverse-distance weighting,
/// then projects them to the fine width.
pub fn token_propagate(
    tape: &mut Tape,
    params: &ParamSet,
    coarse: Var,
    coarse_coords: &[Point],
    fine_coords: &[Point],
    k: usize,
    proj: &Linear,
) -> Result<Var> {
    let (table, w) = interpolation_weights(fine_coords, coarse_coords, k)?;
    let mixed = tape.interpolate_rows(coarse, &table.idx, &w, table.k)?;
    proj.forward(tape, params, mixed)
}

/// Output of the decoder at scale 2, all positions in natural index order.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[N_2, C_2]` tokens.
    pub tokens: Var,
    /// Output of every stage, coarsest first; the last one is `tokens`.
    pub stages: Vec<Var>,
    /// `D'`: rows for visible scale-2 positions.
    pub visible: Option<Var>,
    /// `D''`: rows for masked scale-2 positions.
    pub masked: Option<Var>,
}

/// (S-1)-stage decoder sharing one learnable mask token.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub mask_token: ParamId,
    pub pos: Vec<PosEmbed>,
    pub stages: Vec<Vec<TransformerBlock>>,
    pub props: Vec<Linear>,
    pub interp_k: usize,
}

impl Decoder {
    pub fn new(b: &mut ParamBuilder, cfg: &BackboneConfig) -> Result<Self> {
        let s = cfg.num_scales();
        let mask_token = b.normal("decoder.mask_token", &[1, cfg.dims[s - 1]], 0.02)?;
        let mut pos = Vec::new();
        let mut stages = Vec::new();
        let mut props = Vec::new();
        // stage j works at scale S - j
        for j in 0..s - 1 {
            let dim = cfg.dims[s - 1 - j];
            pos.push(PosEmbed::new(b, &format!("decoder.stage{j}.pos"), dim)?);
            let blocks = (0..cfg.decoder_blocks)
                .map(|k| TransformerBlock::new(b, &format!("decoder.stage{j}.block{k}"), dim, cfg.heads, cfg.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            if j + 1 < s - 1 {
                props.push(Linear::new(b, &format!("decoder.prop{j}"), dim, cfg.dims[s - 2 - j])?);
            }
        }
        Ok(Self { mask_token, pos, stages, props, interp_k: cfg.interp_k })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        encoded: &[TokenBatch],
        pyramid: &ScalePyramid,
        plan: &MaskPlan,
    ) -> Result<DecoderOutput> {
        let s = pyramid.num_scales();
        let top = encoded.last().ok_or_else(|| Error::Consistency("decoder needs encoder output".into()))?;
        if top.scale != s || top.indices != plan.visible(s) {
            return Err(Error::Consistency("decoder input does not match the final-scale visible set".into()));
        }
        // visible tokens followed by mask tokens, then permuted to index order
        let masked = plan.masked(s);
        let mut x = if masked.is_empty() {
            top.tokens
        } else {
            let mt = tape.param(params, self.mask_token);
            let fill = tape.gather_rows(mt, &vec![0; masked.len()])?;
            let stacked = tape.concat_rows(&[top.tokens, fill])?;
            let mut order = vec![0; pyramid.size(s)];
            for (row, &j) in plan.visible(s).iter().chain(masked).enumerate() {
                order[j] = row;
            }
            tape.gather_rows(stacked, &order)?
        };
        let mut stage_out = Vec::with_capacity(self.stages.len());
        for (j, blocks) in self.stages.iter().enumerate() {
            let scale = s - j;
            if j > 0 {
                x = token_propagate(
                    tape,
                    params,
                    x,
                    pyramid.points(scale + 1),
                    pyramid.points(scale),
                    self.interp_k,
                    &self.props[j - 1],
                )?;
            }
            let pe = self.pos[j].forward(tape, params, pyramid.points(scale))?;
            x = tape.add(x, pe)?;
            for block in blocks {
                x = block.forward(tape, params, x)?;
            }
            stage_out.push(x);
        }
        let split = |tape: &mut Tape, idx: &[usize]| -> Result<Option<Var>> {
            if idx.is_empty() {
                Ok(None)
            } else {
                tape.gather_rows(x, idx).map(Some)
            }
        };
        let visible = split(tape, plan.visible(2))?;
        let masked = split(tape, plan.masked(2))?;
        Ok(DecoderOutput { tokens: x, stages: stage_out, visible, masked })
    }
}

/// Linear head mapping each masked scale-2 token to `k` center-relative points.
#[derive(Clone, Debug)]
pub struct ReconstructionHead {
    pub proj: Linear,
    pub k: usize,
}

impl ReconstructionHead {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize, k: usize) -> Result<Self> {
        Ok(Self { proj: Linear::new(b, name, dim, k * 3)?, k })
    }

    /// `[M, C_2] -> [M, k, 3]`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, tokens: Var) -> Result<Var> {
        let m = tape.shape(tokens)[0];
        let y = self.proj.forward(tape, params, tokens)?;
        tape.reshape(y, &[m, self.k, 3])
    }
}

/// Ground truth for the masked scale-2 centers: their `k_2` scale-1
/// neighbors relative to the center, `[M, k_2, 3]`.
pub fn reconstruction_targets(pyramid: &ScalePyramid, plan: &MaskPlan) -> Result<Tensor> {
    let masked = plan.masked(2);
    if masked.is_empty() {
        return Err(Error::UndefinedLoss("no masked scale-2 centers; raise the mask ratio".into()));
    }
    gather_patches(pyramid, 2, masked)
}

/// Scale-0 targets: for each masked scale-2 center, the scale-0 neighbors of
/// each of its scale-1 neighbors, relative to the center.
pub fn zero_scale_targets(pyramid: &ScalePyramid, plan: &MaskPlan) -> Result<Tensor> {
    let masked = plan.masked(2);
    if masked.is_empty() {
        return Err(Error::UndefinedLoss("no masked scale-2 centers; raise the mask ratio".into()));
    }
    let (i1, i2) = (pyramid.neighbors(1), pyramid.neighbors(2));
    let p0 = pyramid.points(0);
    let mut data = Vec::new();
    for &c in masked {
        let ctr = pyramid.points(2)[c];
        for &j in i2.row(c) {
            for &l in i1.row(j) {
                let p = p0[l];
                data.extend_from_slice(&[p[0] - ctr[0], p[1] - ctr[1], p[2] - ctr[2]]);
            }
        }
    }
    Tensor::new(&[masked.len(), i2.k * i1.k, 3], data)
}

/// Mean over masked scale-2 centers of the Chamfer distance between the
/// predicted and true neighborhoods.
pub fn pretrain_loss(tape: &mut Tape, pred: Var, pyramid: &ScalePyramid, plan: &MaskPlan) -> Result<Var> {
    let truth = reconstruction_targets(pyramid, plan)?;
    if tape.shape(pred)[0] != truth.shape()[0] {
        return Err(Error::Dimension(format!(
            "{} predicted patches for {} masked centers",
            tape.shape(pred)[0],
            truth.shape()[0]
        )));
    }
    let t = tape.constant(truth);
    tape.chamfer(pred, t)
}

/// Complete pretraining model: encoder, decoder and reconstruction head(s).
#[derive(Clone, Debug)]
pub struct MaskedAutoencoder {
    pub cfg: BackboneConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: ReconstructionHead,
    pub zero_head: Option<ReconstructionHead>,
}

/// Everything a forward pass produced, for inspection and reconstruction.
pub struct PretrainForward {
    pub encoded: Vec<TokenBatch>,
    pub decoded: DecoderOutput,
    pub pred: Var,
    pub loss: Var,
}

impl MaskedAutoencoder {
    /// Builds the model and its freshly initialised parameters.
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<(Self, ParamSet)> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder { params: &mut params, rng: &mut rng };
        let encoder = Encoder::new(&mut b, &cfg)?;
        let decoder = Decoder::new(&mut b, &cfg)?;
        let head = ReconstructionHead::new(&mut b, "head.recon", cfg.dims[1], cfg.ks[1])?;
        let zero_head = if cfg.zero_scale_head {
            Some(ReconstructionHead::new(&mut b, "head.zero_scale", cfg.dims[1], cfg.ks[1] * cfg.ks[0])?)
        } else {
            None
        };
        Ok((Self { cfg, encoder, decoder, head, zero_head }, params))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        pyramid: &ScalePyramid,
        plan: &MaskPlan,
    ) -> Result<PretrainForward> {
        let encoded = self.encoder.forward(tape, params, pyramid, plan)?;
        let decoded = self.decoder.forward(tape, params, &encoded, pyramid, plan)?;
        let masked = decoded
            .masked
            .ok_or_else(|| Error::UndefinedLoss("no masked scale-2 centers; raise the mask ratio".into()))?;
        let pred = self.head.forward(tape, params, masked)?;
        let mut loss = pretrain_loss(tape, pred, pyramid, plan)?;
        if let Some(zh) = &self.zero_head {
            let zp = zh.forward(tape, params, masked)?;
            let zt = tape.constant(zero_scale_targets(pyramid, plan)?);
            let zl = tape.chamfer(zp, zt)?;
            loss = tape.add(loss, zl)?;
        }
        Ok(PretrainForward { encoded, decoded, pred, loss })
    }

    pub fn loss(&self, tape: &mut Tape, params: &ParamSet, pyramid: &ScalePyramid, plan: &MaskPlan) -> Result<Var> {
        Ok(self.forward(tape, params, pyramid, plan)?.loss)
    }
}

/// Point sets for inspecting one masked reconstruction.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Normalized input.
    pub original: PointCloud,
    /// Scale-1 points left visible by the mask.
    pub masked: PointCloud,
    /// Visible scale-1 points plus the predicted neighborhoods of masked centers.
    pub reconstructed: PointCloud,
    pub loss: f64,
}

impl MaskedAutoencoder {
    pub fn reconstruct(&self, params: &ParamSet, cloud: &PointCloud, mask_seed: u64) -> Result<Reconstruction> {
        let original = cloud.truncated(self.cfg.n_points).normalized();
        let (pyramid, plan) = crate::training::prepare_masked(cloud, &self.cfg, mask_seed)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, params, &pyramid, &plan)?;
        let scale1 = pyramid.points(1);
        let visible: Vec<Point> = plan.visible(1).iter().map(|&j| scale1[j]).collect();
        let mut full = visible.clone();
        let pred = tape.value(out.pred);
        let centers = pyramid.points(2);
        let k = self.cfg.ks[1];
        for (m, &c) in plan.masked(2).iter().enumerate() {
            for r in 0..k {
                let o = (m * k + r) * 3;
                full.push([centers[c][0] + pred[o], centers[c][1] + pred[o + 1], centers[c][2] + pred[o + 2]]);
            }
        }
        Ok(Reconstruction {
            masked: PointCloud::new(visible, cloud.label)?,
            reconstructed: PointCloud::new(full, cloud.label)?,
            original,
            loss: tape.scalar_value(out.loss),
        })
    }
}
