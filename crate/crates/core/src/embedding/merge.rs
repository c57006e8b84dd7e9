use super::TokenBatch;
use crate::error::{Error, Result};
use crate::geometry::{MaskPlan, ScalePyramid};
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamSet};
use crate::tensor::{PoolMode, Tape};

/// Aggregates the `k_i` finer tokens around each visible scale-`i` center:
/// shared linear layer `C_{i-1} -> C_i`, GELU, max-pool.
#[derive(Clone, Debug)]
pub struct TokenMerge {
    pub proj: Linear,
}

impl TokenMerge {
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self { proj: Linear::new(b, &format!("{name}.proj"), d_in, d_out)? })
    }

    /// `prev` must hold exactly the visible tokens of scale `scale - 1`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        prev: &TokenBatch,
        pyramid: &ScalePyramid,
        plan: &MaskPlan,
        scale: usize,
    ) -> Result<TokenBatch> {
        if prev.scale + 1 != scale {
            return Err(Error::Consistency(format!("merging scale {} tokens into scale {scale}", prev.scale)));
        }
        let mut pos = vec![None; pyramid.size(prev.scale)];
        for (row, &j) in prev.indices.iter().enumerate() {
            pos[j] = Some(row);
        }
        let table = pyramid.neighbors(scale);
        let centers = plan.visible(scale).to_vec();
        let mut gather = Vec::with_capacity(centers.len() * table.k);
        for &c in &centers {
            for &j in table.row(c) {
                let row = pos[j].ok_or_else(|| {
                    Error::Consistency(format!(
                        "scale-{scale} center {c} needs scale-{} token {j}, which is not visible",
                        prev.scale
                    ))
                })?;
                gather.push(row);
            }
        }
        let g = tape.gather_rows(prev.tokens, &gather)?;
        let h = self.proj.forward(tape, params, g)?;
        let h = tape.gelu(h)?;
        let h = tape.reshape(h, &[centers.len(), table.k, self.proj.d_out])?;
        let tokens = tape.pool(h, 1, PoolMode::Max)?;
        let coords = centers.iter().map(|&c| pyramid.points(scale)[c]).collect();
        Ok(TokenBatch { tokens, coords, indices: centers, scale })
    }
}
