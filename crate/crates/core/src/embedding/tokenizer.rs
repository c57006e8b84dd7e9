use super::la::{LaConfig, LocalAttention};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nn::{Linear, Mlp};
use crate::params::{ParamBuilder, ParamSet};
use crate::tensor::{PoolMode, Tape, Tensor, Var};

/// Mini-PointNet patch encoder: shared pointwise layer `3 -> hidden`, local
/// attention, GELU, shared pointwise layer `hidden -> dim`, local attention,
/// then max-pool over the neighbors of each patch.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv_a: Linear,
    pub la_a: LocalAttention,
    pub conv_b: Linear,
    pub la_b: LocalAttention,
}

impl PatchEmbed {
    pub fn new(b: &mut ParamBuilder, name: &str, hidden: usize, dim: usize, la: LaConfig) -> Result<Self> {
        Ok(Self {
            conv_a: Linear::new(b, &format!("{name}.conv_a"), 3, hidden)?,
            la_a: LocalAttention::new(b, &format!("{name}.la_a"), hidden, la)?,
            conv_b: Linear::new(b, &format!("{name}.conv_b"), hidden, dim)?,
            la_b: LocalAttention::new(b, &format!("{name}.la_b"), dim, la)?,
        })
    }

    /// `patches: [M, k, 3]` center-relative neighborhoods to `[M, dim]` tokens.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, patches: Var) -> Result<Var> {
        let s = tape.shape(patches).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Dimension(format!("patches must be [M, k, 3], got {s:?}")));
        }
        let (m, k) = (s[0], s[1]);
        let flat = tape.reshape(patches, &[m * k, 3])?;
        let h = self.conv_a.forward(tape, params, flat)?;
        let h = tape.reshape(h, &[m, k, self.conv_a.d_out])?;
        let h = self.la_a.forward(tape, params, h)?;
        let h = tape.gelu(h)?;
        let h = tape.reshape(h, &[m * k, self.conv_a.d_out])?;
        let h = self.conv_b.forward(tape, params, h)?;
        let h = tape.reshape(h, &[m, k, self.conv_b.d_out])?;
        let h = self.la_b.forward(tape, params, h)?;
        tape.pool(h, 1, PoolMode::Max)
    }

    pub fn tokenize(&self, tape: &mut Tape, params: &ParamSet, patches: &Tensor) -> Result<Var> {
        let p = tape.constant(patches.clone());
        self.forward(tape, params, p)
    }
}

/// Learned positional embedding: `3 -> C -> C` MLP of raw coordinates.
#[derive(Clone, Debug)]
pub struct PosEmbed {
    pub mlp: Mlp,
}

impl PosEmbed {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(b, name, 3, dim, dim)? })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, coords: &[Point]) -> Result<Var> {
        let t = Tensor::new(&[coords.len(), 3], coords.iter().flatten().copied().collect())?;
        let c = tape.constant(t);
        self.mlp.forward(tape, params, c)
    }
}
