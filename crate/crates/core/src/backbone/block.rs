use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{ParamBuilder, ParamSet};
use crate::tensor::{Tape, Var};

/// Multi-head self-attention over the rows of an `[N, C]` token matrix.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{dim} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(b, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(b, &format!("{name}.proj"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let dim = self.proj.d_in;
        let hd = dim / self.heads;
        let qkv = self.qkv.forward(tape, params, x)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = tape.slice_cols(qkv, h * hd, (h + 1) * hd)?;
            let k = tape.slice_cols(qkv, dim + h * hd, dim + (h + 1) * hd)?;
            let v = tape.slice_cols(qkv, 2 * dim + h * hd, 2 * dim + (h + 1) * hd)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(attn, v)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.proj.forward(tape, params, merged)
    }
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim)?,
            attn: SelfAttention::new(b, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim)?,
            ffn: Mlp::new(b, &format!("{name}.ffn"), dim, dim * mlp_ratio, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, params, x)?;
        let h = self.attn.forward(tape, params, h)?;
        let x = tape.add(x, h)?;
        let h = self.ln2.forward(tape, params, x)?;
        let h = self.ffn.forward(tape, params, h)?;
        tape.add(x, h)
    }
}
