//! Small layer building blocks shared by the embedding, backbone and heads.

use crate::error::Result;
use crate::params::{ParamBuilder, ParamId, ParamSet};
use crate::tensor::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = b.uniform(&format!("{name}.weight"), &[d_in, d_out], bound)?;
        let bias = b.constant(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: b.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Two linear layers with GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), d_in, hidden)?,
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, d_out)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, params, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, params, h)
    }
}
