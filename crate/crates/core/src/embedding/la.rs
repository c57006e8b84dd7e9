//! Two-branch local attention gate.
//!
//! For features `x` with `C` channels over `L` positions, the average- and
//! max-pooled channel descriptors each pass through a 1-D convolution that
//! slides along the channel axis (odd window), group normalization and a
//! sigmoid. The two gates are summed and multiplied back into `x` channel
//! by channel, so the output keeps the input's shape.

use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId, ParamSet};
use crate::tensor::{PoolMode, Tape, Var};

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaConfig {
    /// Convolution window over channels; must be odd.
    pub window: usize,
    /// Group normalization group count.
    pub groups: usize,
    /// Average-pool branch (`W_x`).
    pub use_avg: bool,
    /// Max-pool branch (`W_y`).
    pub use_max: bool,
}

impl Default for LaConfig {
    fn default() -> Self {
        Self { window: 5, groups: 32, use_avg: true, use_max: true }
    }
}

impl LaConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("attention window must be odd, got {}", self.window)));
        }
        if self.groups == 0 || !channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!("{channels} channels not divisible into {} groups", self.groups)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Branch {
    kernel: ParamId,
    bias: ParamId,
    gn_scale: ParamId,
    gn_shift: ParamId,
}

impl Branch {
    fn new(b: &mut ParamBuilder, name: &str, channels: usize, window: usize) -> Result<Self> {
        Ok(Self {
            kernel: b.uniform(&format!("{name}.kernel"), &[window], 1.0 / (window as f64).sqrt())?,
            bias: b.constant(&format!("{name}.bias"), &[1], 0.0)?,
            gn_scale: b.constant(&format!("{name}.gn_scale"), &[channels], 1.0)?,
            gn_shift: b.constant(&format!("{name}.gn_shift"), &[channels], 0.0)?,
        })
    }

    /// `sigmoid(GN(conv(pool(x))))` for `x: [M, L, C]`, giving `[M, C]`.
    fn gate(&self, tape: &mut Tape, params: &ParamSet, x: Var, mode: PoolMode, groups: usize) -> Result<Var> {
        let pooled = tape.pool(x, 1, mode)?;
        let k = tape.param(params, self.kernel);
        let b = tape.param(params, self.bias);
        let conv = tape.conv_channel(pooled, k, b, 1)?;
        let sc = tape.param(params, self.gn_scale);
        let sh = tape.param(params, self.gn_shift);
        let normed = tape.group_norm(conv, 1, groups, sc, sh, GROUP_NORM_EPS)?;
        tape.sigmoid(normed)
    }
}

#[derive(Clone, Debug)]
pub struct LocalAttention {
    pub channels: usize,
    pub cfg: LaConfig,
    avg: Branch,
    max: Branch,
}

impl LocalAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, cfg: LaConfig) -> Result<Self> {
        cfg.validate(channels)?;
        Ok(Self {
            channels,
            cfg,
            avg: Branch::new(b, &format!("{name}.avg"), channels, cfg.window)?,
            max: Branch::new(b, &format!("{name}.max"), channels, cfg.window)?,
        })
    }

    /// Combined gate `[M, C]`, or `None` when both branches are switched off.
    pub fn gate(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Option<Var>> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != self.channels {
            return Err(Error::Dimension(format!("attention gate expects [M, L, {}], got {s:?}", self.channels)));
        }
        let mut gate = None;
        if self.cfg.use_avg {
            gate = Some(self.avg.gate(tape, params, x, PoolMode::Avg, self.cfg.groups)?);
        }
        if self.cfg.use_max {
            let wy = self.max.gate(tape, params, x, PoolMode::Max, self.cfg.groups)?;
            gate = Some(match gate {
                Some(wx) => tape.add(wx, wy)?,
                None => wy,
            });
        }
        Ok(gate)
    }

    /// Gates channel-last features `x: [M, L, C]`. With both branches off the
    /// module is bypassed entirely.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let Some(gate) = self.gate(tape, params, x)? else {
            return Ok(x);
        };
        let (m, c) = (tape.shape(x)[0], self.channels);
        let gate = tape.reshape(gate, &[m, 1, c])?;
        tape.mul(x, gate)
    }
}

/// Gate a single `C x L` feature map.
pub fn la_forward(tape: &mut Tape, params: &ParamSet, la: &LocalAttention, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 {
        return Err(Error::Dimension(format!("expected a C x L map, got {s:?}")));
    }
    let t = tape.transpose(x)?;
    let t = tape.reshape(t, &[1, s[1], s[0]])?;
    let y = la.forward(tape, params, t)?;
    let y = tape.reshape(y, &[s[1], s[0]])?;
    tape.transpose(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(channels: usize, cfg: LaConfig) -> (LocalAttention, ParamSet) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let la =
            LocalAttention::new(&mut ParamBuilder { params: &mut params, rng: &mut rng }, "la", channels, cfg).unwrap();
        (la, params)
    }

    fn feature_map(c: usize, l: usize) -> Tensor {
        Tensor::new(&[c, l], (0..c * l).map(|i| ((i * 7919) % 113) as f64 / 50.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn zeroed_convolutions_give_identity() {
        let (la, mut params) = build(96, LaConfig::default());
        let ids: Vec<_> = params.iter().filter(|(_, n, _)| n.ends_with("kernel")).map(|(id, _, _)| id).collect();
        for id in ids {
            params.get_mut(id).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(feature_map(96, 7));
        let y = la_forward(&mut tape, &params, &la, x).unwrap();
        assert_eq!(tape.shape(y), &[96, 7]);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn gate_range_and_shape() {
        let (la, params) = build(96, LaConfig::default());
        let mut tape = Tape::new();
        let x = tape.constant(feature_map(96, 16));
        let y = la_forward(&mut tape, &params, &la, x).unwrap();
        assert_eq!(tape.shape(y), &[96, 16]);
        let t = tape.transpose(x).unwrap();
        let t = tape.reshape(t, &[1, 16, 96]).unwrap();
        let g = la.gate(&mut tape, &params, t).unwrap().unwrap();
        assert!(tape.value(g).iter().all(|&v| v > 0.0 && v < 2.0));
    }

    #[test]
    fn branch_toggles() {
        let x = feature_map(8, 5);
        let run = |use_avg, use_max| {
            let (la, params) = build(8, LaConfig { window: 3, groups: 2, use_avg, use_max });
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = la_forward(&mut tape, &params, &la, xv).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(false, false), x.data());
        let both = run(true, true);
        let avg = run(true, false);
        let max = run(false, true);
        for i in 0..both.len() {
            assert!((both[i] - (avg[i] + max[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_groups_and_window() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ParamBuilder { params: &mut params, rng: &mut rng };
        assert!(matches!(LocalAttention::new(&mut b, "a", 48, LaConfig::default()), Err(Error::Config(_))));
        let even = LaConfig { window: 4, ..LaConfig::default() };
        assert!(matches!(LocalAttention::new(&mut b, "b", 64, even), Err(Error::Config(_))));
    }
}
