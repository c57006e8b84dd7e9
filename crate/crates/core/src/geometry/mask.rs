use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ScalePyramid;
use crate::error::{Error, Result};

/// Per-scale partition of point indices into visible and masked sets.
/// Both lists are sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub mask_ratio: f64,
    visible: Vec<Vec<usize>>,
    masked: Vec<Vec<usize>>,
}

impl MaskPlan {
    /// Everything visible at every scale.
    pub fn unmasked(pyramid: &ScalePyramid) -> Self {
        let s = pyramid.num_scales();
        Self {
            mask_ratio: 0.0,
            visible: (1..=s).map(|i| (0..pyramid.size(i)).collect()).collect(),
            masked: vec![Vec::new(); s],
        }
    }

    pub fn num_scales(&self) -> usize {
        self.visible.len()
    }

    /// Visible indices at scale `i`, `1 <= i <= S`.
    pub fn visible(&self, i: usize) -> &[usize] {
        &self.visible[i - 1]
    }

    pub fn masked(&self, i: usize) -> &[usize] {
        &self.masked[i - 1]
    }

    /// `lookup[j]` is the position of point `j` in the visible list of
    /// scale `i`, if visible.
    pub fn visible_positions(&self, i: usize, n: usize) -> Vec<Option<usize>> {
        let mut pos = vec![None; n];
        for (p, &j) in self.visible(i).iter().enumerate() {
            pos[j] = Some(p);
        }
        pos
    }
}

/// Masks `floor(ratio * N_S)` uniformly chosen final-scale centers and
/// back-projects: for `i = S-1 .. 1` the visible set of scale `i` is the
/// union of the neighbor rows `I_{i+1}` of the visible scale-`i+1` centers.
///
/// A zero ratio hides nothing and leaves every scale fully visible.
pub fn mask_and_backproject(pyramid: &ScalePyramid, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Argument(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let s = pyramid.num_scales();
    let n_s = pyramid.size(s);
    let n_masked = (ratio * n_s as f64).floor() as usize;
    if n_masked == 0 {
        let mut plan = MaskPlan::unmasked(pyramid);
        plan.mask_ratio = ratio;
        return Ok(plan);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_masked = vec![false; n_s];
    for j in rand::seq::index::sample(&mut rng, n_s, n_masked) {
        is_masked[j] = true;
    }
    let mut visible = vec![Vec::new(); s];
    let mut masked = vec![Vec::new(); s];
    let split = |flags: &[bool]| -> (Vec<usize>, Vec<usize>) { (0..flags.len()).partition(|&j| !flags[j]) };
    let (v, m) = split(&is_masked);
    visible[s - 1] = v;
    masked[s - 1] = m;
    for i in (1..s).rev() {
        let mut seen = vec![false; pyramid.size(i)];
        let table = pyramid.neighbors(i + 1);
        for &c in &visible[i] {
            for &j in table.row(c) {
                seen[j] = true;
            }
        }
        let hidden: Vec<bool> = seen.iter().map(|v| !v).collect();
        let (v, m) = split(&hidden);
        visible[i - 1] = v;
        masked[i - 1] = m;
    }
    Ok(MaskPlan { mask_ratio: ratio, visible, masked })
}
