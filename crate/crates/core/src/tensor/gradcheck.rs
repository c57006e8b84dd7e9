//! Central finite-difference verification of analytic gradients.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Perturbation step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor for the relative error so that entries whose true
    /// gradient vanishes are judged on absolute error instead.
    pub denom_floor: f64,
    /// One-sided difference quotients disagreeing by more than this (relative)
    /// mark a non-differentiable point; such entries are excluded.
    pub kink_tol: f64,
    /// Evenly spaced subset of entries per parameter; `None` checks all.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, denom_floor: 1e-6, kink_tol: 1e-2, max_entries_per_param: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_err: f64,
    /// Flat indices whose relative error exceeded the tolerance.
    pub failures: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures.is_empty())
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

fn eval<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    if tape.value(out).len() != 1 {
        return Err(Error::InvalidCheck("function must return a scalar".into()));
    }
    Ok(tape.scalar_value(out))
}

/// Compares `d f / d p` from one reverse sweep against central differences
/// `(f(p + h) - f(p - h)) / 2h` for every trainable parameter entry.
pub fn finite_diff_check<F>(f: F, params: &mut ParamSet, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    if cfg.h.is_nan() || cfg.h <= 0.0 {
        return Err(Error::InvalidCheck("step h must be positive".into()));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let base = tape.scalar_value(out);
    if eval(&f, params)?.to_bits() != base.to_bits() {
        return Err(Error::InvalidCheck("function is not deterministic".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = tape.param_grads(&grads, params);
    drop(tape);

    let ids: Vec<_> = params.ids().collect();
    let mut report = GradCheckReport { tol: cfg.tol, params: Vec::new() };
    for (id, ana) in ids.into_iter().zip(analytic) {
        if !params.get(id).requires_grad() {
            continue;
        }
        let n = params.get(id).numel();
        let entries: Vec<usize> = match cfg.max_entries_per_param {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            checked: 0,
            excluded: 0,
            max_rel_err: 0.0,
            failures: Vec::new(),
        };
        for i in entries {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + cfg.h;
            let plus = eval(&f, params);
            params.get_mut(id).data_mut()[i] = orig - cfg.h;
            let minus = eval(&f, params);
            params.get_mut(id).data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            let fwd = (plus - base) / cfg.h;
            let bwd = (base - minus) / cfg.h;
            if (fwd - bwd).abs() > cfg.kink_tol * fwd.abs().max(bwd.abs()).max(1.0) {
                check.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let denom = ana[i].abs().max(numeric.abs()).max(cfg.denom_floor);
            let rel = (ana[i] - numeric).abs() / denom;
            check.checked += 1;
            check.max_rel_err = check.max_rel_err.max(rel);
            if rel > cfg.tol {
                check.failures.push(i);
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
