use super::schedule::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// AdamW moment buffers and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, beta1, beta2, eps, weight_decay }
    }

    pub fn from_config(params: &ParamSet, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }
}

/// One decoupled-weight-decay Adam update on every trainable parameter:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
///
/// Gradients are checked before anything is modified, so a rejected step
/// leaves both parameters and state untouched.
pub fn adamw_step(params: &mut ParamSet, grads: &[Vec<f64>], state: &mut OptimState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Dimension("optimizer state does not match the parameter set".into()));
    }
    for ((id, name, t), g) in params.iter().zip(grads) {
        if g.len() != t.numel() {
            return Err(Error::Dimension(format!("gradient for {name} has wrong length")));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} (param {id:?}, entry {i}) = {}", g[i])));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        if !params.get(id).requires_grad() {
            continue;
        }
        let (m, v, g) = (&mut state.m[k], &mut state.v[k], &grads[k]);
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (vhat.sqrt() + state.eps) + state.weight_decay * p[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w", Tensor::new(&[1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one_param(1.0);
        let mut st = OptimState::new(&p, 0.9, 0.999, 1e-8, 0.0);
        adamw_step(&mut p, &[vec![1.0]], &mut st, 0.1).unwrap();
        let delta = p.by_name("w").unwrap().data()[0] - 1.0;
        assert!((delta + 0.1).abs() < 1e-8, "{delta}");
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = one_param(0.37);
        let mut st = OptimState::new(&p, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..5 {
            adamw_step(&mut p, &[vec![0.0]], &mut st, 0.1).unwrap();
        }
        assert_eq!(p.by_name("w").unwrap().data()[0], 0.37);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = one_param(1.0);
        let mut st = OptimState::new(&p, 0.9, 0.999, 1e-8, 0.05);
        let err = adamw_step(&mut p, &[vec![f64::NAN]], &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains('w')));
        assert_eq!(st.t, 0);
        assert_eq!(p.by_name("w").unwrap().data()[0], 1.0);
    }
}
