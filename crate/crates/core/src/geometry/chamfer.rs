use super::{sq_dist, Point};
use crate::error::{Error, Result};

/// Symmetric l2 Chamfer distance: mean squared distance from each predicted
/// point to its nearest true point plus the same from truth to prediction.
/// See [`crate::tensor::Tape::chamfer`] for the differentiable form.
pub fn chamfer_l2(pred: &[Point], truth: &[Point]) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::Argument("chamfer distance of an empty set".into()));
    }
    let one_way = |from: &[Point], to: &[Point]| {
        from.iter().map(|p| to.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>()
            / from.len() as f64
    };
    Ok(one_way(pred, truth) + one_way(truth, pred))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(chamfer_l2(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert_eq!(chamfer_l2(&[[0.0; 3], [2.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert_eq!(chamfer_l2(&[[0.3, 0.1, 0.2]], &[[0.3, 0.1, 0.2]]).unwrap(), 0.0);
        assert!(chamfer_l2(&[], &[[0.0; 3]]).is_err());
    }
}
