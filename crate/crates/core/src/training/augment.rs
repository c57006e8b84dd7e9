use rand::Rng;

use super::schedule::TrainConfig;
use crate::geometry::PointCloud;

/// `p <- s * p + t` with one isotropic scale and a per-axis translation.
pub fn augment_with(cloud: &PointCloud, s: f64, t: [f64; 3]) -> PointCloud {
    let points = cloud.points.iter().map(|p| [s * p[0] + t[0], s * p[1] + t[1], s * p[2] + t[2]]).collect();
    PointCloud { points, label: cloud.label }
}

/// Random scaling in `[scale_min, scale_max]` and translation in
/// `[-translate, translate]` per axis.
pub fn augment<R: Rng>(cloud: &PointCloud, cfg: &TrainConfig, rng: &mut R) -> PointCloud {
    let s = rng.random_range(cfg.scale_min..=cfg.scale_max);
    let mut t = [0.0; 3];
    for v in &mut t {
        *v = if cfg.translate > 0.0 { rng.random_range(-cfg.translate..=cfg.translate) } else { 0.0 };
    }
    augment_with(cloud, s, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud() -> PointCloud {
        PointCloud::new(vec![[0.1, 0.2, 0.3], [-0.5, 0.4, 0.0], [0.9, -0.2, 0.6]], Some(2)).unwrap()
    }

    #[test]
    fn identity_transform() {
        assert_eq!(augment_with(&cloud(), 1.0, [0.0; 3]), cloud());
    }

    #[test]
    fn seeded_and_linear_in_centroid() {
        let cfg = TrainConfig::pretrain();
        let a = augment(&cloud(), &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&cloud(), &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let (s, t) = (1.1, [0.05, -0.02, 0.1]);
        let c0 = cloud().centroid();
        let c1 = augment_with(&cloud(), s, t).centroid();
        for d in 0..3 {
            assert!((c1[d] - (s * c0[d] + t[d])).abs() < 1e-12);
        }
    }
}
