use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Ordered 3-D point set with an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, label: Option<usize>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("point cloud must contain at least one point".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud coordinates".into()));
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.map(|v| v / n)
    }

    /// Centers on the centroid and scales so the farthest point sits on the
    /// unit sphere. A single-point (zero radius) cloud is only centered.
    pub fn normalized(&self) -> Self {
        let c = self.centroid();
        let mut pts: Vec<Point> = self.points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
        let r = pts.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
        if r > 0.0 {
            for p in &mut pts {
                for v in p.iter_mut() {
                    *v /= r;
                }
            }
        }
        Self { points: pts, label: self.label }
    }

    pub fn translated(&self, t: Point) -> Self {
        let points = self.points.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
        Self { points, label: self.label }
    }

    /// Keeps the first `n` points (all of them if the cloud is smaller).
    pub fn truncated(&self, n: usize) -> Self {
        Self { points: self.points[..n.min(self.points.len())].to_vec(), label: self.label }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_centers_and_bounds() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0], [3.0, 2.0, 3.0], [2.0, 5.0, 3.0]], None).unwrap();
        let n = c.normalized();
        let cen = n.centroid();
        assert!(cen.iter().all(|v| v.abs() < 1e-9));
        let rmax = n.points.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
        assert!((rmax - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(PointCloud::new(vec![], None).is_err());
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]], None).is_err());
    }
}
