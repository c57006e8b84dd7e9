use super::sampling::{farthest_point_sample, knn_indices, NeighborTable};
use super::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Progressively downsampled point sets `P_0 .. P_S` with, for every scale
/// `i >= 1`, the table linking each scale-`i` center to its `k_i` nearest
/// points of scale `i - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePyramid {
    levels: Vec<Vec<Point>>,
    sampled: Vec<Vec<usize>>,
    neighbors: Vec<NeighborTable>,
}

impl ScalePyramid {
    /// Number of scales `S` (level 0, the input, is not counted).
    pub fn num_scales(&self) -> usize {
        self.neighbors.len()
    }

    /// Points of scale `i`, `0 <= i <= S`.
    pub fn points(&self, i: usize) -> &[Point] {
        &self.levels[i]
    }

    /// Neighbor table `I_i` for `1 <= i <= S`; entries index into scale `i - 1`.
    pub fn neighbors(&self, i: usize) -> &NeighborTable {
        &self.neighbors[i - 1]
    }

    /// Indices into scale `i - 1` chosen by sampling to form scale `i`.
    pub fn sampled(&self, i: usize) -> &[usize] {
        &self.sampled[i - 1]
    }

    pub fn size(&self, i: usize) -> usize {
        self.levels[i].len()
    }
}

/// `P_i = FPS(P_{i-1})` starting from index 0, `I_i = kNN(P_i, P_{i-1})`.
pub fn build_scale_pyramid(cloud: &PointCloud, sizes: &[usize], ks: &[usize]) -> Result<ScalePyramid> {
    if sizes.is_empty() || sizes.len() != ks.len() {
        return Err(Error::Config(format!("{} scale sizes but {} k values", sizes.len(), ks.len())));
    }
    let mut prev = cloud.len();
    for (i, (&n, &k)) in sizes.iter().zip(ks).enumerate() {
        if n == 0 || n > prev || (i > 0 && n == prev) {
            return Err(Error::Config(format!("scale sizes must strictly decrease from {}: {sizes:?}", cloud.len())));
        }
        if k == 0 || k > prev {
            return Err(Error::Config(format!("k_{} = {k} exceeds the {prev} points of the previous scale", i + 1)));
        }
        prev = n;
    }
    let mut levels = vec![cloud.points.clone()];
    let mut sampled = Vec::with_capacity(sizes.len());
    let mut neighbors = Vec::with_capacity(sizes.len());
    for (&n, &k) in sizes.iter().zip(ks) {
        let parent = levels.last().expect("level 0 exists");
        let pick = farthest_point_sample(parent, n, 0)?;
        let centers: Vec<Point> = pick.iter().map(|&j| parent[j]).collect();
        let table = knn_indices(&centers, parent, k)?;
        sampled.push(pick);
        neighbors.push(table);
        levels.push(centers);
    }
    Ok(ScalePyramid { levels, sampled, neighbors })
}

/// Center-relative neighborhoods `P_{i-1}[I_i[c][j]] - P_i[c]` for the
/// given scale-`i` centers, shaped `[centers, k_i, 3]`.
pub fn gather_patches(pyramid: &ScalePyramid, scale: usize, centers: &[usize]) -> Result<Tensor> {
    if scale == 0 || scale > pyramid.num_scales() {
        return Err(Error::Argument(format!("scale {scale} outside 1..={}", pyramid.num_scales())));
    }
    if centers.is_empty() {
        return Err(Error::Argument("no centers to gather".into()));
    }
    let table = pyramid.neighbors(scale);
    let (parent, here) = (pyramid.points(scale - 1), pyramid.points(scale));
    let mut data = Vec::with_capacity(centers.len() * table.k * 3);
    for &c in centers {
        let ctr = *here.get(c).ok_or_else(|| Error::Argument(format!("center {c} out of range at scale {scale}")))?;
        for &j in table.row(c) {
            let p = parent[j];
            data.extend_from_slice(&[p[0] - ctr[0], p[1] - ctr[1], p[2] - ctr[2]]);
        }
    }
    Tensor::new(&[centers.len(), table.k, 3], data)
}
