//! Deterministic point-set kernels.

mod chamfer;
mod cloud;
mod mask;
mod pyramid;
mod sampling;

pub use chamfer::chamfer_l2;
pub use cloud::{Point, PointCloud};
pub use mask::{mask_and_backproject, MaskPlan};
pub use pyramid::{build_scale_pyramid, gather_patches, ScalePyramid};
pub(crate) use sampling::knn_with_dist;
pub use sampling::{farthest_point_sample, knn_indices, NeighborTable};

pub(crate) fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
