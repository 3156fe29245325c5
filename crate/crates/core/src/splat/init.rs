use super::{logit, Gaussian, GaussianScene, MAX_LOG_SCALE, MIN_LOG_SCALE};
use crate::error::{Error, Result};
use crate::knn::mean_knn_distances;
use crate::stereo::{FusedPointCloud, DEFAULT_VOXEL};

pub const DEFAULT_INIT_OPACITY: f64 = 0.1;

/// One isotropic Gaussian per point, sized by the mean distance to its three
/// nearest neighbours. A point without neighbours gets the default voxel size.
pub fn init_from_cloud(cloud: &FusedPointCloud, timestamp: u32) -> Result<GaussianScene> {
    if cloud.is_empty() {
        return Err(Error::EmptyInitialization);
    }
    let opacity_logit = logit(DEFAULT_INIT_OPACITY);
    let dists = mean_knn_distances(&cloud.positions, 3);
    let gaussians = cloud
        .positions
        .iter()
        .zip(&cloud.colors)
        .zip(dists)
        .map(|((p, c), d)| {
            let d = d.filter(|d| *d > 0.0).unwrap_or(DEFAULT_VOXEL);
            Gaussian {
                position: *p,
                log_scale: [d.ln().clamp(MIN_LOG_SCALE, MAX_LOG_SCALE); 3],
                rotation: [1.0, 0.0, 0.0, 0.0],
                opacity_logit,
                color: *c,
            }
        })
        .collect();
    Ok(GaussianScene::new(gaussians, timestamp))
}
