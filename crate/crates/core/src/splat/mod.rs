//! Gaussian splat scenes: representation, projection and rendering.

mod init;
mod io;
mod raster;

pub use init::{init_from_cloud, DEFAULT_INIT_OPACITY};
pub use io::{read_egsp, write_egsp, EGSP_VERSION};
pub(crate) use raster::{project_all, sweep_tile, tile_lists};
pub use raster::{rasterize, reference_render, RenderOutput};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;

pub const NEAR_PLANE: f64 = 0.05;
pub const DILATION: f64 = 0.3;
/// Means projecting further than this fraction of the image size outside it are culled.
pub const FRUSTUM_GUARD: f64 = 0.15;
pub const ALPHA_MAX: f64 = 0.99;
pub const MAX_CONDITION: f64 = 1e12;
pub const MIN_LOG_SCALE: f64 = -13.815510557964274; // ln 1e-6
pub const MAX_LOG_SCALE: f64 = std::f64::consts::LN_10;

/// Number of scalar parameters per Gaussian, in EGSP record order.
pub const PARAMS: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    /// w, x, y, z
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl Gaussian {
    pub fn isotropic(position: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            position,
            log_scale: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn to_params(&self) -> [f64; PARAMS] {
        let mut p = [0.0; PARAMS];
        p[0..3].copy_from_slice(&self.position);
        p[3..6].copy_from_slice(&self.log_scale);
        p[6..10].copy_from_slice(&self.rotation);
        p[10] = self.opacity_logit;
        p[11..14].copy_from_slice(&self.color);
        p
    }

    pub fn from_params(p: &[f64; PARAMS]) -> Self {
        Self {
            position: [p[0], p[1], p[2]],
            log_scale: [p[3], p[4], p[5]],
            rotation: [p[6], p[7], p[8], p[9]],
            opacity_logit: p[10],
            color: [p[11], p[12], p[13]],
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    pub fn scales(&self) -> Vector3<f64> {
        Vector3::from(self.log_scale.map(f64::exp))
    }

    /// Restores the representation invariants after an unconstrained update.
    pub fn sanitize(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            self.rotation = self.rotation.map(|v| v / n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
        self.log_scale = self
            .log_scale
            .map(|v| v.clamp(MIN_LOG_SCALE, MAX_LOG_SCALE));
        self.color = self.color.map(|v| v.clamp(0.0, 1.0));
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Σ = R·diag(s)²·Rᵀ.
pub fn covariance3d(g: &Gaussian) -> Matrix3<f64> {
    let r = g.unit_rotation().to_rotation_matrix().into_inner();
    let s2 = Matrix3::from_diagonal(&g.scales().map(|s| s * s));
    r * s2 * r.transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub timestamp: u32,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian>, timestamp: u32) -> Self {
        Self {
            gaussians,
            timestamp,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub tile: usize,
    /// Contributions with alpha below this are skipped.
    pub alpha_cutoff: f64,
    /// Minimum tile-binning radius in standard deviations.
    pub gaussian_extent: f64,
    /// Compositing stops once transmittance drops below this.
    pub transmittance_floor: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            tile: 16,
            alpha_cutoff: 1.0 / 255.0,
            gaussian_extent: 3.0,
            transmittance_floor: 1e-4,
        }
    }
}

impl RenderSettings {
    pub fn with_background(mut self, bg: [f64; 3]) -> Self {
        self.background = bg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || !(self.gaussian_extent > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tile {} and extent {} must be positive",
                self.tile, self.gaussian_extent
            )));
        }
        if !(0.0..1.0).contains(&self.alpha_cutoff)
            || !(0.0..1.0).contains(&self.transmittance_floor)
        {
            return Err(Error::InvalidParameter(
                "alpha cutoff and transmittance floor must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
    /// Camera-frame mean.
    pub camera_point: Vector3<f64>,
    /// d(pixel)/d(camera point).
    pub jacobian: Matrix2x3<f64>,
}

/// EWA projection. `None` when the mean is not beyond the near plane or
/// falls outside the guard band around the image.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Option<Projected> {
    let w = cam.pose.rotation_matrix().transpose();
    let t = cam
        .pose
        .world_to_camera(&nalgebra::Point3::from(Vector3::from(g.position)));
    if t.z <= NEAR_PLANE {
        return None;
    }
    let k = &cam.intrinsics;
    let (x, y, z) = (t.x, t.y, t.z);
    let j = Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * x / (z * z),
        0.0,
        k.fy / z,
        -k.fy * y / (z * z),
    );
    let mean = Vector2::new(k.fx * x / z + k.cx, k.fy * y / z + k.cy);
    let (w_px, h_px) = (k.width as f64, k.height as f64);
    if mean.x < -FRUSTUM_GUARD * w_px
        || mean.x > (1.0 + FRUSTUM_GUARD) * w_px
        || mean.y < -FRUSTUM_GUARD * h_px
        || mean.y > (1.0 + FRUSTUM_GUARD) * h_px
    {
        return None;
    }
    let cov3 = covariance3d(g);
    let cov = j * w * cov3 * w.transpose() * j.transpose() + Matrix2::identity() * DILATION;
    Some(Projected {
        mean,
        cov,
        depth: z,
        camera_point: t,
        jacobian: j,
    })
}

/// Eigenvalues of a symmetric 2×2 matrix, largest first.
pub(crate) fn sym2_eigenvalues(m: &Matrix2<f64>) -> (f64, f64) {
    let a = m[(0, 0)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let c = m[(1, 1)];
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (mid + rad, mid - rad)
}
