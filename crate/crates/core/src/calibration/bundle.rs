//! Levenberg–Marquardt bundle adjustment over camera extrinsics and 3D
//! points, solved through the Schur complement on the camera block.

use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix3, Point3, SMatrix, SVector, UnitQuaternion, Vector2,
    Vector3,
};

use crate::geometry::{Camera, Intrinsics, Pose};

type Matrix2x6 = SMatrix<f64, 2, 6>;
type Matrix6x3 = SMatrix<f64, 6, 3>;
type Vector6 = SVector<f64, 6>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaObservation {
    pub camera: usize,
    pub point: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct BaOptions {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
    pub initial_lambda: f64,
    /// Mean residual (px) above which a run that hits the iteration cap is flagged.
    pub convergence_threshold_px: f64,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            relative_tolerance: 1e-10,
            initial_lambda: 1e-3,
            convergence_threshold_px: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaResult {
    pub cameras: Vec<Camera>,
    pub points: Vec<Point3<f64>>,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// World-to-camera extrinsics used internally by the solver.
#[derive(Debug, Clone, Copy)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn from_pose(pose: &Pose) -> Self {
        let rotation = pose.rotation_matrix().transpose();
        Self {
            rotation,
            translation: -(rotation * pose.translation),
        }
    }

    pub fn to_pose(&self) -> Pose {
        let r = self.rotation.transpose();
        Pose::from_rotation_matrix(&r, -(r * self.translation))
    }

    /// Left-multiplicative rotation update followed by additive translation.
    pub fn retract(&self, delta: &Vector6) -> Self {
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        let dr = UnitQuaternion::from_scaled_axis(w)
            .to_rotation_matrix()
            .into_inner();
        Self {
            rotation: dr * self.rotation,
            translation: self.translation + Vector3::new(delta[3], delta[4], delta[5]),
        }
    }
}

/// Residual `projection - observed` and its Jacobians with respect to the
/// camera update (rotation, translation) and the point.
pub fn residual_and_jacobians(
    k: &Intrinsics,
    ext: &Extrinsics,
    point: &Point3<f64>,
    observed: &Vector2<f64>,
) -> (Vector2<f64>, Matrix2x6, Matrix2x3<f64>) {
    let rx = ext.rotation * point.coords;
    let xc = rx + ext.translation;
    let iz = 1.0 / xc.z;
    let u = k.fx * xc.x * iz + k.cx;
    let v = k.fy * xc.y * iz + k.cy;
    let dproj = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * xc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * xc.y * iz * iz,
    );
    let skew = -rx.cross_matrix();
    let j_rot = dproj * skew;
    let mut j_cam = Matrix2x6::zeros();
    j_cam.fixed_view_mut::<2, 3>(0, 0).copy_from(&j_rot);
    j_cam.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
    let j_pt = dproj * ext.rotation;
    (Vector2::new(u - observed.x, v - observed.y), j_cam, j_pt)
}

fn total_cost(
    intr: &[Intrinsics],
    ext: &[Extrinsics],
    points: &[Point3<f64>],
    obs: &[BaObservation],
) -> f64 {
    obs.iter()
        .map(|o| {
            let xc = ext[o.camera].rotation * points[o.point].coords + ext[o.camera].translation;
            let u = intr[o.camera].fx * xc.x / xc.z + intr[o.camera].cx;
            let v = intr[o.camera].fy * xc.y / xc.z + intr[o.camera].cy;
            (u - o.pixel.x).powi(2) + (v - o.pixel.y).powi(2)
        })
        .sum()
}

/// Minimizes total squared reprojection error. The camera at `reference`
/// is held fixed and returned bit-identical.
pub fn bundle_adjust(
    cameras: &[Camera],
    reference: usize,
    points: &[Point3<f64>],
    observations: &[BaObservation],
    options: &BaOptions,
) -> BaResult {
    let intr: Vec<Intrinsics> = cameras.iter().map(|c| c.intrinsics).collect();
    let mut ext: Vec<Extrinsics> = cameras
        .iter()
        .map(|c| Extrinsics::from_pose(&c.pose))
        .collect();
    let mut pts = points.to_vec();
    // camera index -> block index in the reduced system
    let block: Vec<Option<usize>> = {
        let mut next = 0;
        (0..cameras.len())
            .map(|i| {
                if i == reference {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect()
    };
    let nblocks = cameras.len().saturating_sub(1);
    let mut obs_by_point: Vec<Vec<usize>> = vec![Vec::new(); pts.len()];
    for (i, o) in observations.iter().enumerate() {
        obs_by_point[o.point].push(i);
    }

    let mut cost = total_cost(&intr, &ext, &pts, observations);
    let mut history = vec![cost];
    let mut lambda = options.initial_lambda;
    let mut iterations = 0;
    let mut converged = false;
    let tiny = 1e-24 * observations.len().max(1) as f64;

    while iterations < options.max_iterations {
        iterations += 1;
        if cost <= tiny {
            converged = true;
            break;
        }
        // normal equations: H delta = b with b = -J^T r
        let mut u = DMatrix::<f64>::zeros(6 * nblocks, 6 * nblocks);
        let mut bc = DVector::<f64>::zeros(6 * nblocks);
        let mut v: Vec<Matrix3<f64>> = vec![Matrix3::zeros(); pts.len()];
        let mut bp: Vec<Vector3<f64>> = vec![Vector3::zeros(); pts.len()];
        // per observation W block (6x3), only for free cameras
        let mut w: Vec<Matrix6x3> = vec![Matrix6x3::zeros(); observations.len()];
        for (oi, o) in observations.iter().enumerate() {
            let (r, jc, jp) =
                residual_and_jacobians(&intr[o.camera], &ext[o.camera], &pts[o.point], &o.pixel);
            v[o.point] += jp.transpose() * jp;
            bp[o.point] -= jp.transpose() * r;
            if let Some(b) = block[o.camera] {
                let mut ub = u.view_mut((6 * b, 6 * b), (6, 6));
                ub += jc.transpose() * jc;
                let mut bb = bc.rows_mut(6 * b, 6);
                bb -= jc.transpose() * r;
                w[oi] = jc.transpose() * jp;
            }
        }
        // Marquardt damping
        for i in 0..6 * nblocks {
            u[(i, i)] *= 1.0 + lambda;
        }
        let mut v_inv = Vec::with_capacity(pts.len());
        let mut singular = false;
        for vj in &v {
            let mut d = *vj;
            for i in 0..3 {
                d[(i, i)] *= 1.0 + lambda;
            }
            match d.try_inverse() {
                Some(inv) => v_inv.push(inv),
                None => {
                    singular = true;
                    v_inv.push(Matrix3::zeros());
                }
            }
        }
        let mut s = u.clone();
        let mut rhs = bc.clone();
        if !singular {
            for (j, list) in obs_by_point.iter().enumerate() {
                let free: Vec<(usize, usize)> = list
                    .iter()
                    .filter_map(|&oi| block[observations[oi].camera].map(|b| (oi, b)))
                    .collect();
                for &(oa, ba) in &free {
                    let wv = w[oa] * v_inv[j];
                    let mut rb = rhs.rows_mut(6 * ba, 6);
                    rb -= wv * bp[j];
                    for &(ob, bb) in &free {
                        let mut sb = s.view_mut((6 * ba, 6 * bb), (6, 6));
                        sb -= wv * w[ob].transpose();
                    }
                }
            }
        }
        let step = if singular {
            None
        } else if nblocks == 0 {
            Some(DVector::zeros(0))
        } else {
            s.cholesky().map(|c| c.solve(&rhs))
        };
        let Some(dc) = step else {
            lambda *= 10.0;
            continue;
        };
        let new_ext: Vec<Extrinsics> = ext
            .iter()
            .enumerate()
            .map(|(i, e)| match block[i] {
                Some(b) => e.retract(&Vector6::from_column_slice(dc.rows(6 * b, 6).as_slice())),
                None => *e,
            })
            .collect();
        let new_pts: Vec<Point3<f64>> = pts
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let mut r = bp[j];
                for &oi in &obs_by_point[j] {
                    if let Some(b) = block[observations[oi].camera] {
                        let dcb = Vector6::from_column_slice(dc.rows(6 * b, 6).as_slice());
                        r -= w[oi].transpose() * dcb;
                    }
                }
                p + v_inv[j] * r
            })
            .collect();
        let new_cost = total_cost(&intr, &new_ext, &new_pts, observations);
        if new_cost.is_finite() && new_cost < cost {
            let rel = (cost - new_cost) / cost;
            ext = new_ext;
            pts = new_pts;
            cost = new_cost;
            history.push(cost);
            lambda = (lambda / 10.0).max(1e-12);
            if rel < options.relative_tolerance {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                // no descent direction left at machine precision
                converged = true;
                break;
            }
        }
    }

    let mean_residual = mean_reprojection(&intr, &ext, &pts, observations);
    if !converged && mean_residual <= options.convergence_threshold_px {
        converged = true;
    }
    let cameras = cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == reference {
                c.clone()
            } else {
                Camera::new(c.id.clone(), c.intrinsics, ext[i].to_pose())
            }
        })
        .collect();
    BaResult {
        cameras,
        points: pts,
        cost_history: history,
        iterations,
        converged,
    }
}

fn mean_reprojection(
    intr: &[Intrinsics],
    ext: &[Extrinsics],
    points: &[Point3<f64>],
    obs: &[BaObservation],
) -> f64 {
    if obs.is_empty() {
        return 0.0;
    }
    obs.iter()
        .map(|o| {
            residual_and_jacobians(&intr[o.camera], &ext[o.camera], &points[o.point], &o.pixel)
                .0
                .norm()
        })
        .sum::<f64>()
        / obs.len() as f64
}

/// Per-observation reprojection residual norms (pixels).
pub fn reprojection_residuals(
    cameras: &[Camera],
    points: &[Point3<f64>],
    obs: &[BaObservation],
) -> Vec<f64> {
    obs.iter()
        .map(|o| (cameras[o.camera].project(&points[o.point]).pixel - o.pixel).norm())
        .collect()
}
