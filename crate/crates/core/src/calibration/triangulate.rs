use nalgebra::{DMatrix, Point3, Vector2};

use crate::error::{Error, Result};
use crate::geometry::Camera;

/// Triangulated point with per-view reprojection residuals (pixels).
#[derive(Debug, Clone)]
pub struct Triangulation {
    pub point: Point3<f64>,
    pub residuals: Vec<f64>,
}

/// Linear (DLT) triangulation from two or more views.
///
/// Rows are built in normalized camera coordinates, which keeps the system
/// well conditioned independent of the focal length.
pub fn triangulate(observations: &[(&Camera, Vector2<f64>)]) -> Result<Triangulation> {
    if observations.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "triangulation needs two views, got {}",
            observations.len()
        )));
    }
    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, (cam, px)) in observations.iter().enumerate() {
        let k = &cam.intrinsics;
        let x = (px.x - k.cx) / k.fx;
        let y = (px.y - k.cy) / k.fy;
        let r = cam.pose.rotation_matrix().transpose();
        let t = -(r * cam.pose.translation);
        // P = [R | t] (world to camera)
        let row = |j: usize| [r[(j, 0)], r[(j, 1)], r[(j, 2)], t[j]];
        let p0 = row(0);
        let p1 = row(1);
        let p2 = row(2);
        for c in 0..4 {
            a[(2 * i, c)] = x * p2[c] - p0[c];
            a[(2 * i + 1, c)] = y * p2[c] - p1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let sv = &svd.singular_values;
    // singular values are not guaranteed sorted
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap());
    let largest = sv[order[0]];
    let second_smallest = sv[order[order.len() - 2]];
    if largest <= 0.0 || second_smallest / largest < 1e-9 {
        return Err(Error::DegenerateRay(
            "rays are parallel or coincident".into(),
        ));
    }
    let h = v_t.row(order[order.len() - 1]);
    if h[3].abs() < 1e-12 * h.norm() {
        return Err(Error::DegenerateRay("point at infinity".into()));
    }
    let point = Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    let residuals = observations
        .iter()
        .map(|(cam, px)| (cam.project(&point).pixel - px).norm())
        .collect();
    Ok(Triangulation { point, residuals })
}
