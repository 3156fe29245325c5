use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::splat::{
    project_all, project_gaussian, sigmoid, sweep_tile, tile_lists, Gaussian, GaussianScene,
    RenderSettings, ALPHA_MAX, PARAMS,
};

/// Screen-space gradient of one splat: mean (2), conic (3), opacity, color (3).
type Grad2d = [f64; 9];

struct Entry {
    k: u32,
    pixel: u32,
    alpha: f64,
    g: f64,
    t: f64,
    clamped: bool,
}

/// Reverse-mode gradients of the rendered color with respect to every
/// Gaussian parameter, given d(loss)/d(color) per pixel (interleaved RGB).
/// Gaussians that are culled or skipped get zero gradients.
pub fn backward(
    scene: &GaussianScene,
    cam: &Camera,
    settings: &RenderSettings,
    d_image: &[f64],
) -> Result<Vec<[f64; PARAMS]>> {
    settings.validate()?;
    let (w, h) = (cam.width(), cam.height());
    if d_image.len() != w * h * 3 {
        return Err(Error::ShapeMismatch(format!(
            "image gradient has {} values for a {w}x{h} camera",
            d_image.len()
        )));
    }
    let mut grads = vec![[0.0; PARAMS]; scene.len()];
    let splats = project_all(scene, cam, settings);
    if splats.is_empty() {
        return Ok(grads);
    }
    let grid = tile_lists(&splats, w, h, settings.tile);
    let bg = settings.background;

    let per_tile: Vec<Vec<(u32, Grad2d)>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &grid.lists[t];
            let mut local = vec![[0.0; 9]; list.len()];
            let (x0, y0, x1, y1) = grid.bounds(t, w, h);
            let tile_splats: Vec<_> = list.iter().map(|&k| splats[k as usize]).collect();
            let tw = x1 - x0;
            let n = tw * (y1 - y0);
            let gp_at = |x: usize, y: usize| {
                let pix = (y * w + x) * 3;
                [d_image[pix], d_image[pix + 1], d_image[pix + 2]]
            };
            // forward replay, identical to the rasterizer; entries land in
            // sweep order, so walking them backwards visits each pixel back to front
            let mut entries: Vec<Entry> = Vec::new();
            let mut tr = vec![1.0; n];
            let mut done: Vec<bool> = (0..n)
                .map(|i| gp_at(x0 + i % tw, y0 + i / tw) == [0.0; 3])
                .collect();
            sweep_tile(&tile_splats, (x0, y0, x1, y1), &mut done, |k, x, y| {
                let i = (y - y0) * tw + x - x0;
                let s = &tile_splats[k];
                if let Some((a, g)) = s.visible_alpha(x as f64, y as f64, settings.alpha_cutoff) {
                    entries.push(Entry {
                        k: k as u32,
                        pixel: i as u32,
                        alpha: a,
                        g,
                        t: tr[i],
                        clamped: s.opacity * g > ALPHA_MAX,
                    });
                    tr[i] *= 1.0 - a;
                }
                tr[i] < settings.transmittance_floor
            });
            let mut behind = vec![bg; n];
            for e in entries.iter().rev() {
                let i = e.pixel as usize;
                let (x, y) = (x0 + i % tw, y0 + i / tw);
                let gp = gp_at(x, y);
                let behind = &mut behind[i];
                let s = &tile_splats[e.k as usize];
                let acc = &mut local[e.k as usize];
                let wgt = e.alpha * e.t;
                let mut d_alpha = 0.0;
                for c in 0..3 {
                    acc[6 + c] += wgt * gp[c];
                    d_alpha += e.t * (s.color[c] - behind[c]) * gp[c];
                    behind[c] = e.alpha * s.color[c] + (1.0 - e.alpha) * behind[c];
                }
                if e.clamped {
                    continue;
                }
                acc[5] += d_alpha * e.g;
                let dq = -0.5 * e.alpha * d_alpha;
                let dx = x as f64 - s.mean[0];
                let dy = y as f64 - s.mean[1];
                let [ca, cb, cc] = s.conic;
                acc[0] += dq * -2.0 * (ca * dx + cb * dy);
                acc[1] += dq * -2.0 * (cb * dx + cc * dy);
                acc[2] += dq * dx * dx;
                acc[3] += dq * 2.0 * dx * dy;
                acc[4] += dq * dy * dy;
            }
            list.iter()
                .zip(local)
                .filter(|(_, g)| g.iter().any(|v| *v != 0.0))
                .map(|(&si, g)| (si, g))
                .collect()
        })
        .collect();

    // fixed reduction order: tiles in raster order
    let mut screen = vec![[0.0; 9]; splats.len()];
    for tile in per_tile {
        for (si, g) in tile {
            let acc = &mut screen[si as usize];
            for i in 0..9 {
                acc[i] += g[i];
            }
        }
    }

    let wmat = cam.pose.rotation_matrix().transpose();
    let chained: Vec<(usize, [f64; PARAMS])> = splats
        .par_iter()
        .zip(screen.par_iter())
        .filter(|(_, g)| g.iter().any(|v| *v != 0.0))
        .map(|(s, g2)| {
            let gi = s.index as usize;
            (gi, chain(&scene.gaussians[gi], cam, &wmat, s.conic, g2))
        })
        .collect();
    for (gi, g) in chained {
        grads[gi] = g;
    }
    Ok(grads)
}

/// Carries screen-space gradients back to the 3D parameters.
fn chain(
    g: &Gaussian,
    cam: &Camera,
    wmat: &Matrix3<f64>,
    conic: [f64; 3],
    g2: &Grad2d,
) -> [f64; PARAMS] {
    let p = project_gaussian(g, cam).expect("drawable splats are in front");
    let k = &cam.intrinsics;
    let mut out = [0.0; PARAMS];

    // conic -> 2D covariance: d(A⁻¹) = −A dA A
    let a = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
    let g_a = Matrix2::new(g2[2], 0.5 * g2[3], 0.5 * g2[3], g2[4]);
    let g_cov2 = -(a * g_a * a);

    let j: Matrix2x3<f64> = p.jacobian;
    let sigma = crate::splat::covariance3d(g);
    let m = wmat * sigma * wmat.transpose();
    let g_m = j.transpose() * g_cov2 * j;
    let g_j = 2.0 * g_cov2 * j * m;
    let g_sigma = wmat.transpose() * g_m * wmat;

    let (x, y, z) = (p.camera_point.x, p.camera_point.y, p.camera_point.z);
    let z2 = z * z;
    let z3 = z2 * z;
    let g_mean = Vector2::new(g2[0], g2[1]);
    let mut g_t: Vector3<f64> = j.transpose() * g_mean;
    g_t.x += g_j[(0, 2)] * (-k.fx / z2);
    g_t.y += g_j[(1, 2)] * (-k.fy / z2);
    g_t.z += g_j[(0, 0)] * (-k.fx / z2)
        + g_j[(0, 2)] * (2.0 * k.fx * x / z3)
        + g_j[(1, 1)] * (-k.fy / z2)
        + g_j[(1, 2)] * (2.0 * k.fy * y / z3);
    let g_pos = wmat.transpose() * g_t;
    out[0..3].copy_from_slice(g_pos.as_slice());

    // Σ = R S² Rᵀ
    let [qw, qx, qy, qz] = g.rotation;
    let qn = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
    let (w, xq, yq, zq) = (qw / qn, qx / qn, qy / qn, qz / qn);
    let r = g.unit_rotation().to_rotation_matrix().into_inner();
    let s = g.scales();
    for i in 0..3 {
        let col = r.column(i);
        out[3 + i] = 2.0 * s[i] * s[i] * (col.transpose() * g_sigma * col)[(0, 0)];
    }
    let s2 = Matrix3::from_diagonal(&s.map(|v| v * v));
    let gr = 2.0 * g_sigma * r * s2;
    let dq = [
        2.0 * (-zq * gr[(0, 1)] + yq * gr[(0, 2)] + zq * gr[(1, 0)]
            - xq * gr[(1, 2)]
            - yq * gr[(2, 0)]
            + xq * gr[(2, 1)]),
        2.0 * (yq * gr[(0, 1)] + zq * gr[(0, 2)] + yq * gr[(1, 0)]
            - 2.0 * xq * gr[(1, 1)]
            - w * gr[(1, 2)]
            + zq * gr[(2, 0)]
            + w * gr[(2, 1)]
            - 2.0 * xq * gr[(2, 2)]),
        2.0 * (-2.0 * yq * gr[(0, 0)]
            + xq * gr[(0, 1)]
            + w * gr[(0, 2)]
            + xq * gr[(1, 0)]
            + zq * gr[(1, 2)]
            - w * gr[(2, 0)]
            + zq * gr[(2, 1)]
            - 2.0 * yq * gr[(2, 2)]),
        2.0 * (-2.0 * zq * gr[(0, 0)] - w * gr[(0, 1)] + xq * gr[(0, 2)] + w * gr[(1, 0)]
            - 2.0 * zq * gr[(1, 1)]
            + yq * gr[(1, 2)]
            + xq * gr[(2, 0)]
            + yq * gr[(2, 1)]),
    ];
    // through q̂ = q/|q|
    let qhat = [w, xq, yq, zq];
    let dot: f64 = (0..4).map(|i| qhat[i] * dq[i]).sum();
    for i in 0..4 {
        out[6 + i] = (dq[i] - qhat[i] * dot) / qn;
    }

    let o = sigmoid(g.opacity_logit);
    out[10] = g2[5] * o * (1.0 - o);
    out[11..14].copy_from_slice(&g2[6..9]);
    out
}
