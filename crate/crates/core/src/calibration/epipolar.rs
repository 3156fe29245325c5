//! Linear relative pose: normalized 8-point essential matrix inside RANSAC,
//! followed by the cheirality-checked decomposition.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, SMatrix, SVector, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMatch {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
}

impl PixelMatch {
    pub fn new(a: Vector2<f64>, b: Vector2<f64>) -> Self {
        Self { a, b }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    /// Sampson distance threshold, pixels.
    pub threshold_px: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold_px: 1.0,
            iterations: 1000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RelativePose {
    /// Pose of camera b expressed in camera a's frame; unit-length translation.
    pub pose: Pose,
    pub essential: Matrix3<f64>,
    pub inliers: Vec<usize>,
}

/// Relative pose of camera `b` with respect to camera `a`, up to scale.
pub fn solve_relative_pose(
    matches: &[PixelMatch],
    ka: &Intrinsics,
    kb: &Intrinsics,
) -> Result<Pose> {
    solve_relative_pose_with(matches, ka, kb, &RansacParams::default()).map(|r| r.pose)
}

pub fn solve_relative_pose_with(
    matches: &[PixelMatch],
    ka: &Intrinsics,
    kb: &Intrinsics,
    params: &RansacParams,
) -> Result<RelativePose> {
    if matches.len() < 8 {
        return Err(Error::InsufficientData(format!(
            "relative pose needs 8 correspondences, got {}",
            matches.len()
        )));
    }
    let norm_a: Vec<Vector2<f64>> = matches.iter().map(|m| normalize(ka, &m.a)).collect();
    let norm_b: Vec<Vector2<f64>> = matches.iter().map(|m| normalize(kb, &m.b)).collect();
    let ka_inv = ka.matrix().try_inverse().expect("valid intrinsics");
    let kb_inv = kb.matrix().try_inverse().expect("valid intrinsics");

    let inliers_of = |e: &Matrix3<f64>| -> Vec<usize> {
        let f = kb_inv.transpose() * e * ka_inv;
        (0..matches.len())
            .filter(|&i| sampson_distance(&f, &matches[i]) < params.threshold_px)
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Vec<usize> = Vec::new();
    if matches.len() == 8 {
        if let Some(e) = eight_point(&norm_a, &norm_b) {
            best = inliers_of(&e);
        }
    } else {
        for _ in 0..params.iterations {
            let sample = rand::seq::index::sample(&mut rng, matches.len(), 8);
            let sa: Vec<_> = sample.iter().map(|i| norm_a[i]).collect();
            let sb: Vec<_> = sample.iter().map(|i| norm_b[i]).collect();
            let Some(e) = eight_point(&sa, &sb) else {
                continue;
            };
            let inl = inliers_of(&e);
            if inl.len() > best.len() {
                best = inl;
                if best.len() == matches.len() {
                    break;
                }
            }
        }
    }
    if best.len() < 8 {
        return Err(Error::DegenerateConfiguration(
            "no essential matrix with 8 or more inliers".into(),
        ));
    }
    let ia: Vec<_> = best.iter().map(|&i| norm_a[i]).collect();
    let ib: Vec<_> = best.iter().map(|&i| norm_b[i]).collect();
    let e = eight_point(&ia, &ib).ok_or_else(|| {
        Error::DegenerateConfiguration("inlier set does not determine an essential matrix".into())
    })?;
    let (r, t) = decompose_essential(&e, &ia, &ib)?;
    let fundamental =
        |r: &Matrix3<f64>, t: &Vector3<f64>| kb_inv.transpose() * t.cross_matrix() * r * ka_inv;
    let best_matches: Vec<PixelMatch> = best.iter().map(|&i| matches[i]).collect();
    let (r, t) = refine_sampson(&r, &t, &best_matches, &fundamental);
    let e = t.cross_matrix() * r;
    let inliers = inliers_of(&e);
    let inlier_matches: Vec<PixelMatch> = inliers.iter().map(|&i| matches[i]).collect();
    let (r, t) = if inliers.len() >= 8 {
        refine_sampson(&r, &t, &inlier_matches, &fundamental)
    } else {
        (r, t)
    };
    let e = t.cross_matrix() * r;
    // r, t map a-frame points into the b frame; invert to get b's pose in a.
    let rt = r.transpose();
    let pose = Pose::from_rotation_matrix(&rt, -(rt * t));
    Ok(RelativePose {
        pose,
        essential: e,
        inliers,
    })
}

/// Levenberg–Marquardt on the summed squared Sampson distance over a
/// rotation increment and a unit translation direction (5 dof).
fn refine_sampson<F>(
    r0: &Matrix3<f64>,
    t0: &Vector3<f64>,
    matches: &[PixelMatch],
    fundamental: &F,
) -> (Matrix3<f64>, Vector3<f64>)
where
    F: Fn(&Matrix3<f64>, &Vector3<f64>) -> Matrix3<f64>,
{
    let apply = |r: &Matrix3<f64>, t: &Vector3<f64>, d: &SVector<f64, 5>| {
        let dr = nalgebra::Rotation3::from_scaled_axis(Vector3::new(d[0], d[1], d[2])).into_inner();
        // tangent basis of the unit sphere at t
        let helper = if t.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let b1 = t.cross(&helper).normalize();
        let b2 = t.cross(&b1);
        ((dr * r), (t + b1 * d[3] + b2 * d[4]).normalize())
    };
    let residuals = |r: &Matrix3<f64>, t: &Vector3<f64>| -> DVector<f64> {
        let f = fundamental(r, t);
        DVector::from_iterator(matches.len(), matches.iter().map(|m| signed_sampson(&f, m)))
    };
    let mut r = *r0;
    let mut t = t0.normalize();
    let mut res = residuals(&r, &t);
    let mut cost = res.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..50 {
        let h = 1e-7;
        let mut jac = DMatrix::<f64>::zeros(matches.len(), 5);
        for k in 0..5 {
            let mut d = SVector::<f64, 5>::zeros();
            d[k] = h;
            let (rp, tp) = apply(&r, &t, &d);
            let (rm, tm) = apply(&r, &t, &(-d));
            let col = (residuals(&rp, &tp) - residuals(&rm, &tm)) / (2.0 * h);
            jac.set_column(k, &col);
        }
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &res;
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for i in 0..5 {
                a[(i, i)] *= 1.0 + lambda;
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let d = SVector::<f64, 5>::from_column_slice(step.as_slice());
            let (rn, tn) = apply(&r, &t, &d);
            let rn_res = residuals(&rn, &tn);
            let new_cost = rn_res.norm_squared();
            if new_cost < cost {
                let rel = (cost - new_cost) / cost.max(1e-300);
                r = rn;
                t = tn;
                res = rn_res;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (r, t)
}

fn signed_sampson(f: &Matrix3<f64>, m: &PixelMatch) -> f64 {
    let xa = Vector3::new(m.a.x, m.a.y, 1.0);
    let xb = Vector3::new(m.b.x, m.b.y, 1.0);
    let fxa = f * xa;
    let ftxb = f.transpose() * xb;
    let den = (fxa.x * fxa.x + fxa.y * fxa.y + ftxb.x * ftxb.x + ftxb.y * ftxb.y).sqrt();
    if den <= 0.0 {
        return 0.0;
    }
    xb.dot(&fxa) / den
}

fn normalize(k: &Intrinsics, px: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy)
}

/// Sampson (first-order geometric) distance of a match under fundamental matrix `f`.
pub fn sampson_distance(f: &Matrix3<f64>, m: &PixelMatch) -> f64 {
    let xa = Vector3::new(m.a.x, m.a.y, 1.0);
    let xb = Vector3::new(m.b.x, m.b.y, 1.0);
    let fxa = f * xa;
    let ftxb = f.transpose() * xb;
    let num = xb.dot(&fxa);
    let den = fxa.x * fxa.x + fxa.y * fxa.y + ftxb.x * ftxb.x + ftxb.y * ftxb.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Essential matrix from >= 8 normalized-coordinate correspondences, with
/// `x_b^T E x_a = 0`. Returns `None` for rank-deficient (degenerate) input.
pub fn eight_point(xa: &[Vector2<f64>], xb: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    debug_assert_eq!(xa.len(), xb.len());
    let n = xa.len();
    if n < 8 {
        return None;
    }
    let ta = hartley(xa);
    let tb = hartley(xb);
    let rows = n.max(9);
    let mut a = nalgebra::DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let pa = ta * Vector3::new(xa[i].x, xa[i].y, 1.0);
        let pb = tb * Vector3::new(xb[i].x, xb[i].y, 1.0);
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = pb[r] * pa[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap());
    if sv[order[0]] <= 0.0 || sv[order[7]] / sv[order[0]] < 1e-10 {
        return None;
    }
    let h = v_t.row(order[8]);
    let en = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let e = tb.transpose() * en * ta;
    // project onto the essential manifold
    let svd = e.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let s = svd.singular_values;
    let imin = s.imin();
    let mean = 0.5 * (s.sum() - s[imin]);
    if mean <= 0.0 {
        return None;
    }
    let mut d = Vector3::repeat(mean);
    d[imin] = 0.0;
    let e = u * Matrix3::from_diagonal(&d) * v_t;
    Some(e / e.norm())
}

fn triangulate_pair(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    a: &Vector2<f64>,
    b: &Vector2<f64>,
) -> Option<Vector3<f64>> {
    let mut m = Matrix4::<f64>::zeros();
    // camera a: [I | 0]
    m.set_row(0, &nalgebra::RowVector4::new(-1.0, 0.0, a.x, 0.0));
    m.set_row(1, &nalgebra::RowVector4::new(0.0, -1.0, a.y, 0.0));
    let p: SMatrix<f64, 3, 4> = SMatrix::from_columns(&[
        r.column(0).into_owned(),
        r.column(1).into_owned(),
        r.column(2).into_owned(),
        *t,
    ]);
    m.set_row(2, &(p.row(2) * b.x - p.row(0)));
    m.set_row(3, &(p.row(2) * b.y - p.row(1)));
    let svd = m.svd(false, true);
    let v_t = svd.v_t?;
    let sv = svd.singular_values;
    let imin = sv.imin();
    let h = v_t.row(imin);
    if h[3].abs() < 1e-15 {
        return None;
    }
    Some(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Picks the (R, t) among the four decompositions with the most points in
/// front of both cameras. `R, t` map a-frame points into the b frame.
pub fn decompose_essential(
    e: &Matrix3<f64>,
    xa: &[Vector2<f64>],
    xb: &[Vector2<f64>],
) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let svd = e.svd(true, true);
    let (mut u, mut v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    // order so that the null singular value is last
    let s = svd.singular_values;
    let imin = s.imin();
    if imin != 2 {
        u.swap_columns(imin, 2);
        v_t.swap_rows(imin, 2);
    }
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = u.column(2).into_owned();
    let candidates = [(r1, t), (r1, -t), (r2, t), (r2, -t)];
    let mut best = (0usize, 0usize);
    for (ci, (r, t)) in candidates.iter().enumerate() {
        let count = xa
            .iter()
            .zip(xb)
            .filter(|(a, b)| {
                triangulate_pair(r, t, a, b)
                    .map(|x| x.z > 0.0 && (r * x + t).z > 0.0)
                    .unwrap_or(false)
            })
            .count();
        if count > best.1 {
            best = (ci, count);
        }
    }
    if best.1 == 0 || 2 * best.1 <= xa.len() {
        return Err(Error::DegenerateConfiguration(
            "no decomposition places the points in front of both cameras".into(),
        ));
    }
    let (r, t) = candidates[best.0];
    Ok((r, t.normalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_angle_between, Camera};
    use nalgebra::Point3;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn k() -> Intrinsics {
        Intrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn rig(rng: &mut ChaCha8Rng) -> (Camera, Camera) {
        let target = Point3::new(0.0, 0.0, 0.0);
        let a = Camera::new(
            "a",
            k(),
            Pose::look_at(
                &Point3::new(3.0, 0.2, 1.0),
                &target,
                &nalgebra::Vector3::z(),
            )
            .unwrap(),
        );
        let ang: f64 = rng.gen_range(0.5..1.5);
        let b = Camera::new(
            "b",
            k(),
            Pose::look_at(
                &Point3::new(3.0 * ang.cos(), 3.0 * ang.sin(), 1.2),
                &Point3::new(0.1, -0.1, 0.1),
                &nalgebra::Vector3::z(),
            )
            .unwrap(),
        );
        (a, b)
    }

    fn matches(
        a: &Camera,
        b: &Camera,
        n: usize,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<PixelMatch> {
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let mut out = Vec::new();
        while out.len() < n {
            let p = Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.8..1.0),
            );
            let pa = a.project(&p).pixel;
            let pb = b.project(&p).pixel;
            if !a.intrinsics.contains(&pa) || !b.intrinsics.contains(&pb) {
                continue;
            }
            let mut jitter = || {
                if sigma > 0.0 {
                    Vector2::new(noise.sample(rng), noise.sample(rng))
                } else {
                    Vector2::zeros()
                }
            };
            let ja = jitter();
            let jb = jitter();
            out.push(PixelMatch::new(pa + ja, pb + jb));
        }
        out
    }

    fn truth(a: &Camera, b: &Camera) -> Pose {
        let rel = a.pose.inverse().compose(&b.pose);
        Pose::new(rel.rotation, rel.translation.normalize())
    }

    fn direction_error(x: &Vector3<f64>, y: &Vector3<f64>) -> f64 {
        x.normalize().dot(&y.normalize()).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn noise_free_recovers_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (a, b) = rig(&mut rng);
            let m = matches(&a, &b, 50, 0.0, &mut rng);
            let pose = solve_relative_pose(&m, &a.intrinsics, &b.intrinsics).unwrap();
            let gt = truth(&a, &b);
            assert!(rotation_angle_between(&pose.rotation, &gt.rotation) < 1e-6);
            assert!(direction_error(&pose.translation, &gt.translation) < 1e-6);
            assert!((pose.translation.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_rotation_error_below_fifth_of_degree() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let trials = 100;
        let mut sq = 0.0;
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let (a, b) = rig(&mut rng);
            let m = matches(&a, &b, 200, 0.3, &mut rng);
            let pose = solve_relative_pose(&m, &a.intrinsics, &b.intrinsics).unwrap();
            let e = rotation_angle_between(&pose.rotation, &truth(&a, &b).rotation);
            sq += e * e;
            worst = worst.max(e);
        }
        let rms = (sq / trials as f64).sqrt().to_degrees();
        assert!(rms < 0.2, "rms rotation error {rms}°");
        assert!(
            worst.to_degrees() < 0.5,
            "worst rotation error {}°",
            worst.to_degrees()
        );
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (a, _) = rig(&mut rng);
        let m = matches(&a, &a, 40, 0.0, &mut rng);
        let err = solve_relative_pose(&m, &a.intrinsics, &a.intrinsics).unwrap_err();
        assert!(matches!(err, Error::DegenerateConfiguration(_)), "{err}");
    }

    #[test]
    fn too_few_matches() {
        let m = vec![PixelMatch::new(Vector2::zeros(), Vector2::zeros()); 7];
        assert!(matches!(
            solve_relative_pose(&m, &k(), &k()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn rejects_mislabeled_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (a, b) = rig(&mut rng);
        let mut m = matches(&a, &b, 100, 0.0, &mut rng);
        for i in 0..15 {
            let j = (i * 7 + 3) % 100;
            m[i].b = m[j].b;
        }
        let r =
            solve_relative_pose_with(&m, &a.intrinsics, &b.intrinsics, &RansacParams::default())
                .unwrap();
        let gt = truth(&a, &b);
        assert!(rotation_angle_between(&r.pose.rotation, &gt.rotation) < 1e-6);
        assert!(r.inliers.len() >= 85);
    }
}
