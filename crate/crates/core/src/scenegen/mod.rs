//! Deterministic synthetic rooms, rigs, wand sweeps and captures.

mod room;

pub use room::{build_scene, generate, perturb, SyntheticDataset, SyntheticSpec};

use nalgebra::{Point3, Unit, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::calibration::{WandObservation, WandSpec};
use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraRig, Intrinsics, Pose};

/// Four wall cameras, one per corner of a `room[0]`×`room[1]` floor centered
/// on the origin, mounted at `height` and aimed at `target`.
pub fn corner_rig(
    room: [f64; 3],
    height: f64,
    target: Point3<f64>,
    k: Intrinsics,
) -> Result<CameraRig> {
    let (hx, hy) = (0.45 * room[0], 0.45 * room[1]);
    let corners = [(hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)];
    let mut cams = Vec::with_capacity(4);
    for (i, &(x, y)) in corners.iter().enumerate() {
        let eye = Point3::new(x, y, height);
        if height <= 0.0 || height >= room[2] {
            return Err(Error::InvalidParameter(format!(
                "camera height {height} outside room of height {}",
                room[2]
            )));
        }
        let pose = Pose::look_at(&eye, &target, &Vector3::z())?;
        cams.push(Camera::new(format!("cam{i}"), k, pose));
    }
    CameraRig::new(cams)
}

/// Right camera of a rectified stereo pair: `baseline` along the left camera's +x.
pub fn stereo_partner(left: &Camera, baseline: f64) -> Camera {
    let offset = Pose::from_translation(Vector3::new(baseline, 0.0, 0.0));
    Camera::new(
        format!("{}_r", left.id),
        left.intrinsics,
        left.pose.compose(&offset),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct WandSweep {
    pub frames: u32,
    pub center: Point3<f64>,
    /// Half extents of the box the first sphere is drawn from.
    pub half_extent: Vector3<f64>,
    pub pixel_noise: f64,
    pub seed: u64,
}

/// Ground-truth sphere positions for one frame.
pub type WandFrame = [Point3<f64>; 3];

/// Random collinear wand poses and the resulting per-camera centroid
/// observations, in shuffled order and unlabeled. Views with a sphere behind
/// the camera or outside the image are omitted.
pub fn wand_sweep(
    rig: &CameraRig,
    spec: &WandSpec,
    sweep: &WandSweep,
) -> (Vec<WandFrame>, Vec<WandObservation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(sweep.seed);
    let noise = Normal::new(0.0, sweep.pixel_noise.max(0.0)).expect("finite sigma");
    let mut truth = Vec::with_capacity(sweep.frames as usize);
    let mut obs = Vec::new();
    for frame in 0..sweep.frames {
        let a = sweep.center
            + Vector3::new(
                rng.gen_range(-1.0..=1.0) * sweep.half_extent.x,
                rng.gen_range(-1.0..=1.0) * sweep.half_extent.y,
                rng.gen_range(-1.0..=1.0) * sweep.half_extent.z,
            );
        let dir = Unit::new_normalize(Vector3::from(UnitSphere.sample(&mut rng)));
        let b = a + dir.into_inner() * spec.d_ab;
        // C sits on the far side of B for a collinear wand, otherwise at d_ac/d_bc from A/B
        let c = if (spec.d_ac - spec.d_ab - spec.d_bc).abs() < 1e-12 {
            b + dir.into_inner() * spec.d_bc
        } else {
            triangle_apex(&a, &b, spec, &mut rng)
        };
        let spheres = [a, b, c];
        truth.push(spheres);
        for cam in &rig.cameras {
            let mut px = [Vector2::zeros(); 3];
            let mut visible = true;
            for (i, s) in spheres.iter().enumerate() {
                let p = cam.project(s);
                if !p.in_front() || !cam.intrinsics.contains(&p.pixel) {
                    visible = false;
                    break;
                }
                px[i] = p.pixel;
            }
            if !visible {
                continue;
            }
            let mut order = [0usize, 1, 2];
            order.shuffle(&mut rng);
            let mut centroids = [[0.0; 2]; 3];
            for (slot, &i) in order.iter().enumerate() {
                let (nx, ny) = if sweep.pixel_noise > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                let x = (px[i].x + nx).clamp(0.0, cam.intrinsics.width as f64 - 1.0);
                let y = (px[i].y + ny).clamp(0.0, cam.intrinsics.height as f64 - 1.0);
                centroids[slot] = [x, y];
            }
            obs.push(WandObservation {
                frame,
                camera: cam.id.clone(),
                centroids,
                labels: None,
            });
        }
    }
    (truth, obs)
}

fn triangle_apex(
    a: &Point3<f64>,
    b: &Point3<f64>,
    spec: &WandSpec,
    rng: &mut ChaCha8Rng,
) -> Point3<f64> {
    let ab = (b - a).normalize();
    // distance along AB and perpendicular offset of C
    let along = (spec.d_ac.powi(2) - spec.d_bc.powi(2) + spec.d_ab.powi(2)) / (2.0 * spec.d_ab);
    let perp = (spec.d_ac.powi(2) - along * along).max(0.0).sqrt();
    let mut n = Vector3::from(UnitSphere.sample(rng));
    n -= ab * n.dot(&ab);
    if n.norm() < 1e-9 {
        n = ab.cross(&Vector3::x());
        if n.norm() < 1e-9 {
            n = ab.cross(&Vector3::y());
        }
    }
    a + ab * along + n.normalize() * perp
}
