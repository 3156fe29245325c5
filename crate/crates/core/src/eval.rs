//! Image metrics, trajectories and the point-reprojection baseline.

use std::path::Path;
use std::time::Instant;

use nalgebra::{Point3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Intrinsics, Pose};
use crate::image::RgbImage;
use crate::splat::{rasterize, GaussianScene, RenderSettings};
use crate::stereo::FusedPointCloud;
use crate::train::ssim;
use crate::views::HeldOut;

/// Returned for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const DEFAULT_ORBIT_HEIGHT: f64 = 1.6;

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    Ok(if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub views: Vec<String>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr_stats: Stats,
    pub ssim_stats: Stats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_ssim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flicker: Option<f64>,
    pub runtime: f64,
    pub fps: f64,
}

impl MetricReport {
    /// Per-view metrics of `rendered` against `targets`.
    pub fn compare(
        names: Vec<String>,
        rendered: &[RgbImage],
        targets: &[RgbImage],
    ) -> Result<Self> {
        if rendered.len() != targets.len() || names.len() != rendered.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} renders, {} targets, {} names",
                rendered.len(),
                targets.len(),
                names.len()
            )));
        }
        let mut p = Vec::with_capacity(rendered.len());
        let mut s = Vec::with_capacity(rendered.len());
        for (r, t) in rendered.iter().zip(targets) {
            p.push(psnr(r, t)?);
            s.push(ssim(r, t)?);
        }
        Ok(Self {
            views: names,
            psnr_stats: Stats::of(&p),
            ssim_stats: Stats::of(&s),
            psnr: p,
            ssim: s,
            ..Self::default()
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w =
            csv::Writer::from_path(path).map_err(|e| Error::format("CSV", e.to_string()))?;
        let csv_err = |e: csv::Error| Error::format("CSV", e.to_string());
        w.write_record(["view", "psnr", "ssim"]).map_err(csv_err)?;
        for ((v, p), s) in self.views.iter().zip(&self.psnr).zip(&self.ssim) {
            w.write_record([v.clone(), p.to_string(), s.to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Renders every held-out view and scores it against its image.
pub fn evaluate_held_out(
    scene: &GaussianScene,
    views: &[HeldOut<'_>],
    settings: &RenderSettings,
) -> Result<MetricReport> {
    let start = Instant::now();
    let mut rendered = Vec::with_capacity(views.len());
    for v in views {
        rendered.push(rasterize(scene, &v.view().camera, settings)?.color);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let targets: Vec<RgbImage> = views.iter().map(|v| v.view().image.clone()).collect();
    let names = views.iter().map(|v| v.view().camera.id.clone()).collect();
    let mut report = MetricReport::compare(names, &rendered, &targets)?;
    report.runtime = elapsed;
    report.fps = if elapsed > 0.0 {
        views.len() as f64 / elapsed
    } else {
        0.0
    };
    Ok(report)
}

fn need_pairs(frames: &[RgbImage]) -> Result<()> {
    if frames.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "temporal metrics need at least 2 frames, got {}",
            frames.len()
        )));
    }
    Ok(())
}

/// Mean PSNR and SSIM over consecutive frame pairs.
pub fn temporal_metrics(frames: &[RgbImage]) -> Result<(f64, f64)> {
    need_pairs(frames)?;
    let mut p = 0.0;
    let mut s = 0.0;
    for pair in frames.windows(2) {
        p += psnr(&pair[0], &pair[1])?;
        s += ssim(&pair[0], &pair[1])?;
    }
    let n = (frames.len() - 1) as f64;
    Ok((p / n, s / n))
}

/// Mean over consecutive pairs of ½(|Δ mean luminance| + 1 − SSIM).
pub fn flicker(frames: &[RgbImage]) -> Result<f64> {
    need_pairs(frames)?;
    let mut total = 0.0;
    for pair in frames.windows(2) {
        if pair[0] == pair[1] {
            continue;
        }
        let dl = (pair[0].mean_luminance() - pair[1].mean_luminance()).abs();
        total += 0.5 * (dl + 1.0 - ssim(&pair[0], &pair[1])?);
    }
    Ok(total / (frames.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Orbit,
    Egocentric,
    Custom,
}

/// One trajectory sample as stored on disk: camera-to-world rotation (wxyz),
/// camera center, and the scene timestamp it shows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryPose {
    pub q: [f64; 4],
    pub t: [f64; 3],
    #[serde(default)]
    pub time: u32,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub cameras: Vec<Camera>,
    pub times: Vec<u32>,
}

impl Trajectory {
    pub fn from_poses(
        kind: TrajectoryKind,
        poses: &[TrajectoryPose],
        k: Intrinsics,
    ) -> Result<Self> {
        let mut cameras = Vec::with_capacity(poses.len());
        for (i, p) in poses.iter().enumerate() {
            let q = Quaternion::new(p.q[0], p.q[1], p.q[2], p.q[3]);
            if !(q.norm() > 1e-9) || p.t.iter().chain(&p.q).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "trajectory pose {i} is not a valid rigid transform"
                )));
            }
            let pose = Pose::new(UnitQuaternion::from_quaternion(q), Vector3::from(p.t));
            cameras.push(Camera::new(format!("traj{i:04}"), k, pose));
        }
        Ok(Self {
            kind,
            cameras,
            times: poses.iter().map(|p| p.time).collect(),
        })
    }

    pub fn poses(&self) -> Vec<TrajectoryPose> {
        self.cameras
            .iter()
            .zip(&self.times)
            .map(|(c, &time)| TrajectoryPose {
                q: c.pose.quaternion_wxyz(),
                t: c.pose.translation.into(),
                time,
            })
            .collect()
    }

    pub fn load(path: &Path, kind: TrajectoryKind, k: Intrinsics) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let poses: Vec<TrajectoryPose> = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        Self::from_poses(kind, &poses, k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.poses())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// `n` cameras equally spaced in azimuth (starting on +x) on a horizontal
/// circle around the vertical axis through `center`, each aimed at `center`.
pub fn orbit(
    center: Point3<f64>,
    radius: f64,
    n: usize,
    height: f64,
    k: Intrinsics,
    time: u32,
) -> Result<Trajectory> {
    if !(radius > 0.0) || n < 2 {
        return Err(Error::InvalidParameter(format!(
            "orbit needs radius > 0 and n >= 2 (got {radius}, {n})"
        )));
    }
    let mut cameras = Vec::with_capacity(n);
    for i in 0..n {
        let th = std::f64::consts::TAU * i as f64 / n as f64;
        let eye = Point3::new(
            center.x + radius * th.cos(),
            center.y + radius * th.sin(),
            height,
        );
        let pose = Pose::look_at(&eye, &center, &Vector3::z())?;
        cameras.push(Camera::new(format!("orbit{i:03}"), k, pose));
    }
    Ok(Trajectory {
        kind: TrajectoryKind::Orbit,
        cameras,
        times: vec![time; n],
    })
}

/// Z-buffered 1-pixel point splats. Returns the image and the hit mask.
pub fn depth_reprojection_render(
    cloud: &FusedPointCloud,
    cam: &Camera,
    background: [f64; 3],
) -> Result<(RgbImage, Vec<bool>)> {
    if cloud.is_empty() {
        return Err(Error::EmptyInitialization);
    }
    let (w, h) = (cam.width(), cam.height());
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut img = RgbImage::filled(w, h, background);
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        let proj = cam.project(&Point3::from(*p));
        if !proj.in_front() {
            continue;
        }
        let px: Vector2<f64> = proj.pixel;
        let (x, y) = (px.x.round(), px.y.round());
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        let i = y as usize * w + x as usize;
        if proj.depth < zbuf[i] {
            zbuf[i] = proj.depth;
            img.set(x as usize, y as usize, *c);
        }
    }
    Ok((img, zbuf.iter().map(|z| z.is_finite()).collect()))
}

/// Novel-trajectory report: temporal consistency between consecutive orbit
/// frames and, when a reference scene is given, fidelity against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitReport {
    pub radius: f64,
    pub views: usize,
    pub t_psnr: f64,
    pub t_ssim: f64,
    pub flicker: f64,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<MetricReport>,
}

pub fn evaluate_orbit(
    scene: &GaussianScene,
    traj: &Trajectory,
    radius: f64,
    settings: &RenderSettings,
    reference: Option<&GaussianScene>,
) -> Result<OrbitReport> {
    let start = Instant::now();
    let mut frames = Vec::with_capacity(traj.len());
    for cam in &traj.cameras {
        frames.push(rasterize(scene, cam, settings)?.color);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (t_psnr, t_ssim) = temporal_metrics(&frames)?;
    let reference = match reference {
        Some(gt) => {
            let targets = traj
                .cameras
                .iter()
                .map(|c| Ok(rasterize(gt, c, settings)?.color))
                .collect::<Result<Vec<_>>>()?;
            let names = traj.cameras.iter().map(|c| c.id.clone()).collect();
            Some(MetricReport::compare(names, &frames, &targets)?)
        }
        None => None,
    };
    Ok(OrbitReport {
        radius,
        views: traj.len(),
        t_psnr,
        t_ssim,
        flicker: flicker(&frames)?,
        fps: if elapsed > 0.0 {
            traj.len() as f64 / elapsed
        } else {
            0.0
        },
        reference,
    })
}

/// Fixed-pose stability across per-timestamp scenes.
pub fn evaluate_temporal(
    scenes: &[GaussianScene],
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<MetricReport> {
    let frames = scenes
        .iter()
        .map(|s| Ok(rasterize(s, cam, settings)?.color))
        .collect::<Result<Vec<_>>>()?;
    let (tp, ts) = temporal_metrics(&frames)?;
    Ok(MetricReport {
        views: scenes.iter().map(|s| format!("t{}", s.timestamp)).collect(),
        t_psnr: Some(tp),
        t_ssim: Some(ts),
        flicker: Some(flicker(&frames)?),
        ..MetricReport::default()
    })
}
