//! Extrinsic rig calibration from three-sphere wand trajectories.
//!
//! The flow is: label the spheres in every view, estimate pairwise relative
//! poses along a maximum-correspondence spanning tree, chain them into an
//! initial rig, triangulate the wand tracks, bundle adjust, and finally
//! recover metric scale from the known inter-sphere distances.

pub mod bundle;
pub mod epipolar;
pub mod triangulate;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Point3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraRig, Pose};

pub use bundle::{bundle_adjust, BaObservation, BaOptions, BaResult};
pub use epipolar::{solve_relative_pose, solve_relative_pose_with, PixelMatch, RansacParams};
pub use triangulate::{triangulate, Triangulation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sphere {
    A,
    B,
    C,
}

impl Sphere {
    pub const ALL: [Sphere; 3] = [Sphere::A, Sphere::B, Sphere::C];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Detected sphere centers of one wand in one camera at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WandObservation {
    pub frame: u32,
    pub camera: String,
    pub centroids: [[f64; 2]; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<[Sphere; 3]>,
}

impl WandObservation {
    pub fn centroid(&self, i: usize) -> Vector2<f64> {
        Vector2::new(self.centroids[i][0], self.centroids[i][1])
    }

    /// Centroid carrying label `s`, if labeled.
    pub fn labeled(&self, s: Sphere) -> Option<Vector2<f64>> {
        let labels = self.labels?;
        labels
            .iter()
            .position(|&l| l == s)
            .map(|i| self.centroid(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WandSpec {
    pub d_ab: f64,
    pub d_bc: f64,
    pub d_ac: f64,
}

impl WandSpec {
    /// Collinear wand with B between A and C.
    pub fn collinear(d_ab: f64, d_bc: f64) -> Self {
        Self {
            d_ab,
            d_bc,
            d_ac: d_ab + d_bc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [ab, bc, ac] = [self.d_ab, self.d_bc, self.d_ac];
        if !(ab > 0.0 && bc > 0.0 && ac > 0.0) {
            return Err(Error::InvalidParameter(
                "wand distances must be positive".into(),
            ));
        }
        let tol = 1e-9 * (ab + bc + ac);
        if ab > bc + ac + tol || bc > ab + ac + tol || ac > ab + bc + tol {
            return Err(Error::InvalidParameter(
                "wand distances violate the triangle inequality".into(),
            ));
        }
        Ok(())
    }

    /// Labels are only recoverable when the three distances differ.
    pub fn labels_distinguishable(&self) -> bool {
        let eq = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (a + b);
        !(eq(self.d_ab, self.d_bc) || eq(self.d_ab, self.d_ac) || eq(self.d_bc, self.d_ac))
    }

    pub fn distance(&self, a: Sphere, b: Sphere) -> f64 {
        match (a.min(b), a.max(b)) {
            (Sphere::A, Sphere::B) => self.d_ab,
            (Sphere::B, Sphere::C) => self.d_bc,
            (Sphere::A, Sphere::C) => self.d_ac,
            _ => 0.0,
        }
    }

    fn normalized(&self) -> [f64; 3] {
        let s = self.d_ab + self.d_bc + self.d_ac;
        [self.d_ab / s, self.d_bc / s, self.d_ac / s]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LabelParams {
    /// Minimum cost gap between the best and second-best assignment.
    pub min_margin: f64,
    /// Minimum projected wand extent in pixels.
    pub min_extent_px: f64,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            min_margin: 2e-3,
            min_extent_px: 4.0,
        }
    }
}

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Assigns A/B/C to the three centroids by matching projected distance
/// ratios against the wand's known ratios.
pub fn label_spheres(obs: &WandObservation, spec: &WandSpec) -> Result<WandObservation> {
    label_spheres_with(obs, spec, &LabelParams::default())
}

pub fn label_spheres_with(
    obs: &WandObservation,
    spec: &WandSpec,
    params: &LabelParams,
) -> Result<WandObservation> {
    let c: Vec<Vector2<f64>> = (0..3).map(|i| obs.centroid(i)).collect();
    let extent = (c[0] - c[1])
        .norm()
        .max((c[1] - c[2]).norm())
        .max((c[0] - c[2]).norm());
    if extent < params.min_extent_px {
        return Err(Error::AmbiguousLabeling { margin: 0.0 });
    }
    let target = spec.normalized();
    // perm[s] = centroid index carrying sphere s
    let mut costs: Vec<(f64, usize)> = PERMUTATIONS
        .iter()
        .enumerate()
        .map(|(pi, perm)| {
            let d = [
                (c[perm[0]] - c[perm[1]]).norm(),
                (c[perm[1]] - c[perm[2]]).norm(),
                (c[perm[0]] - c[perm[2]]).norm(),
            ];
            let s: f64 = d.iter().sum();
            let cost = (0..3).map(|i| (d[i] / s - target[i]).powi(2)).sum::<f64>();
            (cost, pi)
        })
        .collect();
    costs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let margin = costs[1].0 - costs[0].0;
    if margin < params.min_margin {
        return Err(Error::AmbiguousLabeling { margin });
    }
    let perm = PERMUTATIONS[costs[0].1];
    let mut labels = [Sphere::A; 3];
    for s in Sphere::ALL {
        labels[perm[s.index()]] = s;
    }
    Ok(WandObservation {
        labels: Some(labels),
        ..obs.clone()
    })
}

/// Median over frames and sphere pairs of known / reconstructed distance.
pub fn recover_scale(
    tracks: &BTreeMap<u32, [Option<Point3<f64>>; 3]>,
    spec: &WandSpec,
) -> Result<f64> {
    let mut ratios = Vec::new();
    for pts in tracks.values() {
        let (Some(a), Some(b), Some(c)) = (pts[0], pts[1], pts[2]) else {
            continue;
        };
        for (p, q, known) in [(a, b, spec.d_ab), (b, c, spec.d_bc), (a, c, spec.d_ac)] {
            let d = (p - q).norm();
            if d > 0.0 {
                ratios.push(known / d);
            }
        }
    }
    if ratios.is_empty() {
        return Err(Error::InsufficientData(
            "no frame with all three spheres reconstructed".into(),
        ));
    }
    Ok(median(&mut ratios))
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualHistogram {
    pub camera: String,
    /// Upper bin edges in pixels; the last bin is open-ended.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub rig: CameraRig,
    pub mean_reprojection_px: f64,
    pub max_reprojection_px: f64,
    pub histograms: Vec<ResidualHistogram>,
    pub scale_factor: f64,
    pub converged: bool,
    pub iterations: usize,
    pub frames_used: usize,
    pub observations_skipped: usize,
    /// Metric wand sphere positions keyed by frame.
    pub tracks: BTreeMap<u32, [Option<Point3<f64>>; 3]>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    mean_reprojection_px: f64,
    max_reprojection_px: f64,
    scale_factor: f64,
    converged: bool,
    iterations: usize,
    frames_used: usize,
    observations_skipped: usize,
    histograms: &'a [ResidualHistogram],
}

impl CalibrationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ReportJson {
            mean_reprojection_px: self.mean_reprojection_px,
            max_reprojection_px: self.max_reprojection_px,
            scale_factor: self.scale_factor,
            converged: self.converged,
            iterations: self.iterations,
            frames_used: self.frames_used,
            observations_skipped: self.observations_skipped,
            histograms: &self.histograms,
        })?)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CalibrationOptions {
    pub ransac: RansacParams,
    pub labeling: LabelParams,
    pub bundle: BaOptions,
}

const HISTOGRAM_EDGES: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Full wand calibration.
///
/// `intrinsics_rig` supplies factory intrinsics for every camera; the pose of
/// its first camera is the gauge and is kept bit-identical. Other poses in it
/// are ignored.
pub fn calibrate(
    intrinsics_rig: &CameraRig,
    observations: &[WandObservation],
    spec: &WandSpec,
    options: &CalibrationOptions,
) -> Result<CalibrationReport> {
    spec.validate()?;
    if intrinsics_rig.len() < 2 {
        return Err(Error::InsufficientData(
            "calibration needs two cameras".into(),
        ));
    }
    let ncam = intrinsics_rig.len();

    // frame -> camera index -> labeled centroids [A, B, C]
    let mut frames: BTreeMap<u32, BTreeMap<usize, [Vector2<f64>; 3]>> = BTreeMap::new();
    let mut skipped = 0usize;
    for obs in observations {
        let ci = intrinsics_rig.index_of(&obs.camera).ok_or_else(|| {
            Error::Configuration(format!("observation for unknown camera {}", obs.camera))
        })?;
        let labeled = match obs.labels {
            Some(_) => obs.clone(),
            None => match label_spheres_with(obs, spec, &options.labeling) {
                Ok(l) => l,
                Err(Error::AmbiguousLabeling { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        let pts = Sphere::ALL.map(|s| labeled.labeled(s).expect("labeled"));
        frames.entry(obs.frame).or_default().insert(ci, pts);
    }

    let pair_matches = |i: usize, j: usize| -> Vec<PixelMatch> {
        let mut m = Vec::new();
        for views in frames.values() {
            if let (Some(a), Some(b)) = (views.get(&i), views.get(&j)) {
                for s in 0..3 {
                    m.push(PixelMatch::new(a[s], b[s]));
                }
            }
        }
        m
    };

    // maximum-correspondence spanning tree rooted at camera 0 (Prim)
    let mut weight = vec![vec![0usize; ncam]; ncam];
    for i in 0..ncam {
        for j in i + 1..ncam {
            let w = pair_matches(i, j).len();
            weight[i][j] = w;
            weight[j][i] = w;
        }
    }
    let mut in_tree = vec![false; ncam];
    in_tree[0] = true;
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for _ in 1..ncam {
        let mut best: Option<(usize, usize, usize)> = None;
        for p in (0..ncam).filter(|&p| in_tree[p]) {
            for c in (0..ncam).filter(|&c| !in_tree[c]) {
                let w = weight[p][c];
                if w >= 8 && best.is_none_or(|b| w > b.2) {
                    best = Some((p, c, w));
                }
            }
        }
        let (p, c, _) = best.ok_or_else(|| {
            Error::InsufficientData("wand observations do not connect every camera".into())
        })?;
        in_tree[c] = true;
        edges.push((p, c));
    }

    // chain relative poses, fixing each edge's scale against earlier tracks
    let mut poses: Vec<Option<Pose>> = vec![None; ncam];
    poses[0] = Some(intrinsics_rig.cameras[0].pose);
    let mut world: BTreeMap<(u32, usize), Point3<f64>> = BTreeMap::new();
    for &(p, c) in &edges {
        let kp = &intrinsics_rig.cameras[p].intrinsics;
        let kc = &intrinsics_rig.cameras[c].intrinsics;
        let rel = solve_relative_pose_with(&pair_matches(p, c), kp, kc, &options.ransac)?;
        let parent_pose = poses[p].expect("parent placed before child");
        let parent_cam = Camera::new("p", *kp, parent_pose);
        let unit_child = Camera::new("c", *kc, parent_pose.compose(&rel.pose));
        let mut ratios = Vec::new();
        let mut unit_points = Vec::new();
        for (&f, views) in &frames {
            let (Some(a), Some(b)) = (views.get(&p), views.get(&c)) else {
                continue;
            };
            for s in 0..3 {
                let Ok(t) = triangulate(&[(&parent_cam, a[s]), (&unit_child, b[s])]) else {
                    continue;
                };
                if let Some(x) = world.get(&(f, s)) {
                    let known = parent_pose.world_to_camera(x).norm();
                    let unit = parent_pose.world_to_camera(&t.point).norm();
                    if unit > 0.0 {
                        ratios.push(known / unit);
                    }
                }
                unit_points.push(((f, s), t.point));
            }
        }
        let scale = if world.is_empty() {
            1.0
        } else if ratios.is_empty() {
            return Err(Error::InsufficientData(format!(
                "camera {} shares no wand points with the calibrated set",
                intrinsics_rig.cameras[c].id
            )));
        } else {
            median(&mut ratios)
        };
        let scaled_rel = Pose::new(rel.pose.rotation, rel.pose.translation * scale);
        poses[c] = Some(parent_pose.compose(&scaled_rel));
        let center = parent_pose.center();
        for (key, x) in unit_points {
            world
                .entry(key)
                .or_insert_with(|| center + (x - center) * scale);
        }
    }

    let cameras: Vec<Camera> = intrinsics_rig
        .cameras
        .iter()
        .zip(&poses)
        .map(|(c, p)| Camera::new(c.id.clone(), c.intrinsics, p.expect("all placed")))
        .collect();

    // initial tracks from every calibrated view
    let mut points = Vec::new();
    let mut ba_obs = Vec::new();
    let mut keys = Vec::new();
    for (&f, views) in &frames {
        for s in 0..3 {
            let obs: Vec<(&Camera, Vector2<f64>)> = views
                .iter()
                .map(|(&ci, px)| (&cameras[ci], px[s]))
                .collect();
            if obs.len() < 2 {
                continue;
            }
            let Ok(t) = triangulate(&obs) else {
                continue;
            };
            let pi = points.len();
            points.push(t.point);
            keys.push((f, s));
            for (&ci, px) in views {
                ba_obs.push(BaObservation {
                    camera: ci,
                    point: pi,
                    pixel: px[s],
                });
            }
        }
    }
    if points.is_empty() {
        return Err(Error::InsufficientData(
            "no triangulable wand points".into(),
        ));
    }

    let ba = bundle_adjust(&cameras, 0, &points, &ba_obs, &options.bundle);

    let mut tracks: BTreeMap<u32, [Option<Point3<f64>>; 3]> = BTreeMap::new();
    for (&(f, s), p) in keys.iter().zip(&ba.points) {
        tracks.entry(f).or_insert([None; 3])[s] = Some(*p);
    }
    let scale = recover_scale(&tracks, spec)?;
    let (rig, tracks) = apply_scale(&ba.cameras, 0, &tracks, scale)?;

    let residual_points: Vec<Point3<f64>> = keys
        .iter()
        .map(|&(f, s)| tracks[&f][s].expect("track present"))
        .collect();
    let residuals = bundle::reprojection_residuals(&rig.cameras, &residual_points, &ba_obs);
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let max = residuals.iter().cloned().fold(0.0, f64::max);
    let histograms = rig
        .cameras
        .iter()
        .enumerate()
        .map(|(ci, cam)| {
            let mut counts = vec![0usize; HISTOGRAM_EDGES.len() + 1];
            for (o, r) in ba_obs.iter().zip(&residuals) {
                if o.camera == ci {
                    let bin = HISTOGRAM_EDGES
                        .iter()
                        .position(|&e| *r < e)
                        .unwrap_or(HISTOGRAM_EDGES.len());
                    counts[bin] += 1;
                }
            }
            ResidualHistogram {
                camera: cam.id.clone(),
                edges: HISTOGRAM_EDGES.to_vec(),
                counts,
            }
        })
        .collect();

    Ok(CalibrationReport {
        rig,
        mean_reprojection_px: mean,
        max_reprojection_px: max,
        histograms,
        scale_factor: scale,
        converged: ba.converged,
        iterations: ba.iterations,
        frames_used: frames.len(),
        observations_skipped: skipped,
        tracks,
    })
}

/// Scales camera centers and points about the reference camera center.
/// Projections are unchanged and the reference pose stays bit-identical.
pub fn apply_scale(
    cameras: &[Camera],
    reference: usize,
    tracks: &BTreeMap<u32, [Option<Point3<f64>>; 3]>,
    scale: f64,
) -> Result<(CameraRig, BTreeMap<u32, [Option<Point3<f64>>; 3]>)> {
    let origin = cameras[reference].center();
    let cams = cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == reference {
                c.clone()
            } else {
                let t = origin.coords + (c.pose.translation - origin.coords) * scale;
                Camera::new(c.id.clone(), c.intrinsics, Pose::new(c.pose.rotation, t))
            }
        })
        .collect();
    let tracks = tracks
        .iter()
        .map(|(&f, pts)| (f, pts.map(|p| p.map(|x| origin + (x - origin) * scale))))
        .collect();
    Ok((CameraRig::new(cams)?, tracks))
}

pub fn read_observations(path: &Path) -> Result<Vec<WandObservation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let obs: WandObservation = serde_json::from_str(&line)
            .map_err(|e| Error::format("wand observation", format!("line {}: {e}", ln + 1)))?;
        out.push(obs);
    }
    Ok(out)
}

pub fn write_observations(path: &Path, observations: &[WandObservation]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for o in observations {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
