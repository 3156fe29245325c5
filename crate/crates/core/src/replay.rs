//! Replay bundles: per-timestamp scenes plus a camera trajectory, laid out
//! for a static viewer.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Trajectory, TrajectoryKind};
use crate::geometry::Intrinsics;
use crate::image::RgbImage;
use crate::splat::{rasterize, GaussianScene, RenderSettings, EGSP_VERSION};

pub const BUNDLE_INDEX: &str = "index.json";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl From<Intrinsics> for BundleCamera {
    fn from(k: Intrinsics) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

impl BundleCamera {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleScene {
    pub timestamp: u32,
    /// Relative to the bundle root.
    pub file: String,
    pub count: usize,
}

/// Contents of `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleIndex {
    pub version: u32,
    pub egsp_version: u32,
    pub scenes: Vec<BundleScene>,
    pub trajectory: String,
    pub trajectory_kind: TrajectoryKind,
    pub poses: usize,
    pub camera: BundleCamera,
    pub background: [f64; 3],
    /// Pre-rendered frames, one per pose.
    #[serde(default)]
    pub frames: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayOptions {
    pub bake_frames: bool,
    pub settings: RenderSettings,
}

/// Renders pose `i` of the trajectory from the scene of its timestamp.
pub fn render_pose(
    scenes: &BTreeMap<u32, GaussianScene>,
    traj: &Trajectory,
    i: usize,
    settings: &RenderSettings,
) -> Result<RgbImage> {
    let t = traj.times[i];
    let scene = scenes.get(&t).ok_or(Error::TimestampMismatch(t))?;
    Ok(rasterize(scene, &traj.cameras[i], settings)?.color)
}

/// Writes `scenes/`, `trajectory.json`, optional `frames/` and `index.json`
/// under `out`. Every trajectory timestamp must have a scene.
pub fn export_replay(
    scenes: &BTreeMap<u32, GaussianScene>,
    traj: &Trajectory,
    out: &Path,
    opts: &ReplayOptions,
) -> Result<BundleIndex> {
    opts.settings.validate()?;
    let first = traj
        .cameras
        .first()
        .ok_or_else(|| Error::Validation("trajectory has no poses".into()))?;
    if let Some(t) = traj.times.iter().find(|t| !scenes.contains_key(t)) {
        return Err(Error::TimestampMismatch(*t));
    }
    if traj
        .cameras
        .iter()
        .any(|c| c.intrinsics != first.intrinsics)
    {
        return Err(Error::Validation(
            "trajectory cameras must share intrinsics".into(),
        ));
    }
    let scene_dir = out.join("scenes");
    std::fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (&t, scene) in scenes {
        let file = format!("scenes/scene_t{t}.egsp");
        scene.save(&out.join(&file))?;
        entries.push(BundleScene {
            timestamp: t,
            file,
            count: scene.len(),
        });
    }
    traj.save(&out.join("trajectory.json"))?;
    let frames = if opts.bake_frames {
        let dir = out.join("frames");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut names = Vec::with_capacity(traj.len());
        for i in 0..traj.len() {
            let name = format!("frames/frame_{i:04}.png");
            render_pose(scenes, traj, i, &opts.settings)?.save_png(&out.join(&name))?;
            names.push(name);
        }
        Some(names)
    } else {
        None
    };
    let index = BundleIndex {
        version: BUNDLE_VERSION,
        egsp_version: EGSP_VERSION,
        scenes: entries,
        trajectory: "trajectory.json".into(),
        trajectory_kind: traj.kind,
        poses: traj.len(),
        camera: first.intrinsics.into(),
        background: opts.settings.background,
        frames,
    };
    let p = out.join(BUNDLE_INDEX);
    std::fs::write(&p, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&p, e))?;
    Ok(index)
}

/// A bundle read back from disk.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub index: BundleIndex,
    pub scenes: BTreeMap<u32, GaussianScene>,
    pub trajectory: Trajectory,
}

/// Loads a bundle and checks record counts against the index.
pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let p = dir.join(BUNDLE_INDEX);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let index: BundleIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
    if index.version != BUNDLE_VERSION {
        return Err(Error::format(
            "bundle",
            format!("unsupported version {}", index.version),
        ));
    }
    let mut scenes = BTreeMap::new();
    for s in &index.scenes {
        let scene = GaussianScene::load(&dir.join(&s.file), s.timestamp)?;
        if scene.len() != s.count {
            return Err(Error::format(
                "bundle",
                format!(
                    "{} holds {} Gaussians, index says {}",
                    s.file,
                    scene.len(),
                    s.count
                ),
            ));
        }
        scenes.insert(s.timestamp, scene);
    }
    let trajectory = Trajectory::load(
        &dir.join(&index.trajectory),
        index.trajectory_kind,
        index.camera.intrinsics()?,
    )?;
    if trajectory.len() != index.poses {
        return Err(Error::format(
            "bundle",
            format!(
                "trajectory has {} poses, index says {}",
                trajectory.len(),
                index.poses
            ),
        ));
    }
    Ok(Bundle {
        index,
        scenes,
        trajectory,
    })
}
