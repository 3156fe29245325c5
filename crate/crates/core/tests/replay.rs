use std::collections::BTreeMap;

use ambisplat::error::Error;
use ambisplat::eval::{orbit, Trajectory, TrajectoryKind};
use ambisplat::geometry::Intrinsics;
use ambisplat::image::RgbImage;
use ambisplat::replay::*;
use ambisplat::splat::{Gaussian, GaussianScene, RenderSettings};
use nalgebra::Point3;

fn scene(t: u32, shift: f64) -> GaussianScene {
    let gs = (0..30)
        .map(|i| {
            let a = i as f64 * 0.7;
            Gaussian::isotropic(
                [0.4 * a.cos() + shift, 0.4 * a.sin(), 0.5 + 0.03 * i as f64],
                0.08,
                0.7,
                [(i % 3) as f64 / 2.0, 0.5, 1.0 - (i % 5) as f64 / 4.0],
            )
        })
        .collect();
    GaussianScene::new(gs, t)
}

fn k() -> Intrinsics {
    Intrinsics::from_fov(48, 36, 70.0)
}

#[test]
fn single_scene_orbit_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = BTreeMap::from([(0, scene(0, 0.0))]);
    let traj = orbit(Point3::new(0.0, 0.0, 0.8), 2.0, 50, 1.6, k(), 0).unwrap();
    let idx = export_replay(&scenes, &traj, dir.path(), &ReplayOptions::default()).unwrap();
    assert_eq!(idx.scenes.len(), 1);
    assert_eq!(idx.poses, 50);
    assert_eq!(idx.scenes[0].count, 30);
    assert!(idx.frames.is_none());

    // the viewer reads these keys
    let raw: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(BUNDLE_INDEX)).unwrap())
            .unwrap();
    for key in [
        "version",
        "egsp_version",
        "scenes",
        "trajectory",
        "trajectory_kind",
        "poses",
        "camera",
        "background",
    ] {
        assert!(raw.get(key).is_some(), "missing {key}");
    }
    assert_eq!(raw["trajectory_kind"], "orbit");
    assert_eq!(raw["scenes"][0]["file"], "scenes/scene_t0.egsp");
    let poses: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("trajectory.json")).unwrap())
            .unwrap();
    assert_eq!(poses.len(), 50);
    assert!(
        poses[0].get("q").is_some()
            && poses[0].get("t").is_some()
            && poses[0].get("time").is_some()
    );

    let b = load_bundle(dir.path()).unwrap();
    assert_eq!(b.index, idx);
    assert_eq!(b.scenes[&0], scenes[&0].quantized());
    assert_eq!(b.trajectory.len(), 50);
}

#[test]
fn missing_timestamp_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = BTreeMap::from([(0, scene(0, 0.0)), (1, scene(1, 0.1))]);
    let mut traj = orbit(Point3::new(0.0, 0.0, 0.8), 2.0, 5, 1.6, k(), 0).unwrap();
    traj.times[3] = 7;
    let err = export_replay(&scenes, &traj, dir.path(), &ReplayOptions::default()).unwrap_err();
    assert!(matches!(err, Error::TimestampMismatch(7)));
    assert!(err.to_string().contains('7'));
    assert!(err.is_validation());
    assert!(!dir.path().join(BUNDLE_INDEX).exists());
}

#[test]
fn baked_frames_match_on_demand_renders() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = BTreeMap::from([(0, scene(0, 0.0)), (1, scene(1, 0.2))]);
    let base = orbit(Point3::new(0.0, 0.0, 0.8), 1.8, 6, 1.6, k(), 0).unwrap();
    let times = vec![0, 0, 1, 1, 0, 1];
    let traj = Trajectory {
        kind: TrajectoryKind::Egocentric,
        cameras: base.cameras.clone(),
        times,
    };
    let opts = ReplayOptions {
        bake_frames: true,
        settings: RenderSettings::default().with_background([0.1, 0.2, 0.3]),
    };
    let idx = export_replay(&scenes, &traj, dir.path(), &opts).unwrap();
    let frames = idx.frames.clone().unwrap();
    assert_eq!(frames.len(), 6);
    let bundle = load_bundle(dir.path()).unwrap();
    for (i, f) in frames.iter().enumerate() {
        let baked = RgbImage::load_png(&dir.path().join(f)).unwrap();
        let fresh = render_pose(&bundle.scenes, &bundle.trajectory, i, &opts.settings).unwrap();
        assert_eq!(
            baked.to_rgb8().as_raw(),
            fresh.to_rgb8().as_raw(),
            "frame {i}"
        );
    }
    // frames of different timestamps differ
    let a = RgbImage::load_png(&dir.path().join(&frames[0])).unwrap();
    let b = RgbImage::load_png(&dir.path().join(&frames[2])).unwrap();
    assert_ne!(a, b);
}

#[test]
fn corrupted_bundles_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = BTreeMap::from([(0, scene(0, 0.0))]);
    let traj = orbit(Point3::new(0.0, 0.0, 0.8), 2.0, 4, 1.6, k(), 0).unwrap();
    export_replay(&scenes, &traj, dir.path(), &ReplayOptions::default()).unwrap();
    let p = dir.path().join(BUNDLE_INDEX);
    let good = std::fs::read_to_string(&p).unwrap();

    std::fs::write(&p, good.replace("\"count\": 30", "\"count\": 31")).unwrap();
    assert!(matches!(load_bundle(dir.path()), Err(Error::Format { .. })));
    std::fs::write(&p, good.replace("\"poses\": 4", "\"poses\": 5")).unwrap();
    assert!(load_bundle(dir.path()).is_err());
    std::fs::write(&p, good.replace("\"version\": 1", "\"version\": 9")).unwrap();
    assert!(load_bundle(dir.path()).is_err());

    let empty = Trajectory {
        kind: TrajectoryKind::Custom,
        cameras: vec![],
        times: vec![],
    };
    assert!(matches!(
        export_replay(&scenes, &empty, dir.path(), &ReplayOptions::default()),
        Err(Error::Validation(_))
    ));
}
