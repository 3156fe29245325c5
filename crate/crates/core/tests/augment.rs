use ambisplat::augment::*;
use ambisplat::geometry::{Camera, Intrinsics, Pose};
use ambisplat::image::RgbImage;
use ambisplat::scenegen::{generate, SyntheticSpec};
use ambisplat::splat::{rasterize, RenderSettings};
use ambisplat::views::{View, ViewRole};
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn source() -> Camera {
    let k = Intrinsics::from_fov(64, 48, 70.0);
    Camera::new(
        "cam0",
        k,
        Pose::look_at(
            &Point3::new(2.0, 1.5, 2.2),
            &Point3::new(0.0, 0.0, 0.8),
            &Vector3::z(),
        )
        .unwrap(),
    )
}

#[test]
fn zero_poses() {
    let cfg = AugmentConfig {
        n_per_camera: 0,
        ..AugmentConfig::default()
    };
    assert!(sample_aux_poses(&source(), &cfg, &Point3::origin())
        .unwrap()
        .is_empty());
    let bad = AugmentConfig {
        radius: 0.0,
        ..AugmentConfig::default()
    };
    assert!(sample_aux_poses(&source(), &bad, &Point3::origin()).is_err());
}

#[test]
fn poses_lie_in_the_facing_half_ball() {
    let cam = source();
    let center = Point3::new(0.0, 0.0, 0.8);
    let cfg = AugmentConfig::default();
    let poses = sample_aux_poses(&cam, &cfg, &center).unwrap();
    assert_eq!(poses.len(), 15);
    for p in &poses {
        let off = p.center() - cam.center();
        assert!(off.norm() <= 0.4 + 1e-12);
        assert!(off.dot(&(center - cam.center())) >= 0.0);
        assert_eq!(p.intrinsics, cam.intrinsics);
        let proj = p.project(&center);
        assert!(
            (proj.pixel.x - p.intrinsics.cx).abs() < 1e-9
                && (proj.pixel.y - p.intrinsics.cy).abs() < 1e-9
        );
        // image up stays on the source camera's side
        let up_src = -cam.pose.rotation_matrix().column(1).into_owned();
        let up = -p.pose.rotation_matrix().column(1).into_owned();
        assert!(up.dot(&up_src) > 0.5);
    }
    assert_eq!(poses, sample_aux_poses(&cam, &cfg, &center).unwrap());
    let other = AugmentConfig { seed: 1, ..cfg };
    assert_ne!(poses, sample_aux_poses(&cam, &other, &center).unwrap());
}

#[test]
fn radial_distribution_follows_cube_law() {
    let cam = source();
    let cfg = AugmentConfig {
        n_per_camera: 100_000,
        radius: 0.4,
        seed: 5,
    };
    let poses = sample_aux_poses(&cam, &cfg, &Point3::new(0.0, 0.0, 0.8)).unwrap();
    let mut r: Vec<f64> = poses
        .iter()
        .map(|p| (p.center() - cam.center()).norm() / 0.4)
        .collect();
    r.sort_by(f64::total_cmp);
    let n = r.len() as f64;
    let ks = r
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = x.powi(3);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS statistic {ks}");
}

fn item(seed: u64) -> RefineItem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mk = |rng: &mut ChaCha8Rng| {
        RgbImage::from_data(20, 16, (0..20 * 16 * 3).map(|_| rng.gen::<f64>()).collect())
            .unwrap()
            .quantized()
    };
    RefineItem {
        rendered: mk(&mut rng),
        reference: mk(&mut rng),
        alpha: (0..320).map(|_| rng.gen()).collect(),
    }
}

#[test]
fn identity_is_exact() {
    let it = item(1);
    assert_eq!(refine(&it, &Refiner::Identity).unwrap(), it.rendered);
    let mut bad = item(2);
    bad.alpha.pop();
    assert!(refine(&bad, &Refiner::Identity).is_err());
}

#[test]
fn hole_fill_left_half() {
    let (w, h) = (12, 6);
    let mut img = RgbImage::new(w, h);
    let mut alpha = vec![0.0; w * h];
    for y in 0..h {
        for x in w / 2..w {
            img.set(x, y, [y as f64 / 10.0, x as f64 / 20.0, 0.5]);
            alpha[y * w + x] = 1.0;
        }
    }
    let out = hole_fill(&img, &alpha);
    for y in 0..h {
        for x in 0..w {
            if x < w / 2 {
                assert_eq!(out.get(x, y), img.get(w / 2, y));
            } else {
                assert_eq!(out.get(x, y), img.get(x, y));
            }
        }
    }
    let empty = hole_fill(&img, &vec![0.0; w * h]);
    assert_eq!(empty, img);
}

fn sh(script: &str) -> Refiner {
    Refiner::External {
        command: vec!["sh".into(), "-c".into(), script.into(), "refiner".into()],
    }
}

#[test]
fn copy_through_subprocess_equals_identity() {
    let items: Vec<RefineItem> = (0..3).map(item).collect();
    let ext = refine_batch(
        &items,
        &sh(
            r#"test -f "$2/manifest.json" && test -f "$4/view_0002.png" && cp "$2"/view_*.png "$6"/"#,
        ),
    );
    let id = refine_batch(&items, &Refiner::Identity);
    for (a, b) in ext.into_iter().zip(id) {
        assert_eq!(a.unwrap(), b.unwrap());
    }
}

#[test]
fn failing_subprocess_fails_every_view() {
    let items: Vec<RefineItem> = (0..2).map(item).collect();
    for r in refine_batch(&items, &sh("exit 3")) {
        assert!(matches!(r, Err(ambisplat::Error::RefinementFailed(_))));
    }
    let missing = Refiner::External {
        command: vec!["/nonexistent/refiner".into()],
    };
    assert!(refine(&items[0], &missing).is_err());
    assert!(refine(&items[0], &Refiner::External { command: vec![] }).is_err());
}

#[test]
fn malformed_output_drops_only_that_view() {
    let items: Vec<RefineItem> = (0..3).map(item).collect();
    let out = refine_batch(
        &items,
        &sh(r#"cp "$2"/view_*.png "$6"/ && echo junk > "$6/view_0001.png""#),
    );
    assert!(out[0].is_ok() && out[2].is_ok());
    assert!(matches!(out[1], Err(ambisplat::Error::RefinementFailed(_))));
}

fn dataset_views() -> (ambisplat::scenegen::SyntheticDataset, Vec<View>) {
    let ds = generate(&SyntheticSpec {
        width: 48,
        height: 36,
        wand_frames: 10,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let views = ds
        .left_rig()
        .cameras
        .iter()
        .map(|c| {
            View::new(
                c.clone(),
                ds.images[&(0, c.id.clone())].clone(),
                ViewRole::Captured,
            )
            .unwrap()
        })
        .collect();
    (ds, views)
}

#[test]
fn four_cameras_give_sixty_views() {
    let (ds, views) = dataset_views();
    let center = Point3::new(0.0, 0.0, 1.0);
    let (aug, report) = build_augmented_set(
        &ds.scenes[0],
        &views,
        &AugmentConfig::default(),
        &Refiner::Identity,
        &center,
        &RenderSettings::default(),
    )
    .unwrap();
    assert_eq!(aug.len(), 60);
    assert_eq!(report.requested, 60);
    assert!(report.dropped.is_empty());
    assert!(aug.iter().all(|v| v.role == ViewRole::Augmented));

    let (crashed, report) = build_augmented_set(
        &ds.scenes[0],
        &views,
        &AugmentConfig::default(),
        &sh("exit 1"),
        &center,
        &RenderSettings::default(),
    )
    .unwrap();
    assert!(crashed.is_empty());
    assert_eq!(report.dropped.len(), 60);
}

#[test]
fn hole_fill_covers_deleted_regions() {
    let (ds, views) = dataset_views();
    let mut scene = ds.scenes[0].clone();
    // remove the walls to open holes
    scene
        .gaussians
        .retain(|g| g.position[0].hypot(g.position[1]) < 1.5);
    let bg = [1.0, 0.0, 1.0];
    let settings = RenderSettings::default().with_background(bg);
    let cfg = AugmentConfig {
        n_per_camera: 3,
        ..AugmentConfig::default()
    };
    let center = Point3::new(0.0, 0.0, 1.0);
    let (aug, _) =
        build_augmented_set(&scene, &views, &cfg, &Refiner::HoleFill, &center, &settings).unwrap();
    let mut holes_before = 0;
    assert_eq!(aug.len(), 12);
    for v in &aug {
        let out = rasterize(&scene, &v.camera, &settings).unwrap();
        let holes: Vec<usize> = (0..out.alpha.len())
            .filter(|&i| out.alpha[i] < 0.5)
            .collect();
        holes_before += holes.len();
        let quantized = out.color.quantized();
        for i in 0..out.alpha.len() {
            let (x, y) = (i % out.width(), i / out.width());
            if out.alpha[i] >= 0.5 {
                assert_eq!(v.image.get(x, y), quantized.get(x, y));
            } else {
                // filled pixels carry a covered pixel's color
                let c = v.image.get(x, y);
                assert!(quantized
                    .data
                    .chunks(3)
                    .zip(&out.alpha)
                    .any(|(p, &a)| a >= 0.5 && p == c));
            }
        }
    }
    assert!(holes_before > 0, "deleting Gaussians should open holes");
}
