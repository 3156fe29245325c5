use std::cell::Cell;

use ambisplat::eval::psnr;
use ambisplat::geometry::{Camera, Intrinsics, Pose};
use ambisplat::image::RgbImage;
use ambisplat::splat::*;
use ambisplat::train::*;
use ambisplat::views::{View, ViewRole, ViewSet};
use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smooth_settings(bg: [f64; 3]) -> RenderSettings {
    RenderSettings {
        alpha_cutoff: 0.0,
        transmittance_floor: 0.0,
        ..RenderSettings::default().with_background(bg)
    }
}

fn small_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianScene {
    let g = (0..n)
        .map(|_| {
            let q = UnitQuaternion::from_euler_angles(
                rng.gen::<f64>() * 3.0,
                rng.gen::<f64>() * 3.0,
                rng.gen::<f64>() * 3.0,
            );
            // unnormalized quaternion exercises the normalization chain
            let s = rng.gen_range(0.8..1.3);
            Gaussian {
                position: [
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(1.5..2.5),
                ],
                log_scale: [
                    rng.gen_range(-2.6..-1.6),
                    rng.gen_range(-2.6..-1.6),
                    rng.gen_range(-2.6..-1.6),
                ],
                rotation: [q.w * s, q.i * s, q.j * s, q.k * s],
                opacity_logit: rng.gen_range(-1.5..1.5),
                color: [rng.gen(), rng.gen(), rng.gen()],
            }
        })
        .collect();
    GaussianScene::new(g, 0)
}

fn cam32() -> Camera {
    Camera::new("c", Intrinsics::from_fov(32, 32, 50.0), Pose::identity())
}

fn weighted_sum(scene: &GaussianScene, cam: &Camera, s: &RenderSettings, w: &[f64]) -> f64 {
    let out = rasterize(scene, cam, s).unwrap();
    out.color.data.iter().zip(w).map(|(a, b)| a * b).sum()
}

#[test]
fn backward_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cam = cam32();
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let scene = small_scene(&mut rng, 6);
        let s = smooth_settings([rng.gen(), rng.gen(), rng.gen()]);
        let w: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads = backward(&scene, &cam, &s, &w).unwrap();
        let h = 1e-4;
        for (gi, g) in scene.gaussians.iter().enumerate() {
            for p in 0..PARAMS {
                let eval = |d: f64| {
                    let mut sc = scene.clone();
                    let mut v = g.to_params();
                    v[p] += d;
                    sc.gaussians[gi] = Gaussian::from_params(&v);
                    weighted_sum(&sc, &cam, &s, &w)
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = grads[gi][p];
                if ana.abs() + num.abs() > 1e-8 {
                    let rel = (ana - num).abs() / ana.abs().max(num.abs());
                    worst = worst.max(rel);
                    assert!(
                        rel < 1e-3,
                        "gaussian {gi} param {p}: analytic {ana} numeric {num}"
                    );
                }
            }
        }
    }
    println!("worst relative error {worst:.2e}");
}

#[test]
fn zero_image_gradient_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let scene = small_scene(&mut rng, 5);
    let grads = backward(
        &scene,
        &cam32(),
        &RenderSettings::default(),
        &vec![0.0; 32 * 32 * 3],
    )
    .unwrap();
    assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    assert!(backward(&scene, &cam32(), &RenderSettings::default(), &[0.0; 5]).is_err());
}

#[test]
fn solo_color_gradient_is_weighted_alpha() {
    let cam = cam32();
    let g = Gaussian::isotropic([0.05, -0.02, 2.0], 0.08, 0.6, [0.2, 0.4, 0.6]);
    let scene = GaussianScene::new(vec![g], 0);
    let s = RenderSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.gen()).collect();
    let grads = backward(&scene, &cam, &s, &w).unwrap();
    let out = rasterize(&scene, &cam, &s).unwrap();
    for c in 0..3 {
        // one splat: weight αT = alpha
        let expect: f64 = (0..32 * 32).map(|i| out.alpha[i] * w[3 * i + c]).sum();
        assert!((grads[0][11 + c] - expect).abs() < 1e-9 * expect.abs().max(1.0));
    }
}

#[test]
fn loss_examples() {
    let img = RgbImage::filled(16, 16, [0.3, 0.6, 0.9]);
    let l = loss(&img, &img, 0.2, 0.2, &[f64::NEG_INFINITY; 4]).unwrap();
    assert_eq!(l.total, 0.0);
    let l = loss(&img, &img, 0.2, 0.2, &[0.0; 7]).unwrap();
    assert!((l.total - 0.1).abs() < 1e-15);

    // uniform patches: SSIM = (2·μa·μb + C1) / (μa² + μb² + C1), contrast term is 1
    let r = RgbImage::filled(16, 16, [0.5; 3]);
    let t = RgbImage::filled(16, 16, [0.0; 3]);
    let s = 1e-4 / (0.25 + 1e-4);
    let expect = 0.8 * 0.5 + 0.2 * (1.0 - s) / 2.0;
    let l = loss(&r, &t, 0.2, 0.0, &[]).unwrap();
    assert!((l.total - expect).abs() < 1e-12, "{} vs {expect}", l.total);
    assert!(loss(&r, &RgbImage::filled(16, 15, [0.0; 3]), 0.2, 0.0, &[]).is_err());
}

#[test]
fn loss_image_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mk = |rng: &mut ChaCha8Rng| {
        RgbImage::from_data(
            14,
            13,
            (0..14 * 13 * 3)
                .map(|_| rng.gen_range(0.05..0.95))
                .collect(),
        )
        .unwrap()
    };
    let r = mk(&mut rng);
    let t = mk(&mut rng);
    let l = loss(&r, &t, 0.2, 0.0, &[]).unwrap();
    let h = 1e-6;
    for i in (0..r.data.len()).step_by(17) {
        let f = |d: f64| {
            let mut x = r.clone();
            x.data[i] += d;
            loss(&x, &t, 0.2, 0.0, &[]).unwrap().total
        };
        let num = (f(h) - f(-h)) / (2.0 * h);
        assert!(
            (num - l.grad_image[i]).abs() < 1e-6 * num.abs().max(1e-3),
            "{i}: {num} vs {}",
            l.grad_image[i]
        );
    }
}

#[test]
fn opacity_regularizer_gradient() {
    let logits = [-2.0, 0.0, 0.7, 3.0];
    let g = opacity_gradient(&logits, 0.2);
    for (o, d) in logits.iter().zip(&g) {
        let s = sigmoid(*o);
        assert!((d - 0.2 * s * (1.0 - s) / 4.0).abs() < 1e-15);
    }
}

/// Twenty Gaussians in front of four cameras on a small arc.
fn self_reconstruction_setup() -> (GaussianScene, ViewSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let gt: Vec<Gaussian> = (0..20)
        .map(|_| {
            Gaussian::isotropic(
                [
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ],
                rng.gen_range(0.06..0.12),
                rng.gen_range(0.5..0.9),
                [rng.gen(), rng.gen(), rng.gen()],
            )
        })
        .collect();
    let gt = GaussianScene::new(gt, 0);
    let k = Intrinsics::from_fov(48, 40, 55.0);
    let views = (0..4)
        .map(|i| {
            let a = -0.5 + 0.33 * i as f64;
            let eye = Point3::new(2.2 * a.sin(), 0.3 * (i as f64 - 1.5), -2.2 * a.cos());
            let cam = Camera::new(
                format!("v{i}"),
                k,
                Pose::look_at(&eye, &Point3::origin(), &-Vector3::y()).unwrap(),
            );
            let img = rasterize(&gt, &cam, &RenderSettings::default())
                .unwrap()
                .color;
            View::new(cam, img, ViewRole::Captured).unwrap()
        })
        .collect();
    (gt, ViewSet::new(views))
}

fn quick_config(warmup: usize, refine: usize) -> TrainConfig {
    TrainConfig {
        warmup_steps: warmup,
        refine_steps: refine,
        random_background: false,
        lambda_opacity: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn perturbed_scene_trains_back() {
    let (gt, views) = self_reconstruction_setup();
    let start = ambisplat::scenegen::perturb(&gt, 0.01, 0.05, 1);
    let cfg = quick_config(500, 1500);
    let r = train(start, &views, &mut NoAugment, &cfg).unwrap();
    assert_eq!(r.gaussian_counts.len(), 2000);
    assert!(r.gaussian_counts.iter().all(|&c| c == 20));
    let first: f64 = r.history[..20].iter().map(|h| h.total).sum::<f64>();
    let last_warm: f64 = r.history[480..500].iter().map(|h| h.total).sum::<f64>();
    assert!(
        last_warm < 0.8 * first,
        "warm-up loss {first} -> {last_warm}"
    );
    for v in &views.views {
        let p = psnr(
            &rasterize(&r.scene, &v.camera, &cfg.render).unwrap().color,
            &v.image,
        )
        .unwrap();
        assert!(p >= 40.0, "view {} psnr {p:.2}", v.camera.id);
    }
}

struct Counting<'a>(&'a Cell<usize>);

impl AugmentProvider for Counting<'_> {
    fn augment(&mut self, _scene: &GaussianScene) -> ambisplat::Result<Vec<View>> {
        self.0.set(self.0.get() + 1);
        Ok(Vec::new())
    }
}

#[test]
fn zero_refine_steps_skip_the_provider() {
    let (gt, views) = self_reconstruction_setup();
    let start = ambisplat::scenegen::perturb(&gt, 0.01, 0.05, 1);
    let calls = Cell::new(0);
    let cfg = TrainConfig {
        random_background: true,
        ..quick_config(30, 0)
    };
    let a = train(start.clone(), &views, &mut Counting(&calls), &cfg).unwrap();
    let b = train(start, &views, &mut NoAugment, &cfg).unwrap();
    assert_eq!(calls.get(), 0);
    assert_eq!(a.scene.gaussians, b.scene.gaussians);
    assert_eq!(a.history, b.history);
    assert_eq!(a.refine_steps_run, 0);
}

#[test]
fn fixed_seed_is_bit_identical() {
    let (gt, views) = self_reconstruction_setup();
    let start = ambisplat::scenegen::perturb(&gt, 0.01, 0.05, 2);
    let cfg = TrainConfig {
        random_background: true,
        seed: 99,
        ..quick_config(20, 20)
    };
    let calls = Cell::new(0);
    let a = train(start.clone(), &views, &mut Counting(&calls), &cfg).unwrap();
    let b = train(start.clone(), &views, &mut NoAugment, &cfg).unwrap();
    assert_eq!(calls.get(), 1);
    assert_eq!(a.history, b.history);
    let mut x = Vec::new();
    let mut y = Vec::new();
    write_loss_csv(&a.history, &mut x).unwrap();
    write_loss_csv(&b.history, &mut y).unwrap();
    assert_eq!(x, y);
    assert!(String::from_utf8(x)
        .unwrap()
        .starts_with("step,l1,dssim,opacity,total\n"));
    let c = train(
        start,
        &views,
        &mut NoAugment,
        &TrainConfig { seed: 100, ..cfg },
    )
    .unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn nan_state_reports_divergence() {
    let (gt, views) = self_reconstruction_setup();
    let mut bad = gt.clone();
    bad.gaussians[3].color[1] = f64::NAN;
    let err = train(bad, &views, &mut NoAugment, &quick_config(5, 0)).unwrap_err();
    match err {
        ambisplat::Error::Diverged { step, detail } => {
            assert_eq!(step, 0);
            assert!(detail.contains("non-finite"), "{detail}");
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn held_out_views_cannot_train() {
    let (gt, mut views) = self_reconstruction_setup();
    views.views[2].role = ViewRole::HeldOut;
    assert!(matches!(
        train(gt.clone(), &views, &mut NoAugment, &quick_config(5, 0)),
        Err(ambisplat::Error::Protocol(_))
    ));

    struct Leaky(View);
    impl AugmentProvider for Leaky {
        fn augment(&mut self, _: &GaussianScene) -> ambisplat::Result<Vec<View>> {
            Ok(vec![self.0.clone()])
        }
    }
    let (gt, views) = self_reconstruction_setup();
    let leak = views.views[0].clone();
    assert!(matches!(
        train(gt, &views, &mut Leaky(leak), &quick_config(2, 2)),
        Err(ambisplat::Error::Protocol(_))
    ));
}

#[test]
fn config_validation() {
    let cfg: TrainConfig = serde_json::from_str(r#"{"warmup_steps": 3}"#).unwrap();
    assert_eq!(cfg.warmup_steps, 3);
    assert_eq!(cfg.refine_steps, 1500);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"warmup_step": 3}"#).is_err());
    let (gt, views) = self_reconstruction_setup();
    for bad in [
        TrainConfig {
            densify: true,
            ..TrainConfig::default()
        },
        TrainConfig {
            alpha_dssim: 1.5,
            ..TrainConfig::default()
        },
        TrainConfig {
            lambda_opacity: -1.0,
            ..TrainConfig::default()
        },
    ] {
        assert!(train(gt.clone(), &views, &mut NoAugment, &bad).is_err());
    }
    assert!(matches!(
        train(
            GaussianScene::new(vec![], 0),
            &views,
            &mut NoAugment,
            &quick_config(1, 0)
        ),
        Err(ambisplat::Error::EmptyInitialization)
    ));
}
