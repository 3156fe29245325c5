use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ambisplat::calibration::{calibrate, read_observations, CalibrationOptions, WandSpec};
use ambisplat::error::{Error, Result};
use ambisplat::eval::{evaluate_orbit, evaluate_temporal, orbit, Trajectory, TrajectoryKind};
use ambisplat::geometry::CameraRig;
use ambisplat::manifest::Dataset;
use ambisplat::pipeline::{
    build_cloud, load_capture, run_all, run_pipeline, run_suite, PipelineConfig, Variant,
};
use ambisplat::replay::{export_replay, ReplayOptions};
use ambisplat::scenegen::{generate, SyntheticSpec};
use ambisplat::splat::{rasterize, GaussianScene};
use ambisplat::stereo::{write_ply, PlyFormat};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Point3;

#[derive(Parser)]
#[command(
    name = "ambisplat",
    version,
    about = "Room-scale Gaussian splat reconstruction from ambient stereo cameras"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON generator spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate extrinsics from a wand recording.
    Calibrate {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        wand: PathBuf,
        /// Rig file supplying intrinsics; its first camera fixes the world frame.
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fuse depth maps of one timestamp into a point cloud.
    Fuse {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        timestamp: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ascii: bool,
    },
    /// Run the reconstruction pipeline.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// One timestamp; all manifest timestamps when absent.
        #[arg(long)]
        timestamp: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a scene from a rig camera.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        rig: PathBuf,
        #[arg(long)]
        camera: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_vec3)]
        background: Option<[f64; 3]>,
    },
    /// Evaluate reconstructions.
    Eval {
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scene files; several for the temporal protocol.
        #[arg(long, num_args = 1..)]
        scene: Vec<PathBuf>,
        /// Ground-truth scene for orbit fidelity.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Fixed camera for the temporal protocol.
        #[arg(long)]
        camera: Option<String>,
        #[arg(long, num_args = 1..)]
        radius: Vec<f64>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long, value_parser = parse_vec3)]
        center: Option<[f64; 3]>,
        #[arg(long, default_value_t = 0)]
        timestamp: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a replay bundle for the viewer.
    Replay {
        /// `timestamp=path` pairs.
        #[arg(long, num_args = 1.., value_parser = parse_scene_arg)]
        scene: Vec<(u32, PathBuf)>,
        /// JSON list of {q, t, time}; needs --rig for intrinsics.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        rig: PathBuf,
        /// Orbit radius when no trajectory file is given.
        #[arg(long, default_value_t = 1.5)]
        radius: f64,
        #[arg(long, default_value_t = 50)]
        views: usize,
        #[arg(long, value_parser = parse_vec3)]
        center: Option<[f64; 3]>,
        #[arg(long)]
        bake: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a bundle directory over HTTP.
    Serve {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Print the JSON schema of the pipeline configuration.
    Schema,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Holdout,
    Orbit,
    Temporal,
    Suite,
}

fn parse_vec3(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected x,y,z".to_string())
}

fn parse_scene_arg(s: &str) -> std::result::Result<(u32, PathBuf), String> {
    let (t, p) = s.split_once('=').ok_or("expected timestamp=path")?;
    Ok((
        t.parse().map_err(|e| format!("{t}: {e}"))?,
        PathBuf::from(p),
    ))
}

const DEFAULT_CENTER: [f64; 3] = [0.0, 0.0, 0.8];

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, spec, seed } => {
            let mut spec: SyntheticSpec = match spec {
                Some(p) => load_json(&p)?,
                None => SyntheticSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            spec.validate()?;
            let ds = generate(&spec)?.write(&out)?;
            println!(
                "wrote {} cameras x {} timestamps to {}",
                ds.manifest.cameras.len(),
                ds.manifest.timestamps.len(),
                out.display()
            );
        }
        Command::Calibrate {
            obs,
            wand,
            intrinsics,
            out,
            report,
        } => {
            let spec: WandSpec = load_json(&wand)?;
            let rig = CameraRig::load(&intrinsics)?;
            let observations = read_observations(&obs)?;
            let rep = calibrate(&rig, &observations, &spec, &CalibrationOptions::default())
                .map_err(|e| e.in_stage("calibrate"))?;
            rep.rig.save(&out)?;
            if let Some(p) = report {
                std::fs::write(&p, rep.to_json()?).map_err(|e| Error::io(&p, e))?;
            }
            println!(
                "mean reprojection {:.3} px (max {:.3}), scale {:.5}, {} frames",
                rep.mean_reprojection_px,
                rep.max_reprojection_px,
                rep.scale_factor,
                rep.frames_used
            );
        }
        Command::Fuse {
            manifest,
            config,
            timestamp,
            out,
            ascii,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = Dataset::load(&manifest)?;
            let mut timings = Vec::new();
            let capture = load_capture(&ds, &cfg, timestamp, &mut timings)?;
            let cloud = build_cloud(&capture, &cfg.fuse).map_err(|e| e.in_stage("fuse"))?;
            let fmt = if ascii {
                PlyFormat::Ascii
            } else {
                PlyFormat::BinaryLittleEndian
            };
            write_ply(&cloud, &out, fmt)?;
            println!("{} points", cloud.len());
        }
        Command::Train {
            manifest,
            config,
            timestamp,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.output = Some(out.clone());
            let ds = Dataset::load(&manifest)?;
            let results = match timestamp {
                Some(t) => vec![run_pipeline(&ds, &cfg, t)],
                None => run_all(&ds, &cfg)?,
            };
            let mut first_err = None;
            for r in results {
                match r {
                    Ok(o) => {
                        let h = o.holdout.as_ref();
                        println!(
                            "t{} {}: {} Gaussians, holdout PSNR {} SSIM {}, {:.1} s",
                            o.timestamp,
                            o.variant.name(),
                            o.scene.as_ref().map_or(0, GaussianScene::len),
                            h.map_or("-".into(), |h| format!("{:.2}", h.psnr_stats.mean)),
                            h.map_or("-".into(), |h| format!("{:.4}", h.ssim_stats.mean)),
                            o.total_seconds()
                        );
                    }
                    Err(e) => {
                        log::error!("{e}");
                        first_err.get_or_insert(e);
                    }
                }
            }
            if let Some(e) = first_err {
                return Err(e);
            }
        }
        Command::Render {
            scene,
            rig,
            camera,
            out,
            background,
        } => {
            let rig = CameraRig::load(&rig)?;
            let cam = rig
                .get(&camera)
                .ok_or_else(|| Error::Validation(format!("camera {camera} not in rig")))?;
            let scene = GaussianScene::load(&scene, 0)?;
            let mut settings = ambisplat::splat::RenderSettings::default();
            if let Some(bg) = background {
                settings.background = bg;
            }
            rasterize(&scene, cam, &settings)?.color.save_png(&out)?;
        }
        Command::Eval {
            protocol,
            manifest,
            config,
            scene,
            reference,
            rig,
            camera,
            radius,
            views,
            center,
            timestamp,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            create_dir(&out)?;
            eval(
                protocol, &mut cfg, manifest, scene, reference, rig, camera, radius, views, center,
                timestamp, &out,
            )?;
        }
        Command::Replay {
            scene,
            trajectory,
            rig,
            radius,
            views,
            center,
            bake,
            out,
        } => {
            if scene.is_empty() {
                return Err(Error::Validation(
                    "at least one --scene timestamp=path is required".into(),
                ));
            }
            let rig = CameraRig::load(&rig)?;
            let k = rig
                .cameras
                .first()
                .ok_or_else(|| Error::Validation("rig has no cameras".into()))?
                .intrinsics;
            let mut scenes = BTreeMap::new();
            for (t, p) in &scene {
                scenes.insert(*t, GaussianScene::load(p, *t)?);
            }
            let traj = match trajectory {
                Some(p) => Trajectory::load(&p, TrajectoryKind::Egocentric, k)?,
                None => {
                    let c = center.unwrap_or(DEFAULT_CENTER);
                    let t0 = *scenes.keys().next().expect("non-empty");
                    orbit(
                        Point3::from(c),
                        radius,
                        views,
                        ambisplat::eval::DEFAULT_ORBIT_HEIGHT,
                        k,
                        t0,
                    )?
                }
            };
            let opts = ReplayOptions {
                bake_frames: bake,
                ..ReplayOptions::default()
            };
            let index = export_replay(&scenes, &traj, &out, &opts)?;
            println!(
                "bundle with {} scenes and {} poses at {}",
                index.scenes.len(),
                index.poses,
                out.display()
            );
        }
        Command::Serve { dir, addr } => serve(dir, addr)?,
        Command::Schema => println!("{}", ambisplat::pipeline::config_schema()),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    protocol: Protocol,
    cfg: &mut PipelineConfig,
    manifest: Option<PathBuf>,
    scenes: Vec<PathBuf>,
    reference: Option<PathBuf>,
    rig: Option<PathBuf>,
    camera: Option<String>,
    radius: Vec<f64>,
    views: Option<usize>,
    center: Option<[f64; 3]>,
    timestamp: u32,
    out: &Path,
) -> Result<()> {
    let need_manifest = || {
        manifest
            .as_deref()
            .ok_or_else(|| Error::Validation("this protocol needs --manifest".into()))
            .and_then(Dataset::load)
    };
    let load_rig = |ds: Option<&Dataset>| -> Result<CameraRig> {
        match (&rig, ds) {
            (Some(p), _) => CameraRig::load(p),
            (None, Some(ds)) => CameraRig::load(&ds.resolve(&ds.manifest.rig)),
            (None, None) => Err(Error::Validation("needs --rig or --manifest".into())),
        }
    };
    match protocol {
        Protocol::Holdout => {
            let ds = need_manifest()?;
            let report = match scenes.first() {
                Some(p) => {
                    let scene = GaussianScene::load(p, timestamp)?;
                    let mut timings = Vec::new();
                    let capture = load_capture(&ds, cfg, timestamp, &mut timings)?;
                    let views = ambisplat::views::HeldOut::all(&capture.held_out);
                    ambisplat::eval::evaluate_held_out(&scene, &views, &cfg.train.render)?
                }
                None => {
                    cfg.output = Some(out.to_path_buf());
                    run_pipeline(&ds, cfg, timestamp)?.holdout.ok_or_else(|| {
                        Error::Protocol("dataset has no right-camera images".into())
                    })?
                }
            };
            report.write_csv(&out.join("holdout.csv"))?;
            write_json(&out.join("holdout.json"), &report)?;
            println!(
                "holdout PSNR {:.2} ± {:.2} dB, SSIM {:.4} ± {:.4}",
                report.psnr_stats.mean,
                report.psnr_stats.std,
                report.ssim_stats.mean,
                report.ssim_stats.std
            );
        }
        Protocol::Orbit => {
            let path = scenes
                .first()
                .ok_or_else(|| Error::Validation("orbit protocol needs --scene".into()))?;
            let scene = GaussianScene::load(path, timestamp)?;
            let ds = manifest.as_deref().map(Dataset::load).transpose()?;
            let k = load_rig(ds.as_ref())?
                .cameras
                .first()
                .ok_or_else(|| Error::Validation("rig has no cameras".into()))?
                .intrinsics;
            let gt = reference
                .as_deref()
                .map(|p| GaussianScene::load(p, timestamp))
                .transpose()?;
            let radii = if radius.is_empty() {
                cfg.eval.orbit_radii.clone()
            } else {
                radius
            };
            let n = views.unwrap_or(cfg.eval.orbit_views);
            let c = Point3::from(center.or(cfg.scene_center).unwrap_or(DEFAULT_CENTER));
            let mut reports = Vec::new();
            for r in radii {
                let traj = orbit(c, r, n, cfg.eval.orbit_height, k, timestamp)?;
                let rep = evaluate_orbit(&scene, &traj, r, &cfg.train.render, gt.as_ref())?;
                println!(
                    "radius {r}: tPSNR {:.2} tSSIM {:.4} flicker {:.5}{}",
                    rep.t_psnr,
                    rep.t_ssim,
                    rep.flicker,
                    rep.reference.as_ref().map_or(String::new(), |m| format!(
                        " PSNR vs reference {:.2}",
                        m.psnr_stats.mean
                    ))
                );
                reports.push(rep);
            }
            write_json(&out.join("orbit.json"), &reports)?;
        }
        Protocol::Temporal => {
            if scenes.len() < 2 {
                return Err(Error::Validation(
                    "temporal protocol needs at least two --scene files".into(),
                ));
            }
            let ds = manifest.as_deref().map(Dataset::load).transpose()?;
            let rig = load_rig(ds.as_ref())?;
            let cam = match &camera {
                Some(id) => rig
                    .get(id)
                    .ok_or_else(|| Error::Validation(format!("camera {id} not in rig")))?,
                None => rig
                    .cameras
                    .first()
                    .ok_or_else(|| Error::Validation("rig has no cameras".into()))?,
            };
            let loaded = scenes
                .iter()
                .enumerate()
                .map(|(i, p)| GaussianScene::load(p, i as u32))
                .collect::<Result<Vec<_>>>()?;
            let rep = evaluate_temporal(&loaded, cam, &cfg.train.render)?;
            write_json(&out.join("temporal.json"), &rep)?;
            println!(
                "tPSNR {:.2} tSSIM {:.4} flicker {:.5}",
                rep.t_psnr.unwrap_or_default(),
                rep.t_ssim.unwrap_or_default(),
                rep.flicker.unwrap_or_default()
            );
        }
        Protocol::Suite => {
            let ds = need_manifest()?;
            cfg.output = Some(out.to_path_buf());
            let table = run_suite(&ds, cfg, &Variant::ALL, timestamp)?;
            for r in &table.rows {
                match &r.error {
                    None => println!(
                        "{:<20} PSNR {:.2} ± {:.2}  SSIM {:.4} ± {:.4}  {:.1} s",
                        r.variant.name(),
                        r.psnr.mean,
                        r.psnr.std,
                        r.ssim.mean,
                        r.ssim.std,
                        r.runtime_s
                    ),
                    Some(e) => println!("{:<20} failed: {e}", r.variant.name()),
                }
            }
        }
    }
    Ok(())
}

fn serve(dir: PathBuf, addr: String) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::Validation(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io(&dir, e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Error::Configuration(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Error::io(&dir, e))?;
        println!("serving {} at http://{local}/", dir.display());
        let app = axum::Router::new().fallback_service(tower_http::services::ServeDir::new(&dir));
        axum::serve(listener, app)
            .await
            .map_err(|e| Error::io(&dir, e))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
