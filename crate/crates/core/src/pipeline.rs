//! End-to-end orchestration per timestamp: rig → depth → fusion →
//! initialization → training → evaluation → export.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentConfig, AugmentReport, Refiner, ViewAugmenter};
use crate::calibration::{
    calibrate, read_observations, CalibrationOptions, CalibrationReport, WandSpec,
};
use crate::error::{Error, Result};
use crate::eval::{depth_reprojection_render, MetricReport, Stats};
use crate::geometry::{Camera, CameraRig, Pose};
use crate::image::RgbImage;
use crate::manifest::{Dataset, StereoRole};
use crate::splat::{init_from_cloud, rasterize, GaussianScene};
use crate::stereo::{
    block_match, disparity_to_depth, fuse, remove_outliers, voxel_downsample, write_ply, DepthMap,
    FusedPointCloud, PlyFormat, DEFAULT_OUTLIER_K, DEFAULT_OUTLIER_RATIO, DEFAULT_VOXEL,
};
use crate::train::{save_loss_csv, train, NoAugment, TrainConfig, TrainResult};
use crate::views::{HeldOut, View, ViewRole, ViewSet};

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Serialize,
    Deserialize,
    schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Fused cloud splatted straight into the target view.
    DepthReprojection,
    /// Training from random positions in the cloud's bounding box.
    Baseline3dgs,
    /// Cloud initialization, no augmented views.
    NoAugment,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::DepthReprojection,
        Variant::Baseline3dgs,
        Variant::NoAugment,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DepthReprojection => "depth_reprojection",
            Variant::Baseline3dgs => "baseline_3dgs",
            Variant::NoAugment => "no_augment",
            Variant::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default, schemars::JsonSchema)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DepthSource {
    /// Depth maps listed in the manifest.
    #[default]
    Ingest,
    /// SAD block matching on each left/right pair.
    BlockMatch { max_disparity: usize, window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct FuseConfig {
    pub depth: DepthSource,
    pub voxel: f64,
    pub outlier_k: usize,
    pub outlier_ratio: f64,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self {
            depth: DepthSource::Ingest,
            voxel: DEFAULT_VOXEL,
            outlier_k: DEFAULT_OUTLIER_K,
            outlier_ratio: DEFAULT_OUTLIER_RATIO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub orbit_radii: Vec<f64>,
    pub orbit_views: usize,
    pub orbit_height: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            orbit_radii: vec![1.0, 1.5, 2.0],
            orbit_views: 50,
            orbit_height: crate::eval::DEFAULT_ORBIT_HEIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub variant: Variant,
    /// Re-estimate extrinsics from the wand recording instead of trusting the rig file.
    pub calibrate: bool,
    pub fuse: FuseConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub refiner: Refiner,
    pub eval: EvalConfig,
    /// Aim point of auxiliary views; the cloud centroid when absent.
    pub scene_center: Option<[f64; 3]>,
    /// Timestamps processed concurrently.
    pub workers: usize,
    pub output: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            calibrate: false,
            fuse: FuseConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            refiner: Refiner::HoleFill,
            eval: EvalConfig::default(),
            scene_center: None,
            workers: 1,
            output: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        let f = &self.fuse;
        if !(f.voxel > 0.0) || f.outlier_k == 0 || !(f.outlier_ratio > 0.0) {
            return Err(Error::Validation(format!(
                "fuse parameters voxel {} k {} ratio {} must be positive",
                f.voxel, f.outlier_k, f.outlier_ratio
            )));
        }
        if let DepthSource::BlockMatch { window, .. } = f.depth {
            if window == 0 || window % 2 == 0 {
                return Err(Error::Validation(format!(
                    "block-match window {window} must be odd"
                )));
            }
        }
        if self.workers == 0 {
            return Err(Error::Validation("workers must be at least 1".into()));
        }
        if let Refiner::External { command } = &self.refiner {
            if command.is_empty() {
                return Err(Error::Validation(
                    "external refiner command is empty".into(),
                ));
            }
        }
        if self.eval.orbit_views < 2 || self.eval.orbit_radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Validation(
                "orbit needs >= 2 views and positive radii".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

fn stage<T>(
    timings: &mut Vec<StageTiming>,
    name: &'static str,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(name));
    let seconds = start.elapsed().as_secs_f64();
    log::info!("stage {name}: {seconds:.2} s");
    timings.push(StageTiming {
        stage: name.to_string(),
        seconds,
    });
    out
}

/// Everything one timestamp contributes before reconstruction.
#[derive(Debug, Clone)]
pub struct Capture {
    pub timestamp: u32,
    pub rig: CameraRig,
    /// Left images, tagged captured.
    pub captured: ViewSet,
    /// Right images, tagged held out.
    pub held_out: ViewSet,
    pub depths: Vec<DepthMap>,
    pub calibration: Option<CalibrationReport>,
}

fn load_image(ds: &Dataset, rel: &str) -> Result<RgbImage> {
    RgbImage::load_png(&ds.resolve(rel))
}

/// Left extrinsics from the wand; right cameras follow at the stereo baseline.
pub fn calibrate_rig(ds: &Dataset, rig: &CameraRig) -> Result<(CameraRig, CalibrationReport)> {
    let wand = ds.manifest.wand.as_ref().ok_or_else(|| {
        Error::Validation("calibration requested but the manifest lists no wand recording".into())
    })?;
    let obs = read_observations(&ds.resolve(&wand.observations))?;
    let spec_path = ds.resolve(&wand.spec);
    let spec: WandSpec = serde_json::from_str(
        &std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?,
    )?;
    let lefts: Vec<Camera> = ds
        .cameras_with_role(StereoRole::Left)
        .map(|c| {
            rig.get(&c.id)
                .cloned()
                .ok_or_else(|| Error::Configuration(format!("camera {} missing from rig", c.id)))
        })
        .collect::<Result<_>>()?;
    let report = calibrate(
        &CameraRig::new(lefts)?,
        &obs,
        &spec,
        &CalibrationOptions::default(),
    )?;
    let offset = Pose::from_translation(Vector3::new(ds.manifest.baseline, 0.0, 0.0));
    let mut cams = Vec::new();
    for c in &ds.manifest.cameras {
        let cam = match c.role {
            StereoRole::Left => report.rig.get(&c.id).expect("calibrated").clone(),
            StereoRole::Right => {
                let left = report.rig.get(&c.partner).expect("calibrated");
                let k = rig
                    .get(&c.id)
                    .map(|r| r.intrinsics)
                    .unwrap_or(left.intrinsics);
                Camera::new(c.id.clone(), k, left.pose.compose(&offset))
            }
        };
        cams.push(cam);
    }
    Ok((CameraRig::new(cams)?, report))
}

fn load_depths(
    ds: &Dataset,
    cfg: &FuseConfig,
    rig: &CameraRig,
    captured: &ViewSet,
    t: u32,
) -> Result<Vec<DepthMap>> {
    let mut depths = Vec::new();
    for v in captured.with_role(ViewRole::Captured) {
        let mc = ds.camera(&v.camera.id).expect("view from manifest");
        let d = match cfg.depth {
            DepthSource::Ingest => {
                let rel = mc.depths.get(&t).ok_or_else(|| {
                    Error::Validation(format!(
                        "camera {} has no depth map at timestamp {t}",
                        mc.id
                    ))
                })?;
                DepthMap::load(&ds.resolve(rel), mc.id.clone(), t)?
            }
            DepthSource::BlockMatch {
                max_disparity,
                window,
            } => {
                let right = ds.camera(&mc.partner).expect("validated pair");
                let rimg = load_image(ds, &right.images[&t])?;
                let disp = block_match(&v.image.to_gray(), &rimg.to_gray(), max_disparity, window)?;
                let baseline = (rig
                    .get(&right.id)
                    .map(|c| c.center())
                    .unwrap_or(v.camera.center())
                    - v.camera.center())
                .norm();
                let baseline = if baseline > 0.0 {
                    baseline
                } else {
                    ds.manifest.baseline
                };
                disparity_to_depth(&disp, v.camera.intrinsics.fx, baseline, mc.id.clone(), t)?
            }
        };
        if d.width != v.camera.width() || d.height != v.camera.height() {
            return Err(Error::ShapeMismatch(format!(
                "depth map of camera {} has the wrong size",
                mc.id
            )));
        }
        depths.push(d);
    }
    Ok(depths)
}

/// Loads (or calibrates) the rig, the image sets and the depth maps of `t`.
pub fn load_capture(
    ds: &Dataset,
    cfg: &PipelineConfig,
    t: u32,
    timings: &mut Vec<StageTiming>,
) -> Result<Capture> {
    if !ds.manifest.timestamps.contains(&t) {
        return Err(Error::TimestampMismatch(t).in_stage("rig"));
    }
    let (rig, calibration) = stage(timings, "rig", || {
        let rig = CameraRig::load(&ds.resolve(&ds.manifest.rig))?;
        if cfg.calibrate {
            let (r, rep) = calibrate_rig(ds, &rig)?;
            Ok((r, Some(rep)))
        } else {
            Ok((rig, None))
        }
    })?;
    let (captured, held_out) = stage(timings, "images", || {
        let mut captured = Vec::new();
        let mut held = Vec::new();
        for c in &ds.manifest.cameras {
            let cam = rig
                .get(&c.id)
                .cloned()
                .ok_or_else(|| Error::Configuration(format!("camera {} missing from rig", c.id)))?;
            let img = load_image(ds, &c.images[&t])?;
            match c.role {
                StereoRole::Left => captured.push(View::new(cam, img, ViewRole::Captured)?),
                StereoRole::Right => held.push(View::new(cam, img, ViewRole::HeldOut)?),
            }
        }
        Ok((ViewSet::new(captured), ViewSet::new(held)))
    })?;
    let depths = stage(timings, "depth", || {
        load_depths(ds, &cfg.fuse, &rig, &captured, t)
    })?;
    Ok(Capture {
        timestamp: t,
        rig,
        captured,
        held_out,
        depths,
        calibration,
    })
}

/// Fusion, voxel downsampling and outlier removal.
pub fn build_cloud(capture: &Capture, cfg: &FuseConfig) -> Result<FusedPointCloud> {
    let pairs: Vec<(&DepthMap, &RgbImage)> = capture
        .depths
        .iter()
        .zip(capture.captured.with_role(ViewRole::Captured))
        .map(|(d, v)| (d, &v.image))
        .collect();
    let cloud = fuse(&pairs, &capture.rig)?;
    let raw = cloud.len();
    let cloud = voxel_downsample(&cloud, cfg.voxel)?;
    let voxels = cloud.len();
    let cloud = remove_outliers(&cloud, cfg.outlier_k, cfg.outlier_ratio)?;
    log::info!(
        "cloud: {raw} fused, {voxels} after voxel grid, {} after outlier removal",
        cloud.len()
    );
    if cloud.is_empty() {
        return Err(Error::EmptyInitialization);
    }
    Ok(cloud)
}

/// Cloud initialization, or for the random baseline the same count of points
/// drawn uniformly in the cloud's bounding box with random colors.
pub fn initialize(
    variant: Variant,
    cloud: &FusedPointCloud,
    t: u32,
    seed: u64,
) -> Result<GaussianScene> {
    match variant {
        Variant::Baseline3dgs => {
            let (lo, hi) = cloud.bounds().ok_or(Error::EmptyInitialization)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
            let mut random = cloud.clone();
            for (p, c) in random.positions.iter_mut().zip(random.colors.iter_mut()) {
                for a in 0..3 {
                    p[a] = if hi[a] > lo[a] {
                        rng.gen_range(lo[a]..hi[a])
                    } else {
                        lo[a]
                    };
                }
                *c = [rng.gen(), rng.gen(), rng.gen()];
            }
            init_from_cloud(&random, t)
        }
        _ => init_from_cloud(cloud, t),
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub variant: Variant,
    pub timestamp: u32,
    pub rig: CameraRig,
    pub cloud: FusedPointCloud,
    pub scene: Option<GaussianScene>,
    pub train: Option<TrainResult>,
    pub augment: Option<AugmentReport>,
    pub holdout: Option<MetricReport>,
    pub calibration: Option<CalibrationReport>,
    pub timings: Vec<StageTiming>,
}

impl PipelineOutput {
    pub fn total_seconds(&self) -> f64 {
        self.timings.iter().map(|t| t.seconds).sum()
    }
}

/// Renders held-out views with the variant's renderer.
pub fn evaluate_holdout(
    variant: Variant,
    scene: Option<&GaussianScene>,
    cloud: &FusedPointCloud,
    held_out: &ViewSet,
    cfg: &TrainConfig,
) -> Result<MetricReport> {
    let views = HeldOut::all(held_out);
    if views.is_empty() {
        return Err(Error::Protocol("holdout needs right-camera images".into()));
    }
    let start = Instant::now();
    let mut rendered = Vec::with_capacity(views.len());
    for v in &views {
        let cam = &v.view().camera;
        rendered.push(match (variant, scene) {
            (Variant::DepthReprojection, _) => {
                depth_reprojection_render(cloud, cam, cfg.render.background)?.0
            }
            (_, Some(s)) => rasterize(s, cam, &cfg.render)?.color,
            (_, None) => return Err(Error::Protocol("no trained scene to evaluate".into())),
        });
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

fn scene_center(cfg: &PipelineConfig, cloud: &FusedPointCloud) -> Point3<f64> {
    cfg.scene_center
        .map(|c| Point3::new(c[0], c[1], c[2]))
        .or_else(|| cloud.centroid())
        .unwrap_or_else(Point3::origin)
}

/// Initialization, training and holdout evaluation of one variant on a prepared capture.
pub fn reconstruct(
    capture: &Capture,
    cloud: &FusedPointCloud,
    variant: Variant,
    cfg: &PipelineConfig,
    timings: &mut Vec<StageTiming>,
) -> Result<(
    Option<TrainResult>,
    Option<AugmentReport>,
    Option<MetricReport>,
)> {
    let t = capture.timestamp;
    let (result, augment) = if variant == Variant::DepthReprojection {
        (None, None)
    } else {
        let scene = stage(timings, "init", || {
            initialize(variant, cloud, t, cfg.train.seed)
        })?;
        stage(timings, "train", || {
            let mut tc = cfg.train.clone();
            tc.seed ^= t as u64;
            if variant == Variant::Full && cfg.augment.n_per_camera > 0 {
                let mut aug = ViewAugmenter {
                    sources: capture
                        .captured
                        .with_role(ViewRole::Captured)
                        .cloned()
                        .collect(),
                    config: AugmentConfig {
                        seed: cfg.augment.seed ^ t as u64,
                        ..cfg.augment
                    },
                    refiner: cfg.refiner.clone(),
                    scene_center: scene_center(cfg, cloud),
                    settings: tc.render,
                    report: None,
                };
                let r = train(scene, &capture.captured, &mut aug, &tc)?;
                Ok((Some(r), aug.report))
            } else {
                Ok((
                    Some(train(scene, &capture.captured, &mut NoAugment, &tc)?),
                    None,
                ))
            }
        })?
    };
    let holdout = if capture.held_out.is_empty() {
        None
    } else {
        Some(stage(timings, "evaluate", || {
            evaluate_holdout(
                variant,
                result.as_ref().map(|r| &r.scene),
                cloud,
                &capture.held_out,
                &cfg.train,
            )
        })?)
    };
    Ok((result, augment, holdout))
}

/// Runs one timestamp end to end and writes outputs when configured.
pub fn run_pipeline(ds: &Dataset, cfg: &PipelineConfig, t: u32) -> Result<PipelineOutput> {
    cfg.validate()?;
    ds.validate()?;
    let mut timings = Vec::new();
    let capture = load_capture(ds, cfg, t, &mut timings)?;
    let cloud = stage(&mut timings, "fuse", || build_cloud(&capture, &cfg.fuse))?;
    let (train, augment, holdout) = reconstruct(&capture, &cloud, cfg.variant, cfg, &mut timings)?;
    let mut out = PipelineOutput {
        variant: cfg.variant,
        timestamp: t,
        rig: capture.rig,
        cloud,
        scene: train.as_ref().map(|r| r.scene.clone()),
        train,
        augment,
        holdout,
        calibration: capture.calibration,
        timings,
    };
    if let Some(dir) = &cfg.output {
        let mut timings = std::mem::take(&mut out.timings);
        stage(&mut timings, "export", || export(&out, ds, cfg, dir))?;
        out.timings = timings;
        write_metrics(&out, dir)?;
    }
    Ok(out)
}

/// Runs every manifest timestamp, `workers` at a time.
pub fn run_all(ds: &Dataset, cfg: &PipelineConfig) -> Result<Vec<Result<PipelineOutput>>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Configuration(e.to_string()))?;
    Ok(pool.install(|| {
        ds.manifest
            .timestamps
            .par_iter()
            .map(|&t| run_pipeline(ds, cfg, t))
            .collect()
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub manifest_hash: String,
    pub seed: u64,
    pub config: PipelineConfig,
}

impl Provenance {
    pub fn new(cfg: &PipelineConfig, ds: Option<&Dataset>) -> Self {
        let manifest_hash = ds
            .map(|d| {
                hex(&Sha256::digest(
                    serde_json::to_vec(&d.manifest).expect("manifest serializes"),
                ))
            })
            .unwrap_or_default();
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            manifest_hash,
            seed: cfg.train.seed,
            config: cfg.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(PROVENANCE_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }
}

fn export(out: &PipelineOutput, ds: &Dataset, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let t = out.timestamp;
    if let Some(s) = &out.scene {
        s.save(&dir.join(format!("scene_t{t}.egsp")))?;
    }
    if let Some(r) = &out.train {
        save_loss_csv(&r.history, &dir.join(format!("loss_t{t}.csv")))?;
    }
    write_ply(
        &out.cloud,
        &dir.join(format!("cloud_t{t}.ply")),
        PlyFormat::BinaryLittleEndian,
    )?;
    out.rig.save(&dir.join("rig.json"))?;
    if let Some(c) = &out.calibration {
        let p = dir.join("calibration.json");
        std::fs::write(&p, c.to_json()?).map_err(|e| Error::io(&p, e))?;
    }
    Provenance::new(cfg, Some(ds)).write(dir)
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    variant: Variant,
    timestamp: u32,
    gaussians: Option<usize>,
    cloud_points: usize,
    warmup_steps: Option<usize>,
    refine_steps: Option<usize>,
    augment: Option<&'a AugmentReport>,
    holdout: Option<&'a MetricReport>,
    timings: &'a [StageTiming],
    total_seconds: f64,
}

fn write_metrics(out: &PipelineOutput, dir: &Path) -> Result<()> {
    let m = MetricsJson {
        variant: out.variant,
        timestamp: out.timestamp,
        gaussians: out.scene.as_ref().map(GaussianScene::len),
        cloud_points: out.cloud.len(),
        warmup_steps: out.train.as_ref().map(|r| r.warmup_steps_run),
        refine_steps: out.train.as_ref().map(|r| r.refine_steps_run),
        augment: out.augment.as_ref(),
        holdout: out.holdout.as_ref(),
        timings: &out.timings,
        total_seconds: out.total_seconds(),
    };
    let p = dir.join(format!("metrics_t{}.json", out.timestamp));
    std::fs::write(&p, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&p, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub variant: Variant,
    pub psnr: Stats,
    pub ssim: Stats,
    /// Neural metrics need an external plugin; empty here.
    pub lpips: Option<f64>,
    pub clip: Option<f64>,
    pub gaussians: Option<usize>,
    pub runtime_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteTable {
    pub timestamp: u32,
    pub rows: Vec<SuiteRow>,
}

impl SuiteTable {
    pub fn row(&self, v: Variant) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w =
            csv::Writer::from_path(path).map_err(|e| Error::format("CSV", e.to_string()))?;
        let csv_err = |e: csv::Error| Error::format("CSV", e.to_string());
        w.write_record([
            "variant",
            "psnr_mean",
            "psnr_std",
            "ssim_mean",
            "ssim_std",
            "lpips",
            "clip",
            "gaussians",
            "runtime_s",
            "error",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.variant.name().to_string(),
                r.psnr.mean.to_string(),
                r.psnr.std.to_string(),
                r.ssim.mean.to_string(),
                r.ssim.std.to_string(),
                opt(r.lpips),
                opt(r.clip),
                r.gaussians.map(|g| g.to_string()).unwrap_or_default(),
                format!("{:.3}", r.runtime_s),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Evaluates each variant on the same capture and cloud. A failing variant
/// is recorded in its row; the others still run.
pub fn run_suite(
    ds: &Dataset,
    cfg: &PipelineConfig,
    variants: &[Variant],
    t: u32,
) -> Result<SuiteTable> {
    cfg.validate()?;
    ds.validate()?;
    let mut shared = Vec::new();
    let capture = load_capture(ds, cfg, t, &mut shared)?;
    if capture.held_out.is_empty() {
        return Err(Error::Protocol(
            "suite needs right-camera images for holdout".into(),
        ));
    }
    let cloud = stage(&mut shared, "fuse", || build_cloud(&capture, &cfg.fuse))?;
    let mut rows = Vec::new();
    for &v in variants {
        let mut timings = Vec::new();
        let res = reconstruct(&capture, &cloud, v, cfg, &mut timings);
        let runtime_s = timings.iter().map(|t| t.seconds).sum();
        rows.push(match res {
            Ok((train, _, Some(h))) => SuiteRow {
                variant: v,
                psnr: h.psnr_stats,
                ssim: h.ssim_stats,
                lpips: None,
                clip: None,
                gaussians: train.as_ref().map(|r| r.scene.len()),
                runtime_s,
                error: None,
            },
            Ok((_, _, None)) => unreachable!("held-out views checked above"),
            Err(e) => {
                log::error!("variant {} failed: {e}", v.name());
                SuiteRow {
                    variant: v,
                    psnr: Stats::default(),
                    ssim: Stats::default(),
                    lpips: None,
                    clip: None,
                    gaussians: None,
                    runtime_s,
                    error: Some(format!("{} ({})", e, e.code())),
                }
            }
        });
    }
    let table = SuiteTable { timestamp: t, rows };
    if let Some(dir) = &cfg.output {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        table.write_csv(&dir.join("suite.csv"))?;
        table.write_json(&dir.join("suite.json"))?;
        Provenance::new(cfg, Some(ds)).write(dir)?;
    }
    Ok(table)
}

/// JSON schema of [`PipelineConfig`].
pub fn config_schema() -> String {
    serde_json::to_string_pretty(&schemars::schema_for!(PipelineConfig)).expect("schema serializes")
}
