//! Auxiliary viewpoints around each rig camera, rendered from the warm-up
//! scene and passed through a refiner before joining training.

use std::collections::VecDeque;
use std::process::Command;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose};
use crate::image::RgbImage;
use crate::splat::{rasterize, GaussianScene, RenderSettings};
use crate::train::AugmentProvider;
use crate::views::{View, ViewRole};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub n_per_camera: usize,
    /// Hemisphere radius in meters.
    pub radius: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_per_camera: 15,
            radius: 0.4,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::Validation(format!(
                "augment radius {} must be positive",
                self.radius
            )));
        }
        Ok(())
    }
}

/// Per-camera stream seed, stable across platforms.
fn camera_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// `n_per_camera` cameras with centers uniform in the radius-R half ball
/// around `cam` that faces `scene_center`, each aimed at `scene_center` with
/// the source camera's up vector.
pub fn sample_aux_poses(
    cam: &Camera,
    cfg: &AugmentConfig,
    scene_center: &Point3<f64>,
) -> Result<Vec<Camera>> {
    cfg.validate()?;
    let source = cam.center();
    let toward = scene_center - source;
    if toward.norm() < 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "scene center coincides with camera {}",
            cam.id
        )));
    }
    let up = -cam.pose.rotation_matrix().column(1).into_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(camera_seed(cfg.seed, &cam.id));
    let mut out = Vec::with_capacity(cfg.n_per_camera);
    while out.len() < cfg.n_per_camera {
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let r = cfg.radius * rng.gen::<f64>().cbrt();
        let offset = Vector3::from(dir) * r;
        if offset.dot(&toward) < 0.0 {
            continue;
        }
        let eye = source + offset;
        let pose = match Pose::look_at(&eye, scene_center, &up) {
            Ok(p) => p,
            Err(_) => continue,
        };
        out.push(Camera::new(
            format!("{}_aux{:02}", cam.id, out.len()),
            cam.intrinsics,
            pose,
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default, schemars::JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Refiner {
    #[default]
    Identity,
    HoleFill,
    /// Program and leading arguments; `--rendered`, `--reference` and `--out`
    /// directories are appended.
    External {
        command: Vec<String>,
    },
}

/// Fills pixels with alpha < 0.5 from the nearest covered pixel (4-connected
/// breadth-first dilation). Returns the input unchanged if nothing is covered.
pub fn hole_fill(rendered: &RgbImage, alpha: &[f64]) -> RgbImage {
    let (w, h) = (rendered.width, rendered.height);
    let mut out = rendered.clone();
    let mut filled: Vec<bool> = alpha.iter().map(|&a| a >= 0.5).collect();
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| filled[i]).collect();
    if queue.is_empty() {
        log::warn!("hole fill: no covered pixels, image left unchanged");
        return out;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let c = out.get(x, y);
        let mut visit = |nx: usize, ny: usize| {
            let j = ny * w + nx;
            if !filled[j] {
                filled[j] = true;
                out.set(nx, ny, c);
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    }
    out
}

/// One rendered auxiliary view with its conditioning inputs.
#[derive(Debug, Clone)]
pub struct RefineItem {
    pub rendered: RgbImage,
    pub reference: RgbImage,
    pub alpha: Vec<f64>,
}

fn check_item(it: &RefineItem) -> Result<()> {
    it.rendered.ensure_same_shape(&it.reference)?;
    if it.alpha.len() != it.rendered.width * it.rendered.height {
        return Err(Error::ShapeMismatch(format!(
            "alpha of {} values for a {}x{} image",
            it.alpha.len(),
            it.rendered.width,
            it.rendered.height
        )));
    }
    Ok(())
}

pub fn refine(item: &RefineItem, refiner: &Refiner) -> Result<RgbImage> {
    refine_batch(std::slice::from_ref(item), refiner)
        .pop()
        .expect("one result")
}

/// Refines a batch; each entry fails independently.
pub fn refine_batch(items: &[RefineItem], refiner: &Refiner) -> Vec<Result<RgbImage>> {
    match refiner {
        Refiner::Identity => items
            .iter()
            .map(|it| check_item(it).map(|_| it.rendered.clone()))
            .collect(),
        Refiner::HoleFill => items
            .iter()
            .map(|it| check_item(it).map(|_| hole_fill(&it.rendered, &it.alpha)))
            .collect(),
        Refiner::External { command } => match run_external(items, command) {
            Ok(v) => v,
            Err(e) => items
                .iter()
                .map(|_| Err(Error::RefinementFailed(e.to_string())))
                .collect(),
        },
    }
}

#[derive(Serialize)]
struct ProtocolPair {
    rendered: String,
    reference: String,
    width: usize,
    height: usize,
}

#[derive(Serialize)]
struct ProtocolManifest {
    pairs: Vec<ProtocolPair>,
}

fn view_name(i: usize) -> String {
    format!("view_{i:04}.png")
}

fn run_external(items: &[RefineItem], command: &[String]) -> Result<Vec<Result<RgbImage>>> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| Error::Configuration("external refiner command is empty".into()))?;
    let tmp = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let dirs = ["rendered", "reference", "out"].map(|d| tmp.path().join(d));
    for d in &dirs {
        std::fs::create_dir(d).map_err(|e| Error::io(d, e))?;
    }
    let mut pairs = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        check_item(it)?;
        it.rendered.save_png(&dirs[0].join(view_name(i)))?;
        it.reference.save_png(&dirs[1].join(view_name(i)))?;
        pairs.push(ProtocolPair {
            rendered: view_name(i),
            reference: view_name(i),
            width: it.rendered.width,
            height: it.rendered.height,
        });
    }
    let manifest = serde_json::to_string_pretty(&ProtocolManifest { pairs })?;
    for d in &dirs[..2] {
        let p = d.join("manifest.json");
        std::fs::write(&p, &manifest).map_err(|e| Error::io(&p, e))?;
    }
    let output = Command::new(program)
        .args(args)
        .arg("--rendered")
        .arg(&dirs[0])
        .arg("--reference")
        .arg(&dirs[1])
        .arg("--out")
        .arg(&dirs[2])
        .output()
        .map_err(|e| Error::RefinementFailed(format!("cannot start {program}: {e}")))?;
    if !output.status.success() {
        return Err(Error::RefinementFailed(format!(
            "{program} exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    Ok(items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let p = dirs[2].join(view_name(i));
            let img = RgbImage::load_png(&p)
                .map_err(|e| Error::RefinementFailed(format!("{}: {e}", view_name(i))))?;
            if !img.same_shape(&it.rendered) {
                return Err(Error::RefinementFailed(format!(
                    "{} is {}x{}, expected {}x{}",
                    view_name(i),
                    img.width,
                    img.height,
                    it.rendered.width,
                    it.rendered.height
                )));
            }
            Ok(img)
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub requested: usize,
    pub produced: usize,
    pub dropped: Vec<String>,
}

/// Renders every auxiliary pose of every source view, refines it against the
/// source image and tags the results as augmented. Failed refinements are
/// dropped and listed in the report.
pub fn build_augmented_set(
    scene: &GaussianScene,
    sources: &[View],
    cfg: &AugmentConfig,
    refiner: &Refiner,
    scene_center: &Point3<f64>,
    settings: &RenderSettings,
) -> Result<(Vec<View>, AugmentReport)> {
    let mut cams = Vec::new();
    let mut items = Vec::new();
    for src in sources {
        for cam in sample_aux_poses(&src.camera, cfg, scene_center)? {
            let out = rasterize(scene, &cam, settings)?;
            items.push(RefineItem {
                // augmented views stand in for 8-bit captures
                rendered: out.color.quantized(),
                reference: src.image.clone(),
                alpha: out.alpha,
            });
            cams.push(cam);
        }
    }
    let mut report = AugmentReport {
        requested: cams.len(),
        ..AugmentReport::default()
    };
    let mut views = Vec::with_capacity(cams.len());
    for (cam, res) in cams.into_iter().zip(refine_batch(&items, refiner)) {
        match res {
            Ok(img) => views.push(View::new(cam, img, ViewRole::Augmented)?),
            Err(e) => {
                log::warn!("dropping augmented view {}: {e}", cam.id);
                report.dropped.push(cam.id);
            }
        }
    }
    report.produced = views.len();
    Ok((views, report))
}

/// Supplies augmented views to training once warm-up ends.
pub struct ViewAugmenter {
    pub sources: Vec<View>,
    pub config: AugmentConfig,
    pub refiner: Refiner,
    pub scene_center: Point3<f64>,
    pub settings: RenderSettings,
    pub report: Option<AugmentReport>,
}

impl AugmentProvider for ViewAugmenter {
    fn augment(&mut self, scene: &GaussianScene) -> Result<Vec<View>> {
        let (views, report) = build_augmented_set(
            scene,
            &self.sources,
            &self.config,
            &self.refiner,
            &self.scene_center,
            &self.settings,
        )?;
        log::info!(
            "augmentation: {} of {} views kept",
            report.produced,
            report.requested
        );
        self.report = Some(report);
        Ok(views)
    }
}
