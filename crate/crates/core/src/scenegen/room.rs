use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{corner_rig, stereo_partner, wand_sweep, WandFrame, WandSweep};
use crate::calibration::{write_observations, WandObservation, WandSpec};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, Intrinsics};
use crate::image::RgbImage;
use crate::manifest::{
    Dataset, DatasetManifest, ManifestCamera, StereoRole, WandFiles, MANIFEST_VERSION,
};
use crate::splat::{logit, reference_render, Gaussian, GaussianScene, RenderSettings};
use crate::stereo::DepthMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Floor width (x), depth (y) and ceiling height (z) in meters.
    pub room: [f64; 3],
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    pub camera_height: f64,
    pub target: [f64; 3],
    pub baseline: f64,
    /// Grid spacing of the wall, floor and ceiling sheets.
    pub surface_spacing: f64,
    pub actors: usize,
    pub timestamps: u32,
    pub wand: WandSpec,
    pub wand_frames: u32,
    pub wand_pixel_noise: f64,
    /// Relative depth noise (standard deviation as a fraction of depth).
    pub depth_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            room: [5.0, 4.0, 2.6],
            width: 128,
            height: 96,
            hfov_deg: 75.0,
            camera_height: 2.2,
            target: [0.0, 0.0, 0.8],
            baseline: 0.12,
            surface_spacing: 0.13,
            actors: 3,
            timestamps: 1,
            wand: WandSpec::collinear(0.10, 0.20),
            wand_frames: 100,
            wand_pixel_noise: 0.3,
            depth_noise: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.room.iter().any(|v| !(*v > 0.0)) {
            return bad(format!("room dimensions {:?} must be positive", self.room));
        }
        if self.width < 16 || self.height < 16 {
            return bad(format!(
                "image size {}x{} below 16 px",
                self.width, self.height
            ));
        }
        if !(self.hfov_deg > 1.0 && self.hfov_deg < 170.0) {
            return bad(format!("field of view {} out of range", self.hfov_deg));
        }
        if !(self.camera_height > 0.0 && self.camera_height < self.room[2]) {
            return bad(format!(
                "camera height {} outside the room",
                self.camera_height
            ));
        }
        let t = self.target;
        if t[0].abs() >= 0.5 * self.room[0]
            || t[1].abs() >= 0.5 * self.room[1]
            || t[2] <= 0.0
            || t[2] >= self.room[2]
        {
            return bad(format!("target {t:?} outside the room"));
        }
        if !(self.baseline > 0.0) || self.baseline >= 0.05 * self.room[0].min(self.room[1]) * 10.0 {
            return bad(format!("stereo baseline {} invalid", self.baseline));
        }
        if !(self.surface_spacing > 0.0) {
            return bad("surface spacing must be positive".into());
        }
        if self.timestamps == 0 {
            return bad("at least one timestamp is required".into());
        }
        if self.wand_pixel_noise < 0.0 || self.depth_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        self.wand.validate()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.width, self.height, self.hfov_deg)
    }
}

/// Everything `generate` produces, in memory.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    /// Ground truth per timestamp.
    pub scenes: Vec<GaussianScene>,
    /// Left cameras `camN` and their right partners `camN_r`.
    pub rig: CameraRig,
    pub images: BTreeMap<(u32, String), RgbImage>,
    pub depths: BTreeMap<(u32, String), DepthMap>,
    pub wand_truth: Vec<WandFrame>,
    pub wand: Vec<WandObservation>,
}

impl SyntheticDataset {
    /// The four wall cameras without their stereo partners.
    pub fn left_rig(&self) -> CameraRig {
        CameraRig::new(
            self.rig
                .cameras
                .iter()
                .filter(|c| !c.id.ends_with("_r"))
                .cloned()
                .collect(),
        )
        .expect("ids unique")
    }

    /// Writes the dataset directory and returns its validated manifest.
    pub fn write(&self, dir: &Path) -> Result<Dataset> {
        let mk = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mk(&dir.join("images"))?;
        mk(&dir.join("depth"))?;
        self.rig.save(&dir.join("rig_gt.json"))?;
        let mut scenes = BTreeMap::new();
        for s in &self.scenes {
            let name = if s.timestamp == 0 {
                "scene_gt.egsp".to_string()
            } else {
                format!("scene_gt_t{}.egsp", s.timestamp)
            };
            s.save(&dir.join(&name))?;
            scenes.insert(s.timestamp, name);
        }
        let mut cameras = Vec::new();
        for cam in &self.rig.cameras {
            let right = cam.id.ends_with("_r");
            let partner = if right {
                cam.id.trim_end_matches("_r").to_string()
            } else {
                format!("{}_r", cam.id)
            };
            let mut images = BTreeMap::new();
            let mut depths = BTreeMap::new();
            for t in 0..self.spec.timestamps {
                let key = (t, cam.id.clone());
                let img = format!("images/{}_t{t}.png", cam.id);
                self.images[&key].save_png(&dir.join(&img))?;
                images.insert(t, img);
                if let Some(d) = self.depths.get(&key) {
                    let p = format!("depth/{}_t{t}.egdp", cam.id);
                    d.save(&dir.join(&p))?;
                    depths.insert(t, p);
                }
            }
            cameras.push(ManifestCamera {
                id: cam.id.clone(),
                role: if right {
                    StereoRole::Right
                } else {
                    StereoRole::Left
                },
                partner,
                images,
                depths,
            });
        }
        write_observations(&dir.join("wand.jsonl"), &self.wand)?;
        let spec_path = dir.join("wand_spec.json");
        std::fs::write(&spec_path, serde_json::to_string_pretty(&self.spec.wand)?)
            .map_err(|e| Error::io(&spec_path, e))?;
        let ds = Dataset {
            root: dir.to_path_buf(),
            manifest: DatasetManifest {
                version: MANIFEST_VERSION,
                rig: "rig_gt.json".into(),
                timestamps: (0..self.spec.timestamps).collect(),
                baseline: self.spec.baseline,
                cameras,
                wand: Some(WandFiles {
                    observations: "wand.jsonl".into(),
                    spec: "wand_spec.json".into(),
                }),
                scenes,
            },
        };
        ds.save()?;
        ds.validate()?;
        Ok(ds)
    }
}

/// Smooth procedural texture with block accents.
fn texture(base: [f64; 3], u: f64, v: f64, phase: f64) -> [f64; 3] {
    let wave = 0.12 * (2.0 * PI * u / 0.9 + phase).sin() * (2.0 * PI * v / 0.7 + 0.5 * phase).cos();
    let block = if ((u / 0.5).floor() as i64 + (v / 0.5).floor() as i64).rem_euclid(2) == 0 {
        0.08
    } else {
        -0.08
    };
    base.map(|c| (c + wave + block).clamp(0.02, 0.98))
}

fn frame_quaternion(u: &Vector3<f64>, v: &Vector3<f64>, n: &Vector3<f64>) -> [f64; 4] {
    let r = Rotation3::from_matrix(&Matrix3::from_columns(&[*u, *v, *n]));
    let q = UnitQuaternion::from_rotation_matrix(&r);
    [q.w, q.i, q.j, q.k]
}

struct Sheet {
    origin: Point3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    extent: (f64, f64),
    base: [f64; 3],
}

fn sheet_gaussians(
    s: &Sheet,
    spacing: f64,
    phase: f64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Gaussian>,
) {
    let n = s.u.cross(&s.v).normalize();
    let rotation = frame_quaternion(&s.u, &s.v, &n);
    let nu = (s.extent.0 / spacing).round().max(1.0) as usize;
    let nv = (s.extent.1 / spacing).round().max(1.0) as usize;
    let (du, dv) = (s.extent.0 / nu as f64, s.extent.1 / nv as f64);
    let opacity_logit = logit(0.98);
    for i in 0..nu {
        for j in 0..nv {
            let (a, b) = ((i as f64 + 0.5) * du, (j as f64 + 0.5) * dv);
            let p = s.origin + s.u * a + s.v * b;
            let jitter: f64 = rng.gen_range(-0.03..0.03);
            let color = texture(s.base, a, b, phase).map(|c| (c + jitter).clamp(0.0, 1.0));
            out.push(Gaussian {
                position: [p.x, p.y, p.z],
                log_scale: [(0.6 * du).ln(), (0.6 * dv).ln(), 0.004f64.ln()],
                rotation,
                opacity_logit,
                color,
            });
        }
    }
}

fn actor_gaussians(
    center: Point3<f64>,
    axes: Vector3<f64>,
    base: [f64; 3],
    out: &mut Vec<Gaussian>,
) {
    let count = 160;
    let golden = PI * (3.0 - 5f64.sqrt());
    let opacity_logit = logit(0.97);
    for i in 0..count {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
        let r = (1.0 - z * z).sqrt();
        let th = golden * i as f64;
        let unit = Vector3::new(r * th.cos(), r * th.sin(), z);
        let p = center + unit.component_mul(&axes);
        let n = unit.component_div(&axes.component_mul(&axes)).normalize();
        let helper = if n.z.abs() < 0.9 {
            Vector3::z()
        } else {
            Vector3::x()
        };
        let u = helper.cross(&n).normalize();
        let v = n.cross(&u);
        let shade = 0.75 + 0.25 * z;
        out.push(Gaussian {
            position: [p.x, p.y, p.z],
            log_scale: [0.075f64.ln(), 0.075f64.ln(), 0.01f64.ln()],
            rotation: frame_quaternion(&u, &v, &n),
            opacity_logit,
            color: base.map(|c| (c * shade).clamp(0.0, 1.0)),
        });
    }
}

/// Textured room, table slab and actors; actors shift with the timestamp.
pub fn build_scene(spec: &SyntheticSpec, timestamp: u32) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5ce7e);
    let [w, d, h] = spec.room;
    let (hx, hy) = (0.5 * w, 0.5 * d);
    let sp = spec.surface_spacing;
    let mut g = Vec::new();
    let x = Vector3::x();
    let y = Vector3::y();
    let z = Vector3::z();
    let sheets = [
        Sheet {
            origin: Point3::new(-hx, -hy, 0.0),
            u: x,
            v: y,
            extent: (w, d),
            base: [0.55, 0.5, 0.45],
        },
        Sheet {
            origin: Point3::new(-hx, hy, h),
            u: x,
            v: -y,
            extent: (w, d),
            base: [0.85, 0.85, 0.8],
        },
        Sheet {
            origin: Point3::new(-hx, -hy, 0.0),
            u: x,
            v: z,
            extent: (w, h),
            base: [0.35, 0.55, 0.65],
        },
        Sheet {
            origin: Point3::new(hx, hy, 0.0),
            u: -x,
            v: z,
            extent: (w, h),
            base: [0.65, 0.45, 0.35],
        },
        Sheet {
            origin: Point3::new(-hx, hy, 0.0),
            u: -y,
            v: z,
            extent: (d, h),
            base: [0.45, 0.65, 0.4],
        },
        Sheet {
            origin: Point3::new(hx, -hy, 0.0),
            u: y,
            v: z,
            extent: (d, h),
            base: [0.6, 0.6, 0.3],
        },
    ];
    for (i, s) in sheets.iter().enumerate() {
        sheet_gaussians(s, sp, i as f64 * 1.3, &mut rng, &mut g);
    }
    // table slab: top plus four sides
    let (tc, tw, td, th, tz) = (Point3::new(0.3, -0.2, 0.0), 1.4, 0.8, 0.06, 0.8);
    let o = Point3::new(tc.x - 0.5 * tw, tc.y - 0.5 * td, tz);
    let fine = 0.5 * sp;
    let slab = [
        Sheet {
            origin: o,
            u: x,
            v: y,
            extent: (tw, td),
            base: [0.75, 0.75, 0.78],
        },
        Sheet {
            origin: o - z * th,
            u: x,
            v: z,
            extent: (tw, th),
            base: [0.4, 0.4, 0.45],
        },
        Sheet {
            origin: o + y * td - z * th,
            u: x,
            v: z,
            extent: (tw, th),
            base: [0.4, 0.4, 0.45],
        },
        Sheet {
            origin: o - z * th,
            u: y,
            v: z,
            extent: (td, th),
            base: [0.4, 0.4, 0.45],
        },
        Sheet {
            origin: o + x * tw - z * th,
            u: y,
            v: z,
            extent: (td, th),
            base: [0.4, 0.4, 0.45],
        },
    ];
    for (i, s) in slab.iter().enumerate() {
        sheet_gaussians(s, fine, 7.0 + i as f64, &mut rng, &mut g);
    }
    let palette = [
        [0.2, 0.55, 0.35],
        [0.2, 0.35, 0.7],
        [0.15, 0.55, 0.6],
        [0.6, 0.3, 0.5],
    ];
    let spots = [(-0.9, 0.5), (1.3, 0.6), (-0.6, -1.1), (1.4, -1.0)];
    for a in 0..spec.actors {
        let (sx, sy) = spots[a % spots.len()];
        let shift = 0.1 * timestamp as f64;
        let center = Point3::new(sx + shift, sy, 0.85);
        actor_gaussians(
            center,
            Vector3::new(0.22, 0.18, 0.85),
            palette[a % palette.len()],
            &mut g,
        );
    }
    GaussianScene::new(g, timestamp)
}

/// Builds the ground truth and renders every capture with the reference renderer.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let k = spec.intrinsics();
    let target = Point3::from(Vector3::from(spec.target));
    let left = corner_rig(spec.room, spec.camera_height, target, k)?;
    let mut cams = Vec::new();
    for c in &left.cameras {
        cams.push(c.clone());
        cams.push(stereo_partner(c, spec.baseline));
    }
    let rig = CameraRig::new(cams)?;
    for c in &rig.cameras {
        let p = c.center();
        if p.x.abs() >= 0.5 * spec.room[0] || p.y.abs() >= 0.5 * spec.room[1] {
            return Err(Error::Validation(format!(
                "camera {} outside the room",
                c.id
            )));
        }
    }

    let settings = RenderSettings::default();
    let mut scenes = Vec::new();
    let mut images = BTreeMap::new();
    let mut depths = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xdee9);
    let depth_noise = Normal::new(0.0, spec.depth_noise.max(0.0)).expect("finite sigma");
    for t in 0..spec.timestamps {
        let scene = build_scene(spec, t);
        for cam in &rig.cameras {
            let out = reference_render(&scene, cam, &settings)?;
            let mut dm = DepthMap::new(cam.id.clone(), t, cam.width(), cam.height());
            for (i, &z) in out.depth.iter().enumerate() {
                dm.values[i] = if z > 0.0 && spec.depth_noise > 0.0 {
                    (z * (1.0 + depth_noise.sample(&mut rng))).max(0.0)
                } else {
                    z
                };
            }
            images.insert((t, cam.id.clone()), out.color.quantized());
            depths.insert((t, cam.id.clone()), dm);
        }
        scenes.push(scene);
    }
    let sweep = WandSweep {
        frames: spec.wand_frames,
        center: Point3::new(spec.target[0], spec.target[1], spec.target[2] + 0.4),
        half_extent: Vector3::new(0.25 * spec.room[0], 0.25 * spec.room[1], 0.2 * spec.room[2]),
        pixel_noise: spec.wand_pixel_noise,
        seed: spec.seed ^ 0x3a4d,
    };
    let (wand_truth, wand) = wand_sweep(&left, &spec.wand, &sweep);
    Ok(SyntheticDataset {
        spec: spec.clone(),
        scenes,
        rig,
        images,
        depths,
        wand_truth,
        wand,
    })
}

/// Seeded Gaussian noise on positions and colors.
pub fn perturb(
    scene: &GaussianScene,
    sigma_pos: f64,
    sigma_color: f64,
    seed: u64,
) -> GaussianScene {
    if sigma_pos == 0.0 && sigma_color == 0.0 {
        return scene.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let np = Normal::new(0.0, sigma_pos.max(0.0)).expect("finite sigma");
    let nc = Normal::new(0.0, sigma_color.max(0.0)).expect("finite sigma");
    let gaussians = scene
        .gaussians
        .iter()
        .map(|g| {
            let mut g = *g;
            for v in g.position.iter_mut() {
                *v += np.sample(&mut rng);
            }
            for v in g.color.iter_mut() {
                *v = (*v + nc.sample(&mut rng)).clamp(0.0, 1.0);
            }
            g
        })
        .collect();
    GaussianScene::new(gaussians, scene.timestamp)
}
