//! Pinhole cameras, rigid poses and the rig file format.
//!
//! Poses are camera-to-world. Camera frames are right-handed with +x right,
//! +y down and +z forward. World frames used by the generators are z-up.

use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point and equal focal lengths from a horizontal field of view.
    pub fn from_fov(width: u32, height: u32, hfov_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "invalid intrinsics {self:?}"
            )))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pixel centers sit at integer coordinates.
    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= -0.5
            && px.y >= -0.5
            && px.x < self.width as f64 - 0.5
            && px.y < self.height as f64 - 0.5
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix(r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), t)
    }

    /// Pose at `eye` looking at `target`, with image-up as close to `up` as possible.
    pub fn look_at(eye: &Point3<f64>, target: &Point3<f64>, up: &Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        let norm = forward.norm();
        if norm < 1e-12 {
            return Err(Error::InvalidParameter("look_at target equals eye".into()));
        }
        let forward = forward / norm;
        let right = forward.cross(up);
        let rn = right.norm();
        if rn < 1e-12 {
            return Err(Error::InvalidParameter(
                "look_at direction parallel to up vector".into(),
            ));
        }
        let right = right / rn;
        let down = forward.cross(&right);
        let r = Matrix3::from_columns(&[right, down, forward]);
        Ok(Self::from_rotation_matrix(&r, eye.coords))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize();
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }

    /// Camera-frame coordinates of a world point.
    pub fn world_to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p.coords - self.translation)
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// Camera-frame z; non-positive means the point is behind the camera.
    pub depth: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: String,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl Camera {
    pub fn new(id: impl Into<String>, intrinsics: Intrinsics, pose: Pose) -> Self {
        Self {
            id: id.into(),
            intrinsics,
            pose,
        }
    }

    pub fn project(&self, p: &Point3<f64>) -> Projection {
        let pc = self.pose.world_to_camera(p);
        project_camera_point(&self.intrinsics, &pc)
    }

    pub fn unproject(&self, px: &Vector2<f64>, depth: f64) -> Result<Point3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::InvalidDepth(depth));
        }
        Ok(self
            .pose
            .transform_point(&Point3::from(self.ray_at_depth(px, depth))))
    }

    /// Camera-frame point at pixel `px` with z = `depth`.
    pub fn ray_at_depth(&self, px: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new(
            (px.x - k.cx) / k.fx * depth,
            (px.y - k.cy) / k.fy * depth,
            depth,
        )
    }

    pub fn center(&self) -> Point3<f64> {
        self.pose.center()
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }
}

pub fn project_camera_point(k: &Intrinsics, pc: &Vector3<f64>) -> Projection {
    Projection {
        pixel: Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy),
        depth: pc.z,
    }
}

/// Record layout of the rig JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    id: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    q: [f64; 4],
    t: [f64; 3],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let k = &c.intrinsics;
        let t = c.pose.translation;
        Self {
            id: c.id.clone(),
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            q: c.pose.quaternion_wxyz(),
            t: [t.x, t.y, t.z],
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let intrinsics = Intrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)?;
        let q = nalgebra::Quaternion::new(r.q[0], r.q[1], r.q[2], r.q[3]);
        if q.norm() < 1e-12 {
            return Err(Error::format(
                "rig",
                format!("camera {} has a zero quaternion", r.id),
            ));
        }
        let pose = Pose::new(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(r.t[0], r.t[1], r.t[2]),
        );
        Ok(Camera::new(r.id, intrinsics, pose))
    }
}

/// Calibrated camera set; ids are unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        for (i, c) in cameras.iter().enumerate() {
            if cameras[..i].iter().any(|o| o.id == c.id) {
                return Err(Error::Configuration(format!(
                    "duplicate camera id {}",
                    c.id
                )));
            }
        }
        Ok(Self { cameras })
    }

    pub fn get(&self, id: &str) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        let recs: Vec<CameraRecord> = self.cameras.iter().map(CameraRecord::from).collect();
        Ok(serde_json::to_string_pretty(&recs)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let recs: Vec<CameraRecord> = serde_json::from_str(s)?;
        let cams = recs
            .into_iter()
            .map(Camera::try_from)
            .collect::<Result<Vec<_>>>()?;
        Self::new(cams)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Angle of the relative rotation between two orientations, radians.
pub fn rotation_angle_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    (a.inverse() * b).angle()
}
