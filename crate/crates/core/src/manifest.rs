//! Dataset manifest: which images, depth maps and rig files make up a capture.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StereoRole {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCamera {
    pub id: String,
    pub role: StereoRole,
    /// The other camera of the stereo pair.
    pub partner: String,
    /// Image path per timestamp.
    pub images: BTreeMap<u32, String>,
    /// Optional metric depth (EGDP) per timestamp.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub depths: BTreeMap<u32, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WandFiles {
    pub observations: String,
    pub spec: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub rig: String,
    pub timestamps: Vec<u32>,
    /// Stereo baseline in meters.
    pub baseline: f64,
    pub cameras: Vec<ManifestCamera>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wand: Option<WandFiles>,
    /// Ground-truth scenes per timestamp, when known.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scenes: BTreeMap<u32, String>,
}

/// A manifest with the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Loads and validates, including that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let ds = Self { root, manifest };
        ds.validate()?;
        Ok(ds)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn camera(&self, id: &str) -> Option<&ManifestCamera> {
        self.manifest.cameras.iter().find(|c| c.id == id)
    }

    pub fn cameras_with_role(&self, role: StereoRole) -> impl Iterator<Item = &ManifestCamera> {
        self.manifest.cameras.iter().filter(move |c| c.role == role)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let fail = |msg: String| Err(Error::Validation(msg));
        if m.version != MANIFEST_VERSION {
            return fail(format!("manifest version {} unsupported", m.version));
        }
        if m.timestamps.is_empty() {
            return fail("manifest lists no timestamps".into());
        }
        if !(m.baseline > 0.0) {
            return fail(format!("stereo baseline {} must be positive", m.baseline));
        }
        let mut files = vec![m.rig.clone()];
        for c in &m.cameras {
            if m.cameras.iter().filter(|o| o.id == c.id).count() > 1 {
                return fail(format!("camera {} listed twice", c.id));
            }
            let Some(p) = self.camera(&c.partner) else {
                return fail(format!(
                    "camera {} names missing partner {}",
                    c.id, c.partner
                ));
            };
            if p.partner != c.id || p.role == c.role {
                return fail(format!(
                    "cameras {} and {} are not a left/right pair",
                    c.id, p.id
                ));
            }
            for t in &m.timestamps {
                match c.images.get(t) {
                    Some(f) => files.push(f.clone()),
                    None => return fail(format!("camera {} has no image at timestamp {t}", c.id)),
                }
            }
            files.extend(c.depths.values().cloned());
        }
        if let Some(w) = &m.wand {
            files.push(w.observations.clone());
            files.push(w.spec.clone());
        }
        files.extend(m.scenes.values().cloned());
        for f in files {
            if !self.resolve(&f).is_file() {
                return fail(format!("referenced file {f} does not exist"));
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
