//! Posed images tagged with the role they may play.

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewRole {
    Captured,
    HeldOut,
    Augmented,
}

#[derive(Debug, Clone)]
pub struct View {
    pub camera: Camera,
    pub image: RgbImage,
    pub role: ViewRole,
}

impl View {
    pub fn new(camera: Camera, image: RgbImage, role: ViewRole) -> Result<Self> {
        if image.width != camera.width() || image.height != camera.height() {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} for camera {} of {}x{}",
                image.width,
                image.height,
                camera.id,
                camera.width(),
                camera.height()
            )));
        }
        Ok(Self {
            camera,
            image,
            role,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ViewSet {
    pub views: Vec<View>,
}

impl ViewSet {
    pub fn new(views: Vec<View>) -> Self {
        Self { views }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn with_role(&self, role: ViewRole) -> impl Iterator<Item = &View> {
        self.views.iter().filter(move |v| v.role == role)
    }

    pub fn count(&self, role: ViewRole) -> usize {
        self.with_role(role).count()
    }

    /// Errors if any view could leak held-out data into optimization.
    pub fn ensure_trainable(&self) -> Result<()> {
        match self.views.iter().find(|v| v.role == ViewRole::HeldOut) {
            Some(v) => Err(Error::Protocol(format!(
                "held-out view of camera {} offered for training",
                v.camera.id
            ))),
            None => Ok(()),
        }
    }
}

/// Views that may enter evaluation statistics. Only held-out views convert.
#[derive(Debug, Clone, Copy)]
pub struct HeldOut<'a>(&'a View);

impl<'a> HeldOut<'a> {
    pub fn new(view: &'a View) -> Result<Self> {
        if view.role == ViewRole::HeldOut {
            Ok(Self(view))
        } else {
            Err(Error::Protocol(format!(
                "{:?} view of camera {} cannot be used for evaluation",
                view.role, view.camera.id
            )))
        }
    }

    pub fn view(&self) -> &'a View {
        self.0
    }

    pub fn all(set: &'a ViewSet) -> Vec<HeldOut<'a>> {
        set.with_role(ViewRole::HeldOut).map(HeldOut).collect()
    }
}
