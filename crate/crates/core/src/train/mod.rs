//! Scene optimization: loss, analytic gradients, Adam and the two-stage schedule.

mod adam;
mod backward;
mod loss;
pub mod ssim;

pub use adam::Adam;
pub use backward::backward;
pub use loss::{loss, opacity_gradient, LossOutput};
pub use ssim::{ssim, ssim_with_grad};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::{rasterize, GaussianScene, RenderSettings, PARAMS};
use crate::views::{View, ViewRole, ViewSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha_dssim: f64,
    pub lambda_opacity: f64,
    /// Position learning rate.
    pub lr: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub warmup_steps: usize,
    pub refine_steps: usize,
    pub random_background: bool,
    /// Must stay off; present so configs can state it explicitly.
    pub densify: bool,
    pub seed: u64,
    pub render: RenderSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_dssim: 0.2,
            lambda_opacity: 0.2,
            lr: 1.6e-4,
            lr_color: 2.5e-3,
            lr_opacity: 0.05,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            warmup_steps: 500,
            refine_steps: 1500,
            random_background: true,
            densify: false,
            seed: 0,
            render: RenderSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_dssim) {
            return Err(Error::Validation(format!(
                "alpha_dssim {} outside [0, 1]",
                self.alpha_dssim
            )));
        }
        if !(self.lambda_opacity >= 0.0) {
            return Err(Error::Validation(format!(
                "lambda_opacity {} is negative",
                self.lambda_opacity
            )));
        }
        let lrs = [
            self.lr,
            self.lr_color,
            self.lr_opacity,
            self.lr_scale,
            self.lr_rotation,
        ];
        if lrs.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation(
                "learning rates must be finite and non-negative".into(),
            ));
        }
        if self.densify {
            return Err(Error::Validation(
                "densification is disabled in this pipeline".into(),
            ));
        }
        self.render
            .validate()
            .map_err(|e| Error::Validation(e.to_string()))
    }

    pub fn learning_rates(&self) -> [f64; PARAMS] {
        let mut lr = [0.0; PARAMS];
        lr[0..3].fill(self.lr);
        lr[3..6].fill(self.lr_scale);
        lr[6..10].fill(self.lr_rotation);
        lr[10] = self.lr_opacity;
        lr[11..14].fill(self.lr_color);
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l1: f64,
    pub dssim: f64,
    pub opacity: f64,
    pub total: f64,
}

/// Supplies augmented views once warm-up is over.
pub trait AugmentProvider {
    fn augment(&mut self, scene: &GaussianScene) -> Result<Vec<View>>;
}

/// Provider that never adds views.
pub struct NoAugment;

impl AugmentProvider for NoAugment {
    fn augment(&mut self, _scene: &GaussianScene) -> Result<Vec<View>> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub scene: GaussianScene,
    pub history: Vec<LossRecord>,
    pub warmup_steps_run: usize,
    pub refine_steps_run: usize,
    pub augmented_views: usize,
    /// Gaussian count observed after every step.
    pub gaussian_counts: Vec<usize>,
}

/// Round-robin over a fresh seeded permutation per pass.
struct Schedule {
    order: Vec<usize>,
    pos: usize,
    n: usize,
}

impl Schedule {
    fn new(n: usize) -> Self {
        Self {
            order: Vec::new(),
            pos: 0,
            n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One optimization step on `view`. Returns the loss terms.
pub fn train_step(
    scene: &mut GaussianScene,
    adam: &mut Adam,
    view: &View,
    settings: &RenderSettings,
    config: &TrainConfig,
) -> Result<LossOutput> {
    let out = rasterize(scene, &view.camera, settings)?;
    let logits: Vec<f64> = scene.gaussians.iter().map(|g| g.opacity_logit).collect();
    let l = loss(
        &out.color,
        &view.image,
        config.alpha_dssim,
        config.lambda_opacity,
        &logits,
    )?;
    if !l.total.is_finite() {
        return Ok(l);
    }
    let mut grads = backward(scene, &view.camera, settings, &l.grad_image)?;
    for (g, d) in grads
        .iter_mut()
        .zip(opacity_gradient(&logits, config.lambda_opacity))
    {
        g[10] += d;
    }
    adam.update(&mut scene.gaussians, &grads);
    Ok(l)
}

/// Warm-up on captured views, then refinement on captured plus augmented
/// views. The Gaussian count never changes.
pub fn train(
    scene: GaussianScene,
    captured: &ViewSet,
    provider: &mut dyn AugmentProvider,
    config: &TrainConfig,
) -> Result<TrainResult> {
    config.validate()?;
    captured.ensure_trainable()?;
    if captured.count(ViewRole::Captured) == 0 {
        return Err(Error::InsufficientData(
            "training needs at least one captured view".into(),
        ));
    }
    if scene.is_empty() {
        return Err(Error::EmptyInitialization);
    }
    let count = scene.len();
    let mut scene = scene;
    let mut adam = Adam::new(count, config.learning_rates());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.warmup_steps + config.refine_steps);
    let mut views: Vec<&View> = captured.with_role(ViewRole::Captured).collect();
    let mut counts = Vec::with_capacity(config.warmup_steps + config.refine_steps);

    let mut run = |scene: &mut GaussianScene,
                   views: &[&View],
                   steps: usize,
                   offset: usize,
                   rng: &mut ChaCha8Rng,
                   history: &mut Vec<LossRecord>,
                   counts: &mut Vec<usize>|
     -> Result<()> {
        let mut schedule = Schedule::new(views.len());
        for i in 0..steps {
            let view = views[schedule.next(rng)];
            let mut settings = config.render;
            if config.random_background {
                settings.background = [rng.gen(), rng.gen(), rng.gen()];
            }
            let l = train_step(scene, &mut adam, view, &settings, config)?;
            let step = offset + i;
            if !l.total.is_finite()
                || scene
                    .gaussians
                    .iter()
                    .any(|g| g.to_params().iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Diverged {
                    step,
                    detail: format!(
                        "loss {} (l1 {}, dssim {}, opacity {}) on view {}; {}",
                        l.total,
                        l.l1,
                        l.dssim,
                        l.opacity,
                        view.camera.id,
                        state_summary(scene)
                    ),
                });
            }
            counts.push(scene.len());
            history.push(LossRecord {
                step,
                l1: l.l1,
                dssim: l.dssim,
                opacity: l.opacity,
                total: l.total,
            });
        }
        Ok(())
    };

    run(
        &mut scene,
        &views,
        config.warmup_steps,
        0,
        &mut rng,
        &mut history,
        &mut counts,
    )?;
    let mut augmented = Vec::new();
    if config.refine_steps > 0 {
        augmented = provider.augment(&scene)?;
        if let Some(v) = augmented.iter().find(|v| v.role != ViewRole::Augmented) {
            return Err(Error::Protocol(format!(
                "augment provider returned a {:?} view for camera {}",
                v.role, v.camera.id
            )));
        }
        views.extend(augmented.iter());
        run(
            &mut scene,
            &views,
            config.refine_steps,
            config.warmup_steps,
            &mut rng,
            &mut history,
            &mut counts,
        )?;
    }
    Ok(TrainResult {
        warmup_steps_run: config.warmup_steps,
        refine_steps_run: config.refine_steps,
        augmented_views: augmented.len(),
        gaussian_counts: counts,
        scene,
        history,
    })
}

fn state_summary(scene: &GaussianScene) -> String {
    let mut lo = [f64::INFINITY; PARAMS];
    let mut hi = [f64::NEG_INFINITY; PARAMS];
    let mut bad = 0;
    for g in &scene.gaussians {
        let p = g.to_params();
        if p.iter().any(|v| !v.is_finite()) {
            bad += 1;
        }
        for i in 0..PARAMS {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    format!(
        "{bad} of {} Gaussians non-finite; parameter ranges {lo:?}..{hi:?}",
        scene.len()
    )
}

pub fn write_loss_csv(history: &[LossRecord], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in history {
        wr.serialize(r)
            .map_err(|e| Error::format("CSV", e.to_string()))?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn save_loss_csv(history: &[LossRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_loss_csv(history, f)
}
