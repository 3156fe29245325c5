use rayon::prelude::*;

use super::{
    project_gaussian, sym2_eigenvalues, GaussianScene, RenderSettings, ALPHA_MAX, MAX_CONDITION,
};
use crate::error::Result;
use crate::geometry::Camera;
use crate::image::RgbImage;

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: RgbImage,
    /// Accumulated opacity, 1 − residual transmittance.
    pub alpha: Vec<f64>,
    /// Expected depth of the composited surface, 0 where nothing was hit.
    pub depth: Vec<f64>,
    pub contributing: Vec<u32>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ProjectedSplat {
    pub index: u32,
    pub mean: [f64; 2],
    /// Inverse 2D covariance as (a, b, c) of [[a, b], [b, c]].
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
    /// Binning radius in pixels; infinite when no cutoff bounds the support.
    pub radius: f64,
    /// Mahalanobis q beyond which alpha is certainly below the cutoff.
    pub q_max: f64,
    /// Half extents of the q ≤ q_max ellipse along x and y.
    pub extent: [f64; 2],
}

impl ProjectedSplat {
    /// Alpha and Gaussian falloff at a pixel, or `None` below `cutoff`.
    #[inline]
    pub fn visible_alpha(&self, px: f64, py: f64, cutoff: f64) -> Option<(f64, f64)> {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let q = self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy;
        if q > self.q_max {
            return None;
        }
        let g = (-0.5 * q).exp();
        let a = (self.opacity * g).min(ALPHA_MAX);
        (a >= cutoff && a > 0.0).then_some((a, g))
    }
}

/// Projects every Gaussian and returns the drawable ones sorted front to
/// back, ties broken by index.
pub(crate) fn project_all(
    scene: &GaussianScene,
    cam: &Camera,
    settings: &RenderSettings,
) -> Vec<ProjectedSplat> {
    let mut splats: Vec<ProjectedSplat> = scene
        .gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let p = project_gaussian(g, cam)?;
            let (hi, lo) = sym2_eigenvalues(&p.cov);
            if !(lo > 0.0) || hi / lo > MAX_CONDITION || !hi.is_finite() {
                return None;
            }
            let det = p.cov[(0, 0)] * p.cov[(1, 1)] - p.cov[(0, 1)] * p.cov[(1, 0)];
            let conic = [
                p.cov[(1, 1)] / det,
                -p.cov[(0, 1)] / det,
                p.cov[(0, 0)] / det,
            ];
            let opacity = g.opacity();
            let sigma = hi.sqrt();
            let q_max = if settings.alpha_cutoff > 0.0 {
                // small slack keeps the exact test authoritative at the boundary
                2.0 * (opacity / settings.alpha_cutoff).ln() * (1.0 + 1e-9) + 1e-9
            } else {
                f64::INFINITY
            };
            let radius = if settings.alpha_cutoff > 0.0 {
                if opacity.min(ALPHA_MAX) < settings.alpha_cutoff {
                    // can never reach the cutoff anywhere
                    return None;
                }
                // beyond this Mahalanobis radius alpha is below the cutoff
                let m = (2.0 * (opacity / settings.alpha_cutoff).ln())
                    .max(0.0)
                    .sqrt();
                sigma * m.max(settings.gaussian_extent)
            } else {
                f64::INFINITY
            };
            Some(ProjectedSplat {
                index: i as u32,
                mean: [p.mean.x, p.mean.y],
                conic,
                opacity,
                color: g.color,
                depth: p.depth,
                radius,
                q_max,
                extent: [
                    (q_max * p.cov[(0, 0)]).sqrt() * (1.0 + 1e-9),
                    (q_max * p.cov[(1, 1)]).sqrt() * (1.0 + 1e-9),
                ],
            })
        })
        .collect();
    splats.sort_by(composite_order);
    splats
}

pub(crate) fn composite_order(a: &ProjectedSplat, b: &ProjectedSplat) -> std::cmp::Ordering {
    a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index))
}

pub(crate) struct TileGrid {
    pub tile: usize,
    pub cols: usize,
    /// Per tile, positions into the sorted splat list.
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub fn bounds(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.cols, t / self.cols);
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        (
            x0,
            y0,
            (x0 + self.tile).min(width),
            (y0 + self.tile).min(height),
        )
    }
}

/// Pixel centers `[a, b)` within `[lo, hi)` that lie inside `center ± ext`.
#[inline]
fn span(center: f64, ext: f64, lo: usize, hi: usize) -> Option<(usize, usize)> {
    let a = (center - ext).ceil().max(lo as f64);
    let b = (center + ext).floor().min((hi - 1) as f64);
    (a <= b).then(|| (a as usize, b as usize + 1))
}

/// Visits one tile's splats front to back. For each splat, `f(k, x, y)` runs
/// on every still-open pixel of its footprint and returns whether that pixel
/// is now finished. Stops once no pixel is open. `done` is indexed row-major
/// within the tile and may start with pixels already closed.
pub(crate) fn sweep_tile(
    local: &[ProjectedSplat],
    (x0, y0, x1, y1): (usize, usize, usize, usize),
    done: &mut [bool],
    mut f: impl FnMut(usize, usize, usize) -> bool,
) {
    let tw = x1 - x0;
    let mut open = done.iter().filter(|d| !**d).count();
    for (k, s) in local.iter().enumerate() {
        if open == 0 {
            break;
        }
        let (Some((xa, xb)), Some((ya, yb))) = (
            span(s.mean[0], s.extent[0], x0, x1),
            span(s.mean[1], s.extent[1], y0, y1),
        ) else {
            continue;
        };
        for y in ya..yb {
            for x in xa..xb {
                let i = (y - y0) * tw + x - x0;
                if !done[i] && f(k, x, y) {
                    done[i] = true;
                    open -= 1;
                }
            }
        }
    }
}

pub(crate) fn tile_lists(
    splats: &[ProjectedSplat],
    width: usize,
    height: usize,
    tile: usize,
) -> TileGrid {
    let cols = width.div_ceil(tile);
    let rows = height.div_ceil(tile);
    let mut lists = vec![Vec::new(); cols * rows];
    for (k, s) in splats.iter().enumerate() {
        let (tx0, tx1, ty0, ty1) = if s.radius.is_finite() {
            let lo_x = s.mean[0] - s.radius;
            let hi_x = s.mean[0] + s.radius;
            let lo_y = s.mean[1] - s.radius;
            let hi_y = s.mean[1] + s.radius;
            if hi_x < 0.0 || hi_y < 0.0 || lo_x > (width - 1) as f64 || lo_y > (height - 1) as f64 {
                continue;
            }
            let cell = |v: f64, n: usize| ((v.max(0.0) / tile as f64).floor() as usize).min(n - 1);
            (
                cell(lo_x, cols),
                cell(hi_x, cols),
                cell(lo_y, rows),
                cell(hi_y, rows),
            )
        } else {
            (0, cols - 1, 0, rows - 1)
        };
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * cols + tx].push(k as u32);
            }
        }
    }
    TileGrid { tile, cols, lists }
}

#[derive(Debug, Clone, Copy)]
struct Pixel {
    color: [f64; 3],
    alpha: f64,
    depth: f64,
    count: u32,
}

#[derive(Debug, Clone, Copy)]
struct Accum {
    t: f64,
    c: [f64; 3],
    d: f64,
    count: u32,
}

impl Accum {
    const EMPTY: Accum = Accum {
        t: 1.0,
        c: [0.0; 3],
        d: 0.0,
        count: 0,
    };

    #[inline]
    fn add(&mut self, s: &ProjectedSplat, a: f64) {
        let w = a * self.t;
        for k in 0..3 {
            self.c[k] += s.color[k] * w;
        }
        self.d += s.depth * w;
        self.t *= 1.0 - a;
        self.count += 1;
    }

    fn finish(self, bg: [f64; 3]) -> Pixel {
        let alpha = 1.0 - self.t;
        Pixel {
            color: [
                self.c[0] + self.t * bg[0],
                self.c[1] + self.t * bg[1],
                self.c[2] + self.t * bg[2],
            ],
            alpha,
            depth: if alpha > 0.0 { self.d / alpha } else { 0.0 },
            count: self.count,
        }
    }
}

fn blank(cam: &Camera, settings: &RenderSettings) -> RenderOutput {
    let (w, h) = (cam.width(), cam.height());
    RenderOutput {
        color: RgbImage::filled(w, h, settings.background),
        alpha: vec![0.0; w * h],
        depth: vec![0.0; w * h],
        contributing: vec![0; w * h],
    }
}

fn store(out: &mut RenderOutput, x: usize, y: usize, p: Pixel) {
    let i = y * out.color.width + x;
    out.color.set(x, y, p.color);
    out.alpha[i] = p.alpha;
    out.depth[i] = p.depth;
    out.contributing[i] = p.count;
}

/// Tile-parallel front-to-back compositing with early termination.
pub fn rasterize(
    scene: &GaussianScene,
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    settings.validate()?;
    let mut out = blank(cam, settings);
    let (w, h) = (cam.width(), cam.height());
    let splats = project_all(scene, cam, settings);
    if splats.is_empty() {
        return Ok(out);
    }
    let grid = tile_lists(&splats, w, h, settings.tile);
    let tiles: Vec<Vec<Pixel>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let (x0, y0, x1, y1) = grid.bounds(t, w, h);
            let local: Vec<ProjectedSplat> =
                grid.lists[t].iter().map(|&k| splats[k as usize]).collect();
            let tw = x1 - x0;
            let mut acc = vec![Accum::EMPTY; tw * (y1 - y0)];
            let mut done = vec![false; acc.len()];
            sweep_tile(&local, (x0, y0, x1, y1), &mut done, |k, x, y| {
                let p = &mut acc[(y - y0) * tw + x - x0];
                if let Some((a, _)) =
                    local[k].visible_alpha(x as f64, y as f64, settings.alpha_cutoff)
                {
                    p.add(&local[k], a);
                }
                p.t < settings.transmittance_floor
            });
            acc.into_iter()
                .map(|a| a.finish(settings.background))
                .collect()
        })
        .collect();
    for (t, pixels) in tiles.into_iter().enumerate() {
        let (x0, y0, x1, _) = grid.bounds(t, w, h);
        let tw = x1 - x0;
        for (i, p) in pixels.into_iter().enumerate() {
            store(&mut out, x0 + i % tw, y0 + i / tw, p);
        }
    }
    Ok(out)
}

/// Per-pixel compositing over every Gaussian, without tiles or early termination.
pub fn reference_render(
    scene: &GaussianScene,
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    settings.validate()?;
    let mut out = blank(cam, settings);
    let splats = project_all(scene, cam, settings);
    for y in 0..cam.height() {
        for x in 0..cam.width() {
            let mut acc = Accum::EMPTY;
            for s in &splats {
                if let Some((a, _)) = s.visible_alpha(x as f64, y as f64, settings.alpha_cutoff) {
                    acc.add(s, a);
                }
            }
            store(&mut out, x, y, acc.finish(settings.background));
        }
    }
    Ok(out)
}
