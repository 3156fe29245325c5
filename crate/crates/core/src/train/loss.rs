use super::ssim::ssim_with_grad;
use crate::error::Result;
use crate::image::RgbImage;
use crate::splat::sigmoid;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub l1: f64,
    /// (1 − SSIM)/2
    pub dssim: f64,
    /// Mean activated opacity.
    pub opacity: f64,
    /// d(total)/d(rendered), interleaved RGB.
    pub grad_image: Vec<f64>,
}

/// (1−α)·L1 + α·D-SSIM + λ·mean σ(o).
pub fn loss(
    rendered: &RgbImage,
    target: &RgbImage,
    alpha_dssim: f64,
    lambda_opacity: f64,
    opacity_logits: &[f64],
) -> Result<LossOutput> {
    rendered.ensure_same_shape(target)?;
    let n = rendered.data.len() as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = Vec::with_capacity(rendered.data.len());
    for (r, t) in rendered.data.iter().zip(&target.data) {
        let d = r - t;
        l1 += d.abs();
        grad.push((1.0 - alpha_dssim) * signum(d) / n);
    }
    l1 /= n;
    let mut dssim = 0.0;
    if alpha_dssim > 0.0 {
        let (s, g) = ssim_with_grad(rendered, target)?;
        dssim = (1.0 - s) / 2.0;
        for (acc, gs) in grad.iter_mut().zip(g) {
            *acc -= alpha_dssim * 0.5 * gs;
        }
    }
    let opacity = if opacity_logits.is_empty() {
        0.0
    } else {
        opacity_logits.iter().map(|&o| sigmoid(o)).sum::<f64>() / opacity_logits.len() as f64
    };
    Ok(LossOutput {
        total: (1.0 - alpha_dssim) * l1 + alpha_dssim * dssim + lambda_opacity * opacity,
        l1,
        dssim,
        opacity,
        grad_image: grad,
    })
}

/// Gradient of λ·mean σ(o) with respect to each logit.
pub fn opacity_gradient(opacity_logits: &[f64], lambda_opacity: f64) -> Vec<f64> {
    let n = opacity_logits.len().max(1) as f64;
    opacity_logits
        .iter()
        .map(|&o| {
            let s = sigmoid(o);
            lambda_opacity * s * (1.0 - s) / n
        })
        .collect()
}

fn signum(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}
