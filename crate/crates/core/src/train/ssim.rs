use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-mode separable filtering; output is (w−10)×(h−10).
fn filter(data: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut s = 0.0;
            for i in 0..WINDOW {
                s += k[i] * row[x + i];
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for i in 0..WINDOW {
                s += k[i] * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of `filter`: spreads an output-grid map back onto the full image.
fn filter_adjoint(g: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for i in 0..WINDOW {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn check(a: &RgbImage, b: &RgbImage) -> Result<()> {
    a.ensure_same_shape(b)?;
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: WINDOW,
        });
    }
    Ok(())
}

/// Mean SSIM over all valid window positions and the three channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a` (interleaved like the image).
pub fn ssim_with_grad(a: &RgbImage, b: &RgbImage) -> Result<(f64, Vec<f64>)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("requested")))
}

fn ssim_impl(a: &RgbImage, b: &RgbImage, grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check(a, b)?;
    let (w, h) = (a.width, a.height);
    let k = gaussian_window();
    let n = ((w + 1 - WINDOW) * (h + 1 - WINDOW) * 3) as f64;
    let mut total = 0.0;
    let mut out = grad.then(|| vec![0.0; w * h * 3]);
    for c in 0..3 {
        let ca = a.channel(c).data;
        let cb = b.channel(c).data;
        let aa: Vec<f64> = ca.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = cb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = ca.iter().zip(&cb).map(|(x, y)| x * y).collect();
        let mu_a = filter(&ca, w, h, &k);
        let mu_b = filter(&cb, w, h, &k);
        let e_aa = filter(&aa, w, h, &k);
        let e_bb = filter(&bb, w, h, &k);
        let e_ab = filter(&ab, w, h, &k);
        let m = mu_a.len();
        let mut g_mu = vec![0.0; m];
        let mut g_aa = vec![0.0; m];
        let mut g_ab = vec![0.0; m];
        for i in 0..m {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let a1 = 2.0 * ma * mb + C1;
            let a2 = 2.0 * cov + C2;
            let b1 = ma * ma + mb * mb + C1;
            let b2 = va + vb + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if grad {
                g_mu[i] = s * (2.0 * mb / a1 - 2.0 * mb / a2 - 2.0 * ma / b1 + 2.0 * ma / b2) / n;
                g_aa[i] = -s / b2 / n;
                g_ab[i] = 2.0 * s / a2 / n;
            }
        }
        if let Some(out) = out.as_mut() {
            let d_mu = filter_adjoint(&g_mu, w, h, &k);
            let d_aa = filter_adjoint(&g_aa, w, h, &k);
            let d_ab = filter_adjoint(&g_ab, w, h, &k);
            for p in 0..w * h {
                out[p * 3 + c] = d_mu[p] + 2.0 * ca[p] * d_aa[p] + cb[p] * d_ab[p];
            }
        }
    }
    Ok((total / n, out))
}
