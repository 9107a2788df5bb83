//! PSNR and SSIM on the luma (Y) channel.
//!
//! RGB converts to Y with the BT.601 studio-range matrix on the 0-255
//! scale: Y = 16 + 65.481 R + 128.553 G + 24.966 B for R,G,B in [0,1].
//! Grayscale inputs use the same studio mapping Y = 16 + 219 v. PSNR is
//! 20 log10(255) - 10 log10(MSE) on that scale; SSIM uses an 11x11
//! Gaussian window with sigma 1.5 and the standard constants.

use crate::error::{MirError, Result};
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Luma plane on the 0-255 studio scale.
pub fn luma_255(image: &Tensor) -> Result<Vec<f64>> {
    let s = image.shape();
    if s.len() != 3 || (s[2] != 1 && s[2] != 3) {
        return Err(MirError::Shape(format!(
            "luma expects [H,W,1] or [H,W,3], got {s:?}"
        )));
    }
    let d = image.data();
    let y = if s[2] == 3 {
        d.chunks(3)
            .map(|px| 16.0 + 65.481 * px[0] + 128.553 * px[1] + 24.966 * px[2])
            .collect()
    } else {
        d.iter().map(|&v| 16.0 + 219.0 * v).collect()
    };
    Ok(y)
}

/// Peak signal-to-noise ratio on Y, in dB. Identical inputs return +inf.
pub fn psnr_y(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MirError::Shape(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let ya = luma_255(a)?;
    let yb = luma_255(b)?;
    let mse: f64 = ya
        .iter()
        .zip(&yb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / ya.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * 255.0f64.log10() - 10.0 * mse.log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut total = 0.0;
    for r in -half..=half {
        for c in -half..=half {
            let v = (-((r * r + c * c) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w.push(v);
            total += v;
        }
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Structural similarity on Y over all fully interior 11x11 windows.
/// Identical inputs return exactly 1.0.
pub fn ssim_y(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MirError::Shape(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MirError::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let ya = luma_255(a)?;
    let yb = luma_255(b)?;
    let win = gaussian_window();
    let half = SSIM_WINDOW / 2;

    let mut total = 0.0;
    let mut count = 0usize;
    for cr in half..h - half {
        for cc in half..w - half {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            let mut wi = 0;
            for dr in 0..SSIM_WINDOW {
                for dc in 0..SSIM_WINDOW {
                    let p = (cr + dr - half) * w + (cc + dc - half);
                    let wv = win[wi];
                    wi += 1;
                    let va = ya[p];
                    let vb = yb[p];
                    mu_a += wv * va;
                    mu_b += wv * vb;
                    aa += wv * va * va;
                    bb += wv * vb * vb;
                    ab += wv * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let ssim = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            total += ssim;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
