//! Degradation models that manufacture low-quality inputs from
//! high-quality images, and the bilinear upsampler used as the
//! super-resolution comparison baseline.

use crate::blocks::Task;
use crate::error::{MirError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Additive white Gaussian noise of standard deviation `sigma`
/// (internal [0,1] units). Seeded Box-Muller; not clamped.
pub fn add_gaussian_noise(hq: &Tensor, sigma: f64, rng: &mut Rng) -> Tensor {
    let data: Vec<f64> = hq.data().iter().map(|&v| v + sigma * rng.gaussian()).collect();
    Tensor::from_vec(hq.shape(), data)
}

/// Block average over non-overlapping scale x scale cells.
pub fn area_downsample(hq: &Tensor, scale: usize) -> Result<Tensor> {
    let s = hq.shape();
    if s.len() != 3 {
        return Err(MirError::Shape("area_downsample expects [H,W,C]".into()));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(MirError::Shape(format!(
            "size {h}x{w} not divisible by scale {scale}"
        )));
    }
    let (oh, ow) = (h / scale, w / scale);
    let src = hq.data();
    let norm = 1.0 / (scale * scale) as f64;
    let mut out = vec![0.0; oh * ow * c];
    for r in 0..oh {
        for col in 0..ow {
            for dr in 0..scale {
                for dc in 0..scale {
                    let from = ((r * scale + dr) * w + (col * scale + dc)) * c;
                    let to = (r * ow + col) * c;
                    for ch in 0..c {
                        out[to + ch] += src[from + ch] * norm;
                    }
                }
            }
        }
    }
    drop(src);
    Ok(Tensor::from_vec(&[oh, ow, c], out))
}

/// Task-specific degradation: Gaussian noise for denoising, area
/// downsampling for super-resolution.
pub fn degrade(hq: &Tensor, task: Task, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    match task {
        Task::Denoise => Ok(add_gaussian_noise(hq, sigma, rng)),
        _ => area_downsample(hq, task.scale()),
    }
}

/// Bilinear upsampling with half-pixel-centered sampling, matching the
/// geometry of [`area_downsample`]. The reference the learned upsampler
/// must beat.
pub fn bilinear_upsample(lq: &Tensor, scale: usize) -> Result<Tensor> {
    let s = lq.shape();
    if s.len() != 3 {
        return Err(MirError::Shape("bilinear_upsample expects [H,W,C]".into()));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if scale == 0 {
        return Err(MirError::Shape("scale must be positive".into()));
    }
    let (oh, ow) = (h * scale, w * scale);
    let mut out = vec![0.0; oh * ow * c];
    crate::tensor::kernels::bilinear_upsample_forward(&lq.data(), h, w, c, scale, &mut out);
    Ok(Tensor::from_vec(&[oh, ow, c], out))
}

/// Clamp all values to [0,1]; used before metric evaluation.
pub fn clamp01(t: &Tensor) -> Tensor {
    Tensor::from_vec(
        t.shape(),
        t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}
