//! Synthetic corpus: smooth color gradients with solid rectangles.
//! Piecewise-smooth content a small restoration net can learn from.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::pipeline::io;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One synthetic HQ image: a bilinear blend of four random corner colors
/// with 1-3 random solid rectangles on top.
pub fn synth_image(size: usize, rng: &mut Rng) -> Tensor {
    let mut corners = [[0.0; 3]; 4];
    for corner in corners.iter_mut() {
        for ch in corner.iter_mut() {
            *ch = rng.uniform();
        }
    }
    let denom = (size - 1).max(1) as f64;
    let mut data = vec![0.0; size * size * 3];
    for r in 0..size {
        let fr = r as f64 / denom;
        for c in 0..size {
            let fc = c as f64 / denom;
            for ch in 0..3 {
                data[(r * size + c) * 3 + ch] = corners[0][ch] * (1.0 - fr) * (1.0 - fc)
                    + corners[1][ch] * (1.0 - fr) * fc
                    + corners[2][ch] * fr * (1.0 - fc)
                    + corners[3][ch] * fr * fc;
            }
        }
    }
    let rects = 1 + rng.below(3);
    for _ in 0..rects {
        let h = 3 + rng.below(size / 2);
        let w = 3 + rng.below(size / 2);
        let r0 = rng.below(size.saturating_sub(h).max(1));
        let c0 = rng.below(size.saturating_sub(w).max(1));
        let color = [rng.uniform(), rng.uniform(), rng.uniform()];
        for r in r0..(r0 + h).min(size) {
            for c in c0..(c0 + w).min(size) {
                for ch in 0..3 {
                    data[(r * size + c) * 3 + ch] = color[ch];
                }
            }
        }
    }
    Tensor::from_vec(&[size, size, 3], data)
}

/// Writes `count` synthetic images into `dir` as img_NNN.ppm and returns
/// their paths in filename order.
pub fn synth_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = Rng::derive(seed, "synth-corpus");
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = synth_image(size, &mut rng);
        let path = dir.join(format!("img_{i:03}.ppm"));
        io::image_write(&path, &img)?;
        paths.push(path);
    }
    Ok(paths)
}
