//! The eight dihedral transforms: four clockwise rotations, each with an
//! optional horizontal flip applied after rotating. Codes 0..7 encode
//! (code & 3) quarter-turns and (code >> 2) the flip; code 0 is the
//! identity.

use crate::error::{MirError, Result};
use crate::tensor::Tensor;

/// 90-degree clockwise rotation: out[r][c] = in[H-1-c][r].
fn rot90cw(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![0.0; h * w * c];
    for r in 0..w {
        for col in 0..h {
            let dst = (r * h + col) * c;
            let from = ((h - 1 - col) * w + r) * c;
            out[dst..dst + c].copy_from_slice(&src[from..from + c]);
        }
    }
    drop(src);
    Tensor::from_vec(&[w, h, c], out)
}

fn hflip(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = vec![0.0; h * w * c];
    for r in 0..h {
        for col in 0..w {
            let dst = (r * w + col) * c;
            let from = (r * w + (w - 1 - col)) * c;
            out[dst..dst + c].copy_from_slice(&src[from..from + c]);
        }
    }
    drop(src);
    Tensor::from_vec(&[h, w, c], out)
}

/// Applies dihedral transform `code` to any [H,W,C] tensor. Odd rotation
/// counts swap the spatial dimensions.
pub fn dihedral_apply(t: &Tensor, code: u8) -> Tensor {
    assert!(code < 8, "dihedral code must be 0..8");
    let mut cur = t.clone();
    for _ in 0..(code & 3) {
        cur = rot90cw(&cur);
    }
    if code & 4 != 0 {
        cur = hflip(&cur);
    }
    cur
}

/// The code that undoes `code`: found by composing index maps.
pub fn dihedral_inverse(code: u8) -> u8 {
    assert!(code < 8);
    // marker pattern with all-distinct values
    let marker = Tensor::from_vec(&[4, 4, 1], (0..16).map(|v| v as f64).collect());
    let transformed = dihedral_apply(&marker, code);
    for cand in 0..8u8 {
        let back = dihedral_apply(&transformed, cand);
        if back.shape() == marker.shape() && back.max_abs_diff(&marker) == 0.0 {
            return cand;
        }
    }
    unreachable!("every dihedral transform has an inverse")
}

/// Training-time patch augmentation. Requires a square patch so that
/// 90/270-degree codes preserve the shape contract.
pub fn augment(patch: &Tensor, code: u8) -> Result<Tensor> {
    let s = patch.shape();
    if s.len() != 3 {
        return Err(MirError::Shape(format!(
            "augment expects [H,W,C], got {s:?}"
        )));
    }
    if code >= 8 {
        return Err(MirError::Config(format!("augment code {code} out of 0..8")));
    }
    if (code & 3) % 2 == 1 && s[0] != s[1] {
        return Err(MirError::Shape(format!(
            "rotation code {code} needs a square patch, got {}x{}",
            s[0], s[1]
        )));
    }
    Ok(dihedral_apply(patch, code))
}
