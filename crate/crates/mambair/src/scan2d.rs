//! 2D selective scan: four-direction flattening, per-direction scans,
//! summation merge.
//!
//! A feature map [H,W,C] is flattened into 1D token sequences along four
//! traversal geometries - {row-major, column-major} x {forward, reverse} -
//! each scanned independently with its own input-dependent parameters,
//! then un-permuted back to pixel order and summed in a fixed direction
//! order so the merge is deterministic.

use std::cell::Cell;
use std::rc::Rc;

use crate::error::{MirError, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Number of traversal directions.
pub const NUM_DIRECTIONS: usize = 4;

thread_local! {
    /// Cell-update counter for cost accounting: incremented by L*C*N per
    /// directional scan. The scan work is exactly proportional to this.
    static SCAN_CELL_OPS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset_scan_cell_ops() {
    SCAN_CELL_OPS.with(|c| c.set(0));
}

pub fn scan_cell_ops() -> u64 {
    SCAN_CELL_OPS.with(|c| c.get())
}

/// The four flattened views of an H x W grid, as index maps.
///
/// `perm[d][i]` is the pixel (row-major index) sitting at sequence
/// position `i` of direction `d`; `inv[d][p]` is the sequence position
/// of pixel `p`. Directions: 0 = row-major forward, 1 = column-major
/// forward, 2 = reverse of 0, 3 = reverse of 1.
#[derive(Clone, Debug)]
pub struct DirectionalSequences {
    pub h: usize,
    pub w: usize,
    pub perm: [Rc<Vec<usize>>; NUM_DIRECTIONS],
    pub inv: [Rc<Vec<usize>>; NUM_DIRECTIONS],
}

impl DirectionalSequences {
    pub fn new(h: usize, w: usize) -> Self {
        assert!(h >= 1 && w >= 1, "grid must be at least 1x1");
        let hw = h * w;
        let dir1: Vec<usize> = (0..hw).collect();
        let mut dir2 = Vec::with_capacity(hw);
        for col in 0..w {
            for row in 0..h {
                dir2.push(row * w + col);
            }
        }
        let dir3: Vec<usize> = dir1.iter().rev().copied().collect();
        let dir4: Vec<usize> = dir2.iter().rev().copied().collect();
        let perm = [Rc::new(dir1), Rc::new(dir2), Rc::new(dir3), Rc::new(dir4)];
        let inv = std::array::from_fn(|d| {
            let mut inv = vec![0usize; hw];
            for (i, &p) in perm[d].iter().enumerate() {
                inv[p] = i;
            }
            Rc::new(inv)
        });
        DirectionalSequences { h, w, perm, inv }
    }
}

/// Flatten a [H,W,C] feature into the four [H*W, C] directional
/// sequences (on tape, so gradients flow back through the gathers).
pub fn flatten_directions(
    tape: &mut Tape,
    feature: &Tensor,
) -> Result<(Vec<Tensor>, DirectionalSequences)> {
    let shape = feature.shape();
    if shape.len() != 3 {
        return Err(MirError::Shape(format!(
            "flatten_directions expects [H,W,C], got {shape:?}"
        )));
    }
    let seqs = DirectionalSequences::new(shape[0], shape[1]);
    let mut out = Vec::with_capacity(NUM_DIRECTIONS);
    for d in 0..NUM_DIRECTIONS {
        out.push(tape.gather_rows(feature, &seqs.perm[d])?);
    }
    Ok((out, seqs))
}

/// Un-permute four directional outputs back to pixel order and sum them
/// in direction order 0+1+2+3.
pub fn merge_directions(
    tape: &mut Tape,
    outputs: &[Tensor],
    seqs: &DirectionalSequences,
) -> Result<Tensor> {
    if outputs.len() != NUM_DIRECTIONS {
        return Err(MirError::Shape(format!(
            "merge_directions expects {NUM_DIRECTIONS} sequences, got {}",
            outputs.len()
        )));
    }
    let hw = seqs.h * seqs.w;
    let mut acc: Option<Tensor> = None;
    for (d, y) in outputs.iter().enumerate() {
        if y.shape().first().copied() != Some(hw) {
            return Err(MirError::Shape(format!(
                "direction {d} output has {:?} rows, expected {hw}",
                y.shape().first()
            )));
        }
        let back = tape.gather_rows(y, &seqs.inv[d])?;
        acc = Some(match acc {
            None => back,
            Some(prev) => tape.add(&prev, &back)?,
        });
    }
    let c = *outputs[0].shape().last().unwrap();
    tape.reshape(&acc.unwrap(), &[seqs.h, seqs.w, c])
}

/// Learned tensors for one directional selective scan.
#[derive(Clone)]
pub struct ScanParams {
    /// [C,N]; the state matrix is -exp(a_log).
    pub a_log: Tensor,
    /// [C,C] step-size projection.
    pub w_dt: Tensor,
    /// [C] step-size bias (pre-softplus).
    pub b_dt: Tensor,
    /// [C,N] projection for per-token B.
    pub w_b: Tensor,
    /// [C,N] projection for per-token C.
    pub w_c: Tensor,
    /// [C] feedthrough.
    pub d: Tensor,
}

impl ScanParams {
    pub fn init(c_feat: usize, n: usize, rng: &mut Rng) -> Self {
        let p = crate::ssm::SelectiveParams::init(c_feat, n, rng);
        ScanParams {
            a_log: Tensor::from_vec(&[c_feat, n], p.a_log),
            w_dt: Tensor::from_vec(&[c_feat, c_feat], p.w_dt),
            b_dt: Tensor::from_vec(&[c_feat], p.b_dt),
            w_b: Tensor::from_vec(&[c_feat, n], p.w_b),
            w_c: Tensor::from_vec(&[c_feat, n], p.w_c),
            d: Tensor::from_vec(&[c_feat], p.d),
        }
    }

    pub fn zeros(c_feat: usize, n: usize) -> Self {
        ScanParams {
            a_log: Tensor::zeros(&[c_feat, n]),
            w_dt: Tensor::zeros(&[c_feat, c_feat]),
            b_dt: Tensor::zeros(&[c_feat]),
            w_b: Tensor::zeros(&[c_feat, n]),
            w_c: Tensor::zeros(&[c_feat, n]),
            d: Tensor::zeros(&[c_feat]),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("a_log", &self.a_log),
            ("w_dt", &self.w_dt),
            ("b_dt", &self.b_dt),
            ("w_b", &self.w_b),
            ("w_c", &self.w_c),
            ("d", &self.d),
        ]
    }
}

/// Directions used for a given scan-direction count: 1 keeps the forward
/// row-major scan, 2 adds its reverse, 4 uses all traversal geometries.
pub fn active_directions(scan_directions: usize) -> Result<&'static [usize]> {
    match scan_directions {
        1 => Ok(&[0]),
        2 => Ok(&[0, 2]),
        4 => Ok(&[0, 1, 2, 3]),
        other => Err(MirError::Config(format!(
            "scan_directions must be 1, 2 or 4; got {other}"
        ))),
    }
}

/// One directional branch: project input-dependent parameters, scan.
fn scan_one_direction(tape: &mut Tape, xseq: &Tensor, p: &ScanParams) -> Result<Tensor> {
    let dt_pre = tape.linear(xseq, &p.w_dt, Some(&p.b_dt))?;
    let dt = tape.softplus(&dt_pre);
    let b = tape.linear(xseq, &p.w_b, None)?;
    let cp = tape.linear(xseq, &p.w_c, None)?;
    let a = tape.neg_exp(&p.a_log);
    tape.selective_scan(xseq, &dt, &b, &cp, &a, &p.d)
}

/// Full 2D selective scan module: flatten along the active directions,
/// scan each with its own parameter set (or one shared set), un-permute
/// and sum. Output shape equals input shape.
pub fn ssm2d_forward(
    tape: &mut Tape,
    feature: &Tensor,
    params: &[ScanParams],
    scan_directions: usize,
) -> Result<Tensor> {
    let shape = feature.shape();
    if shape.len() != 3 {
        return Err(MirError::Shape(format!(
            "ssm2d_forward expects [H,W,C], got {shape:?}"
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let dirs = active_directions(scan_directions)?;
    if params.len() != dirs.len() && params.len() != 1 {
        return Err(MirError::Config(format!(
            "expected {} parameter sets (or 1 shared), got {}",
            dirs.len(),
            params.len()
        )));
    }
    let seqs = DirectionalSequences::new(h, w);
    let n = params[0].a_log.shape()[1];
    let mut acc: Option<Tensor> = None;
    for (slot, &d) in dirs.iter().enumerate() {
        let p = &params[slot % params.len()];
        let xseq = tape.gather_rows(feature, &seqs.perm[d])?;
        let yseq = scan_one_direction(tape, &xseq, p)?;
        SCAN_CELL_OPS.with(|ops| ops.set(ops.get() + (h * w * c * n) as u64));
        let back = tape.gather_rows(&yseq, &seqs.inv[d])?;
        acc = Some(match acc {
            None => back,
            Some(prev) => tape.add(&prev, &back)?,
        });
    }
    tape.reshape(&acc.unwrap(), &[h, w, c])
}
