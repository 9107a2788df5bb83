//! Reverse-mode autodiff tape.
//!
//! Ops execute eagerly; when the tape is recording, each op also pushes a
//! node holding handles to its operands plus whatever forward state the
//! adjoint needs. `backward` replays the nodes in reverse, accumulating
//! per-node gradients in a scratch map and exporting them into the `grad`
//! buffer of every grad-enabled tensor it saw.
//!
//! A tape is confined to a single thread. Batch-parallel callers use one
//! tape per thread; reduction orders inside every kernel are fixed, so the
//! results match sequential execution bit for bit.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels;
use super::Tensor;
use crate::error::{MirError, Result};

enum Op {
    Linear {
        x: Tensor,
        w: Tensor,
        b: Option<Tensor>,
        y: Tensor,
    },
    Conv2d {
        x: Tensor,
        w: Tensor,
        b: Tensor,
        y: Tensor,
        pad: usize,
    },
    DepthwiseConv2d {
        x: Tensor,
        w: Tensor,
        b: Tensor,
        y: Tensor,
    },
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        y: Tensor,
        cache: Vec<f64>,
    },
    Unary {
        kind: UnaryKind,
        x: Tensor,
        y: Tensor,
    },
    Add {
        a: Tensor,
        b: Tensor,
        y: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
        y: Tensor,
    },
    Scale {
        x: Tensor,
        k: f64,
        y: Tensor,
    },
    ScaleChannels {
        x: Tensor,
        s: Tensor,
        y: Tensor,
    },
    GatherRows {
        x: Tensor,
        idx: Rc<Vec<usize>>,
        y: Tensor,
    },
    SelectiveScan {
        x: Tensor,
        dt: Tensor,
        b: Tensor,
        cp: Tensor,
        a: Tensor,
        d: Tensor,
        y: Tensor,
        h_cache: Vec<f64>,
        abar_cache: Vec<f64>,
        n: usize,
    },
    GlobalAvgPool {
        x: Tensor,
        y: Tensor,
    },
    SelectPixel {
        x: Tensor,
        row: usize,
        col: usize,
        y: Tensor,
    },
    SumAll {
        x: Tensor,
        y: Tensor,
    },
    PixelShuffle {
        x: Tensor,
        y: Tensor,
        r: usize,
    },
    L1Loss {
        pred: Tensor,
        target: Tensor,
        y: Tensor,
    },
    CharbonnierLoss {
        pred: Tensor,
        target: Tensor,
        eps: f64,
        y: Tensor,
    },
    Reshape {
        x: Tensor,
        y: Tensor,
    },
    BilinearUp {
        x: Tensor,
        y: Tensor,
        scale: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Silu,
    Sigmoid,
    Relu,
    Softplus,
    Gelu,
    /// y = -exp(x); parameterizes strictly negative state matrices.
    NegExp,
}

/// Gradient store used during a single backward sweep.
struct GradMap {
    grads: HashMap<usize, Vec<f64>>,
}

impl GradMap {
    fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.grads.remove(&t.id())
    }

    fn add(&mut self, t: &Tensor, delta: Vec<f64>) {
        match self.grads.entry(t.id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (g, d) in e.get_mut().iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(delta);
            }
        }
    }

    fn add_slice(&mut self, t: &Tensor, delta: &[f64]) {
        match self.grads.entry(t.id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (g, d) in e.get_mut().iter_mut().zip(delta) {
                    *g += d;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(delta.to_vec());
            }
        }
    }
}

pub struct Tape {
    ops: Vec<Op>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Recording tape for training and gradient probes.
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            recording: true,
        }
    }

    /// Non-recording context: ops run eagerly, nothing is retained, and
    /// intermediates free as soon as the caller drops them.
    pub fn inference() -> Self {
        Tape {
            ops: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Drops every recorded node and the intermediate tensors they pin.
    pub fn clear(&mut self) {
        self.ops.clear();
    }

    fn push(&mut self, op: Op) {
        if self.recording {
            self.ops.push(op);
        }
    }

    // ── op constructors ──────────────────────────────────────────────

    /// y[r,o] = sum_i x[r,i] w[i,o] + b[o], applied over the trailing axis.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let ws = w.shape();
        if ws.len() != 2 {
            return Err(MirError::Shape(format!(
                "linear weight must be 2-d, got {ws:?}"
            )));
        }
        let (in_dim, out_dim) = (ws[0], ws[1]);
        let xs = x.shape();
        if xs.is_empty() || xs[xs.len() - 1] != in_dim {
            return Err(MirError::Shape(format!(
                "linear input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        if let Some(b) = b {
            if b.numel() != out_dim {
                return Err(MirError::Shape(format!(
                    "linear bias length {} != out dim {out_dim}",
                    b.numel()
                )));
            }
        }
        let rows = x.numel() / in_dim;
        let mut y_shape = xs.to_vec();
        *y_shape.last_mut().unwrap() = out_dim;
        let mut y = vec![0.0; rows * out_dim];
        kernels::linear_forward(
            &x.data(),
            rows,
            in_dim,
            &w.data(),
            out_dim,
            b.map(|t| t.data()).as_deref().map(|v| v.as_slice()),
            &mut y,
        );
        let y = Tensor::from_vec(&y_shape, y);
        self.push(Op::Linear {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
            y: y.clone(),
        });
        Ok(y)
    }

    /// Same-padded cross-correlation: x [H,W,Cin] * w [k,k,Cin,Cout] + b.
    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, padding: usize) -> Result<Tensor> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(MirError::Shape(format!(
                "conv2d expects x [H,W,Cin], w [k,k,Cin,Cout]; got {xs:?}, {ws:?}"
            )));
        }
        let (h, wid, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ws[0], ws[3]);
        if ws[1] != k {
            return Err(MirError::Shape("conv2d kernel must be square".into()));
        }
        if k % 2 == 0 || padding != (k - 1) / 2 {
            return Err(MirError::Shape(format!(
                "conv2d requires odd k with padding (k-1)/2, got k={k} padding={padding}"
            )));
        }
        if ws[2] != cin {
            return Err(MirError::Shape(format!(
                "conv2d input channels {cin} != weight Cin {}",
                ws[2]
            )));
        }
        if b.numel() != cout {
            return Err(MirError::Shape(format!(
                "conv2d bias length {} != Cout {cout}",
                b.numel()
            )));
        }
        let mut y = vec![0.0; h * wid * cout];
        kernels::conv2d_forward(
            &x.data(),
            h,
            wid,
            cin,
            &w.data(),
            k,
            cout,
            &b.data(),
            padding,
            &mut y,
        );
        let y = Tensor::from_vec(&[h, wid, cout], y);
        self.push(Op::Conv2d {
            x: x.clone(),
            w: w.clone(),
            b: b.clone(),
            y: y.clone(),
            pad: padding,
        });
        Ok(y)
    }

    /// Per-channel same-padded convolution: x [H,W,C] * w [k,k,C] + b.
    pub fn depthwise_conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(MirError::Shape(format!(
                "depthwise_conv2d expects x [H,W,C], w [k,k,C]; got {xs:?}, {ws:?}"
            )));
        }
        let (h, wid, c) = (xs[0], xs[1], xs[2]);
        let k = ws[0];
        if ws[1] != k || k.is_multiple_of(2) {
            return Err(MirError::Shape(
                "depthwise kernel must be square with odd size".into(),
            ));
        }
        if ws[2] != c || b.numel() != c {
            return Err(MirError::Shape(format!(
                "depthwise channel mismatch: x C={c}, w C={}, b C={}",
                ws[2],
                b.numel()
            )));
        }
        let mut y = vec![0.0; h * wid * c];
        kernels::depthwise_conv2d_forward(&x.data(), h, wid, c, &w.data(), k, &b.data(), &mut y);
        let y = Tensor::from_vec(&[h, wid, c], y);
        self.push(Op::DepthwiseConv2d {
            x: x.clone(),
            w: w.clone(),
            b: b.clone(),
            y: y.clone(),
        });
        Ok(y)
    }

    /// Normalization over the trailing channel axis, per leading position.
    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let xs = x.shape();
        if xs.is_empty() {
            return Err(MirError::Shape("layer_norm on scalar".into()));
        }
        let c = xs[xs.len() - 1];
        if gamma.numel() != c || beta.numel() != c {
            return Err(MirError::Shape(format!(
                "layer_norm affine length mismatch: C={c}, gamma={}, beta={}",
                gamma.numel(),
                beta.numel()
            )));
        }
        if eps <= 0.0 {
            return Err(MirError::Shape("layer_norm eps must be positive".into()));
        }
        let rows = x.numel() / c;
        let mut y = vec![0.0; x.numel()];
        let mut cache = Vec::new();
        kernels::layer_norm_forward(
            &x.data(),
            rows,
            c,
            &gamma.data(),
            &beta.data(),
            eps,
            &mut y,
            &mut cache,
        );
        let y = Tensor::from_vec(xs, y);
        self.push(Op::LayerNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            y: y.clone(),
            cache,
        });
        Ok(y)
    }

    fn unary(&mut self, kind: UnaryKind, x: &Tensor) -> Tensor {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Silu => kernels::silu,
            UnaryKind::Sigmoid => kernels::sigmoid,
            UnaryKind::Relu => |v| v.max(0.0),
            UnaryKind::Softplus => kernels::softplus,
            UnaryKind::Gelu => kernels::gelu,
            UnaryKind::NegExp => |v| -v.exp(),
        };
        let y: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        let y = Tensor::from_vec(x.shape(), y);
        self.push(Op::Unary {
            kind,
            x: x.clone(),
            y: y.clone(),
        });
        y
    }

    pub fn silu(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn softplus(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn gelu(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn neg_exp(&mut self, x: &Tensor) -> Tensor {
        self.unary(UnaryKind::NegExp, x)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(MirError::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let y: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, z)| x + z).collect();
        let y = Tensor::from_vec(a.shape(), y);
        self.push(Op::Add {
            a: a.clone(),
            b: b.clone(),
            y: y.clone(),
        });
        Ok(y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(MirError::Shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let y: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, z)| x * z).collect();
        let y = Tensor::from_vec(a.shape(), y);
        self.push(Op::Mul {
            a: a.clone(),
            b: b.clone(),
            y: y.clone(),
        });
        Ok(y)
    }

    pub fn scale(&mut self, x: &Tensor, k: f64) -> Tensor {
        let y: Vec<f64> = x.data().iter().map(|&v| v * k).collect();
        let y = Tensor::from_vec(x.shape(), y);
        self.push(Op::Scale {
            x: x.clone(),
            k,
            y: y.clone(),
        });
        y
    }

    /// y[..., c] = x[..., c] * s[c]; backward flows to both operands.
    pub fn scale_channels(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let c = *xs.last().ok_or_else(|| MirError::Shape("scale_channels on scalar".into()))?;
        if s.numel() != c {
            return Err(MirError::Shape(format!(
                "scale vector length {} != channels {c}",
                s.numel()
            )));
        }
        let sd = s.data();
        let y: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[i % c])
            .collect();
        drop(sd);
        let y = Tensor::from_vec(xs, y);
        self.push(Op::ScaleChannels {
            x: x.clone(),
            s: s.clone(),
            y: y.clone(),
        });
        Ok(y)
    }

    /// Row gather over the leading axis of a [rows, C] view: y[i] = x[idx[i]].
    pub fn gather_rows(&mut self, x: &Tensor, idx: &Rc<Vec<usize>>) -> Result<Tensor> {
        let xs = x.shape();
        let c = *xs.last().ok_or_else(|| MirError::Shape("gather on scalar".into()))?;
        let rows = x.numel() / c;
        if idx.iter().any(|&i| i >= rows) {
            return Err(MirError::Shape("gather index out of range".into()));
        }
        let xd = x.data();
        let mut y = vec![0.0; idx.len() * c];
        for (i, &src) in idx.iter().enumerate() {
            y[i * c..(i + 1) * c].copy_from_slice(&xd[src * c..(src + 1) * c]);
        }
        drop(xd);
        let y = Tensor::from_vec(&[idx.len(), c], y);
        self.push(Op::GatherRows {
            x: x.clone(),
            idx: Rc::clone(idx),
            y: y.clone(),
        });
        Ok(y)
    }

    /// Input-dependent state-space recurrence over one flattened direction.
    /// x, dt: [L,C]; b, cp: [L,N]; a: [C,N] negative; d: [C].
    pub fn selective_scan(
        &mut self,
        x: &Tensor,
        dt: &Tensor,
        b: &Tensor,
        cp: &Tensor,
        a: &Tensor,
        d: &Tensor,
    ) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 2 {
            return Err(MirError::Shape("selective_scan input must be [L,C]".into()));
        }
        let (l, c) = (xs[0], xs[1]);
        let n = a.shape().last().copied().unwrap_or(0);
        if dt.shape() != xs {
            return Err(MirError::Shape(format!(
                "dt shape {:?} != x shape {xs:?}",
                dt.shape()
            )));
        }
        if b.shape() != [l, n] || cp.shape() != [l, n] {
            return Err(MirError::Shape(format!(
                "b/cp must be [L,N]=[{l},{n}]; got {:?} and {:?}",
                b.shape(),
                cp.shape()
            )));
        }
        if a.shape() != [c, n] || d.numel() != c {
            return Err(MirError::Shape(format!(
                "a must be [C,N]=[{c},{n}], d length {c}; got {:?} and {}",
                a.shape(),
                d.numel()
            )));
        }
        let mut y = vec![0.0; l * c];
        let mut h_cache = Vec::new();
        let mut abar_cache = Vec::new();
        kernels::selective_scan_forward(
            &x.data(),
            &dt.data(),
            &b.data(),
            &cp.data(),
            &a.data(),
            &d.data(),
            l,
            c,
            n,
            &mut y,
            if self.recording {
                Some((&mut h_cache, &mut abar_cache))
            } else {
                None
            },
        );
        let y = Tensor::from_vec(&[l, c], y);
        self.push(Op::SelectiveScan {
            x: x.clone(),
            dt: dt.clone(),
            b: b.clone(),
            cp: cp.clone(),
            a: a.clone(),
            d: d.clone(),
            y: y.clone(),
            h_cache,
            abar_cache,
            n,
        });
        Ok(y)
    }

    /// Mean over all leading positions: [H,W,C] (or [L,C]) -> [C].
    pub fn global_avg_pool(&mut self, x: &Tensor) -> Result<Tensor> {
        let xs = x.shape();
        let c = *xs.last().ok_or_else(|| MirError::Shape("pool on scalar".into()))?;
        let rows = x.numel() / c;
        let xd = x.data();
        let mut y = vec![0.0; c];
        for r in 0..rows {
            for ch in 0..c {
                y[ch] += xd[r * c + ch];
            }
        }
        for v in y.iter_mut() {
            *v /= rows as f64;
        }
        drop(xd);
        let y = Tensor::from_vec(&[c], y);
        self.push(Op::GlobalAvgPool {
            x: x.clone(),
            y: y.clone(),
        });
        Ok(y)
    }

    /// Channel vector at one spatial position of [H,W,C].
    pub fn select_pixel(&mut self, x: &Tensor, row: usize, col: usize) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(MirError::Shape("select_pixel expects [H,W,C]".into()));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        if row >= h || col >= w {
            return Err(MirError::Shape(format!(
                "pixel ({row},{col}) outside {h}x{w}"
            )));
        }
        let xd = x.data();
        let off = (row * w + col) * c;
        let y = Tensor::from_vec(&[c], xd[off..off + c].to_vec());
        drop(xd);
        self.push(Op::SelectPixel {
            x: x.clone(),
            row,
            col,
            y: y.clone(),
        });
        Ok(y)
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let total: f64 = x.data().iter().sum();
        let y = Tensor::scalar(total);
        self.push(Op::SumAll {
            x: x.clone(),
            y: y.clone(),
        });
        y
    }

    /// Depth-to-space rearrangement: [H,W,r^2*C] -> [rH,rW,C].
    pub fn pixel_shuffle(&mut self, x: &Tensor, r: usize) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(MirError::Shape("pixel_shuffle expects [H,W,C]".into()));
        }
        let (h, w, c_in) = (xs[0], xs[1], xs[2]);
        if r == 0 || !c_in.is_multiple_of(r * r) {
            return Err(MirError::Shape(format!(
                "pixel_shuffle channels {c_in} not divisible by r^2={}",
                r * r
            )));
        }
        let c_out = c_in / (r * r);
        let mut y = vec![0.0; h * w * c_in];
        kernels::pixel_shuffle_forward(&x.data(), h, w, c_out, r, &mut y);
        let y = Tensor::from_vec(&[h * r, w * r, c_out], y);
        self.push(Op::PixelShuffle {
            x: x.clone(),
            y: y.clone(),
            r,
        });
        Ok(y)
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        if pred.shape() != target.shape() {
            return Err(MirError::Shape(format!(
                "l1_loss shape mismatch: {:?} vs {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        let n = pred.numel() as f64;
        let total: f64 = pred
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(p, t)| (p - t).abs())
            .sum();
        let y = Tensor::scalar(total / n);
        self.push(Op::L1Loss {
            pred: pred.clone(),
            target: target.clone(),
            y: y.clone(),
        });
        Ok(y)
    }

    /// Mean of sqrt((pred-target)^2 + eps^2): smooth L1 surrogate.
    pub fn charbonnier_loss(&mut self, pred: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
        if pred.shape() != target.shape() {
            return Err(MirError::Shape(format!(
                "charbonnier shape mismatch: {:?} vs {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(MirError::Shape("charbonnier eps must be positive".into()));
        }
        let n = pred.numel() as f64;
        let total: f64 = pred
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(p, t)| ((p - t) * (p - t) + eps * eps).sqrt())
            .sum();
        let y = Tensor::scalar(total / n);
        self.push(Op::CharbonnierLoss {
            pred: pred.clone(),
            target: target.clone(),
            eps,
            y: y.clone(),
        });
        Ok(y)
    }

    /// Half-pixel-centered bilinear upsampling by an integer factor.
    pub fn bilinear_upsample(&mut self, x: &Tensor, scale: usize) -> Result<Tensor> {
        let xs = x.shape();
        if xs.len() != 3 {
            return Err(MirError::Shape("bilinear_upsample expects [H,W,C]".into()));
        }
        if scale == 0 {
            return Err(MirError::Shape("scale must be positive".into()));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let mut y = vec![0.0; h * scale * w * scale * c];
        kernels::bilinear_upsample_forward(&x.data(), h, w, c, scale, &mut y);
        let y = Tensor::from_vec(&[h * scale, w * scale, c], y);
        self.push(Op::BilinearUp {
            x: x.clone(),
            y: y.clone(),
            scale,
        });
        Ok(y)
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(MirError::Shape(format!(
                "cannot reshape {:?} ({} values) to {shape:?}",
                x.shape(),
                x.numel()
            )));
        }
        let y = Tensor::from_vec(shape, x.to_vec());
        self.push(Op::Reshape {
            x: x.clone(),
            y: y.clone(),
        });
        Ok(y)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar produced on this tape. Gradients
    /// accumulate into every grad-enabled tensor; repeated calls keep
    /// accumulating until `zero_grad`.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(MirError::Autodiff(format!(
                "backward requires a scalar, got shape {:?}",
                loss.shape()
            )));
        }
        if !self.recording {
            return Err(MirError::Autodiff(
                "backward on an inference (non-recording) tape".into(),
            ));
        }
        let produced = self.ops.iter().any(|op| op_output(op).id() == loss.id());
        if !produced {
            return Err(MirError::Autodiff(
                "backward target was not produced on this tape".into(),
            ));
        }

        let mut gm = GradMap {
            grads: HashMap::new(),
        };
        gm.grads.insert(loss.id(), vec![1.0]);

        // Reverse sweep. Gradients for a node's output are complete by the
        // time its op is visited because consumers appear later in `ops`.
        for i in (0..self.ops.len()).rev() {
            backward_op(&self.ops[i], &mut gm);
        }

        // Export to grad-enabled leaves (and any grad-enabled intermediate).
        let mut exported: HashMap<usize, ()> = HashMap::new();
        for op in &self.ops {
            for t in op_inputs(op) {
                if t.grad_enabled() && exported.insert(t.id(), ()).is_none() {
                    match gm.grads.get(&t.id()) {
                        Some(g) => t.accumulate_grad(g),
                        None => t.accumulate_grad(&vec![0.0; t.numel()]),
                    }
                }
            }
        }
        Ok(())
    }
}

fn op_output(op: &Op) -> &Tensor {
    match op {
        Op::Linear { y, .. }
        | Op::Conv2d { y, .. }
        | Op::DepthwiseConv2d { y, .. }
        | Op::LayerNorm { y, .. }
        | Op::Unary { y, .. }
        | Op::Add { y, .. }
        | Op::Mul { y, .. }
        | Op::Scale { y, .. }
        | Op::ScaleChannels { y, .. }
        | Op::GatherRows { y, .. }
        | Op::SelectiveScan { y, .. }
        | Op::GlobalAvgPool { y, .. }
        | Op::SelectPixel { y, .. }
        | Op::SumAll { y, .. }
        | Op::PixelShuffle { y, .. }
        | Op::L1Loss { y, .. }
        | Op::CharbonnierLoss { y, .. }
        | Op::Reshape { y, .. }
        | Op::BilinearUp { y, .. } => y,
    }
}

fn op_inputs(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Linear { x, w, b, .. } => {
            let mut v = vec![x, w];
            if let Some(b) = b {
                v.push(b);
            }
            v
        }
        Op::Conv2d { x, w, b, .. } => vec![x, w, b],
        Op::DepthwiseConv2d { x, w, b, .. } => vec![x, w, b],
        Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::Unary { x, .. } => vec![x],
        Op::Add { a, b, .. } => vec![a, b],
        Op::Mul { a, b, .. } => vec![a, b],
        Op::Scale { x, .. } => vec![x],
        Op::ScaleChannels { x, s, .. } => vec![x, s],
        Op::GatherRows { x, .. } => vec![x],
        Op::SelectiveScan {
            x, dt, b, cp, a, d, ..
        } => vec![x, dt, b, cp, a, d],
        Op::GlobalAvgPool { x, .. } => vec![x],
        Op::SelectPixel { x, .. } => vec![x],
        Op::SumAll { x, .. } => vec![x],
        Op::PixelShuffle { x, .. } => vec![x],
        Op::L1Loss { pred, target, .. } => vec![pred, target],
        Op::CharbonnierLoss { pred, target, .. } => vec![pred, target],
        Op::Reshape { x, .. } => vec![x],
        Op::BilinearUp { x, .. } => vec![x],
    }
}

fn backward_op(op: &Op, gm: &mut GradMap) {
    let dy = match gm.take(op_output(op)) {
        Some(g) => g,
        None => return, // no gradient flowed to this node
    };
    match op {
        Op::Linear { x, w, b, .. } => {
            let ws = w.shape();
            let (in_dim, out_dim) = (ws[0], ws[1]);
            let rows = x.numel() / in_dim;
            let mut dx = vec![0.0; x.numel()];
            let mut dw = vec![0.0; w.numel()];
            let mut db = b.as_ref().map(|t| vec![0.0; t.numel()]);
            kernels::linear_backward(
                &x.data(),
                rows,
                in_dim,
                &w.data(),
                out_dim,
                &dy,
                &mut dx,
                &mut dw,
                db.as_deref_mut(),
            );
            gm.add(x, dx);
            gm.add(w, dw);
            if let (Some(b), Some(db)) = (b, db) {
                gm.add(b, db);
            }
        }
        Op::Conv2d { x, w, b, pad, .. } => {
            let xs = x.shape();
            let ws = w.shape();
            let mut dx = vec![0.0; x.numel()];
            let mut dw = vec![0.0; w.numel()];
            let mut db = vec![0.0; b.numel()];
            kernels::conv2d_backward(
                &x.data(),
                xs[0],
                xs[1],
                xs[2],
                &w.data(),
                ws[0],
                ws[3],
                *pad,
                &dy,
                &mut dx,
                &mut dw,
                &mut db,
            );
            gm.add(x, dx);
            gm.add(w, dw);
            gm.add(b, db);
        }
        Op::DepthwiseConv2d { x, w, b, .. } => {
            let xs = x.shape();
            let mut dx = vec![0.0; x.numel()];
            let mut dw = vec![0.0; w.numel()];
            let mut db = vec![0.0; b.numel()];
            kernels::depthwise_conv2d_backward(
                &x.data(),
                xs[0],
                xs[1],
                xs[2],
                &w.data(),
                w.shape()[0],
                &dy,
                &mut dx,
                &mut dw,
                &mut db,
            );
            gm.add(x, dx);
            gm.add(w, dw);
            gm.add(b, db);
        }
        Op::LayerNorm {
            x, gamma, beta, cache, ..
        } => {
            let c = *x.shape().last().unwrap();
            let rows = x.numel() / c;
            let mut dx = vec![0.0; x.numel()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            kernels::layer_norm_backward(
                &x.data(),
                rows,
                c,
                &gamma.data(),
                cache,
                &dy,
                &mut dx,
                &mut dgamma,
                &mut dbeta,
            );
            gm.add(x, dx);
            gm.add(gamma, dgamma);
            gm.add(beta, dbeta);
        }
        Op::Unary { kind, x, y } => {
            let xd = x.data();
            let dx: Vec<f64> = match kind {
                UnaryKind::Silu => xd
                    .iter()
                    .zip(&dy)
                    .map(|(&v, g)| g * kernels::silu_grad(v))
                    .collect(),
                UnaryKind::Sigmoid => xd
                    .iter()
                    .zip(&dy)
                    .map(|(&v, g)| g * kernels::sigmoid_grad(v))
                    .collect(),
                UnaryKind::Relu => xd
                    .iter()
                    .zip(&dy)
                    .map(|(&v, g)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
                UnaryKind::Softplus => xd
                    .iter()
                    .zip(&dy)
                    .map(|(&v, g)| g * kernels::sigmoid(v))
                    .collect(),
                UnaryKind::Gelu => xd
                    .iter()
                    .zip(&dy)
                    .map(|(&v, g)| g * kernels::gelu_grad(v))
                    .collect(),
                // y = -exp(x) so dy/dx = y
                UnaryKind::NegExp => y.data().iter().zip(&dy).map(|(&yv, g)| g * yv).collect(),
            };
            drop(xd);
            gm.add(x, dx);
        }
        Op::Add { a, b, .. } => {
            gm.add_slice(a, &dy);
            gm.add(b, dy);
        }
        Op::Mul { a, b, .. } => {
            let da: Vec<f64> = dy.iter().zip(b.data().iter()).map(|(g, v)| g * v).collect();
            let db: Vec<f64> = dy.iter().zip(a.data().iter()).map(|(g, v)| g * v).collect();
            gm.add(a, da);
            gm.add(b, db);
        }
        Op::Scale { x, k, .. } => {
            let dx: Vec<f64> = dy.iter().map(|g| g * k).collect();
            gm.add(x, dx);
        }
        Op::ScaleChannels { x, s, .. } => {
            let c = s.numel();
            let sd = s.data();
            let xd = x.data();
            let mut dx = vec![0.0; x.numel()];
            let mut ds = vec![0.0; c];
            for (i, g) in dy.iter().enumerate() {
                let ch = i % c;
                dx[i] = g * sd[ch];
                ds[ch] += g * xd[i];
            }
            drop(sd);
            drop(xd);
            gm.add(x, dx);
            gm.add(s, ds);
        }
        Op::GatherRows { x, idx, .. } => {
            let c = *x.shape().last().unwrap();
            let mut dx = vec![0.0; x.numel()];
            for (i, &src) in idx.iter().enumerate() {
                for ch in 0..c {
                    dx[src * c + ch] += dy[i * c + ch];
                }
            }
            gm.add(x, dx);
        }
        Op::SelectiveScan {
            x,
            dt,
            b,
            cp,
            a,
            d,
            h_cache,
            abar_cache,
            n,
            ..
        } => {
            let xs = x.shape();
            let (l, c) = (xs[0], xs[1]);
            let mut dx = vec![0.0; x.numel()];
            let mut ddt = vec![0.0; dt.numel()];
            let mut db = vec![0.0; b.numel()];
            let mut dcp = vec![0.0; cp.numel()];
            let mut da = vec![0.0; a.numel()];
            let mut dd = vec![0.0; d.numel()];
            kernels::selective_scan_backward(
                &x.data(),
                &dt.data(),
                &b.data(),
                &cp.data(),
                &a.data(),
                &d.data(),
                l,
                c,
                *n,
                h_cache,
                abar_cache,
                &dy,
                &mut dx,
                &mut ddt,
                &mut db,
                &mut dcp,
                &mut da,
                &mut dd,
            );
            gm.add(x, dx);
            gm.add(dt, ddt);
            gm.add(b, db);
            gm.add(cp, dcp);
            gm.add(a, da);
            gm.add(d, dd);
        }
        Op::GlobalAvgPool { x, .. } => {
            let c = *x.shape().last().unwrap();
            let rows = x.numel() / c;
            let scale = 1.0 / rows as f64;
            let mut dx = vec![0.0; x.numel()];
            for r in 0..rows {
                for ch in 0..c {
                    dx[r * c + ch] = dy[ch] * scale;
                }
            }
            gm.add(x, dx);
        }
        Op::SelectPixel { x, row, col, .. } => {
            let xs = x.shape();
            let (w, c) = (xs[1], xs[2]);
            let mut dx = vec![0.0; x.numel()];
            let off = (row * w + col) * c;
            dx[off..off + c].copy_from_slice(&dy);
            gm.add(x, dx);
        }
        Op::SumAll { x, .. } => {
            let g = dy[0];
            gm.add(x, vec![g; x.numel()]);
        }
        Op::PixelShuffle { x, r, .. } => {
            let xs = x.shape();
            let c_out = xs[2] / (r * r);
            let mut dx = vec![0.0; x.numel()];
            kernels::pixel_shuffle_backward(&dy, xs[0], xs[1], c_out, *r, &mut dx);
            gm.add(x, dx);
        }
        Op::L1Loss { pred, target, .. } => {
            let g = dy[0] / pred.numel() as f64;
            let pd = pred.data();
            let td = target.data();
            let dp: Vec<f64> = pd
                .iter()
                .zip(td.iter())
                .map(|(p, t)| {
                    let diff = p - t;
                    // subgradient 0 at ties
                    if diff > 0.0 {
                        g
                    } else if diff < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
            drop(pd);
            drop(td);
            gm.add(pred, dp);
            gm.add(target, dt);
        }
        Op::CharbonnierLoss {
            pred, target, eps, ..
        } => {
            let g = dy[0] / pred.numel() as f64;
            let pd = pred.data();
            let td = target.data();
            let dp: Vec<f64> = pd
                .iter()
                .zip(td.iter())
                .map(|(p, t)| {
                    let diff = p - t;
                    g * diff / (diff * diff + eps * eps).sqrt()
                })
                .collect();
            let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
            drop(pd);
            drop(td);
            gm.add(pred, dp);
            gm.add(target, dt);
        }
        Op::Reshape { x, .. } => {
            gm.add(x, dy);
        }
        Op::BilinearUp { x, scale, .. } => {
            let xs = x.shape();
            let mut dx = vec![0.0; x.numel()];
            kernels::bilinear_upsample_backward(&dy, xs[0], xs[1], xs[2], *scale, &mut dx);
            gm.add(x, dx);
        }
    }
}
