//! Forward and adjoint kernels on flat row-major buffers.
//!
//! Everything here is a pure function; the tape layer owns shape checking
//! and buffer lifetimes. Inner loops are written so the innermost axis is
//! contiguous (channels-last layout throughout the crate).

/// y[r,o] = sum_i x[r,i] w[i,o] + b[o]
pub fn linear_forward(
    x: &[f64],
    rows: usize,
    in_dim: usize,
    w: &[f64],
    out_dim: usize,
    b: Option<&[f64]>,
    y: &mut [f64],
) {
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        match b {
            Some(bias) => yr.copy_from_slice(bias),
            None => yr.fill(0.0),
        }
        for (i, &xv) in xr.iter().enumerate() {
            let wr = &w[i * out_dim..(i + 1) * out_dim];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    in_dim: usize,
    w: &[f64],
    out_dim: usize,
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    for r in 0..rows {
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for i in 0..in_dim {
            let wr = &w[i * out_dim..(i + 1) * out_dim];
            let mut acc = 0.0;
            for (dyv, wv) in dyr.iter().zip(wr) {
                acc += dyv * wv;
            }
            dxr[i] += acc;
            let dwr = &mut dw[i * out_dim..(i + 1) * out_dim];
            let xv = xr[i];
            for (dwv, dyv) in dwr.iter_mut().zip(dyr) {
                *dwv += xv * dyv;
            }
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            let dyr = &dy[r * out_dim..(r + 1) * out_dim];
            for (dbv, dyv) in db.iter_mut().zip(dyr) {
                *dbv += dyv;
            }
        }
    }
}

/// Cross-correlation with zero padding, channels-last.
/// x: [H,W,Cin], w: [k,k,Cin,Cout], y: [H,W,Cout].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    h: usize,
    wid: usize,
    cin: usize,
    w: &[f64],
    k: usize,
    cout: usize,
    b: &[f64],
    pad: usize,
    y: &mut [f64],
) {
    for row in 0..h {
        for col in 0..wid {
            let yo = (row * wid + col) * cout;
            y[yo..yo + cout].copy_from_slice(b);
            for kr in 0..k {
                let ir = row as isize + kr as isize - pad as isize;
                if ir < 0 || ir >= h as isize {
                    continue;
                }
                for kc in 0..k {
                    let ic = col as isize + kc as isize - pad as isize;
                    if ic < 0 || ic >= wid as isize {
                        continue;
                    }
                    let xo = (ir as usize * wid + ic as usize) * cin;
                    let wo = (kr * k + kc) * cin * cout;
                    for i in 0..cin {
                        let xv = x[xo + i];
                        if xv == 0.0 {
                            continue;
                        }
                        let wr = &w[wo + i * cout..wo + (i + 1) * cout];
                        let yr = &mut y[yo..yo + cout];
                        for (yv, &wv) in yr.iter_mut().zip(wr) {
                            *yv += xv * wv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    h: usize,
    wid: usize,
    cin: usize,
    w: &[f64],
    k: usize,
    cout: usize,
    pad: usize,
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    for row in 0..h {
        for col in 0..wid {
            let dyo = (row * wid + col) * cout;
            let dyr = &dy[dyo..dyo + cout];
            for (dbv, dyv) in db.iter_mut().zip(dyr) {
                *dbv += dyv;
            }
            for kr in 0..k {
                let ir = row as isize + kr as isize - pad as isize;
                if ir < 0 || ir >= h as isize {
                    continue;
                }
                for kc in 0..k {
                    let ic = col as isize + kc as isize - pad as isize;
                    if ic < 0 || ic >= wid as isize {
                        continue;
                    }
                    let xo = (ir as usize * wid + ic as usize) * cin;
                    let wo = (kr * k + kc) * cin * cout;
                    for i in 0..cin {
                        let wr = &w[wo + i * cout..wo + (i + 1) * cout];
                        let mut acc = 0.0;
                        for (dyv, wv) in dyr.iter().zip(wr) {
                            acc += dyv * wv;
                        }
                        dx[xo + i] += acc;
                        let xv = x[xo + i];
                        let dwr = &mut dw[wo + i * cout..wo + (i + 1) * cout];
                        for (dwv, dyv) in dwr.iter_mut().zip(dyr) {
                            *dwv += xv * dyv;
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel spatial convolution, no cross-channel mixing.
/// x: [H,W,C], w: [k,k,C], y: [H,W,C].
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d_forward(
    x: &[f64],
    h: usize,
    wid: usize,
    c: usize,
    w: &[f64],
    k: usize,
    b: &[f64],
    y: &mut [f64],
) {
    let pad = (k - 1) / 2;
    for row in 0..h {
        for col in 0..wid {
            let yo = (row * wid + col) * c;
            y[yo..yo + c].copy_from_slice(b);
            for kr in 0..k {
                let ir = row as isize + kr as isize - pad as isize;
                if ir < 0 || ir >= h as isize {
                    continue;
                }
                for kc in 0..k {
                    let ic = col as isize + kc as isize - pad as isize;
                    if ic < 0 || ic >= wid as isize {
                        continue;
                    }
                    let xo = (ir as usize * wid + ic as usize) * c;
                    let wo = (kr * k + kc) * c;
                    let yr = &mut y[yo..yo + c];
                    let xr = &x[xo..xo + c];
                    let wr = &w[wo..wo + c];
                    for ch in 0..c {
                        yr[ch] += xr[ch] * wr[ch];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d_backward(
    x: &[f64],
    h: usize,
    wid: usize,
    c: usize,
    w: &[f64],
    k: usize,
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let pad = (k - 1) / 2;
    for row in 0..h {
        for col in 0..wid {
            let dyo = (row * wid + col) * c;
            let dyr = &dy[dyo..dyo + c];
            for (dbv, dyv) in db.iter_mut().zip(dyr) {
                *dbv += dyv;
            }
            for kr in 0..k {
                let ir = row as isize + kr as isize - pad as isize;
                if ir < 0 || ir >= h as isize {
                    continue;
                }
                for kc in 0..k {
                    let ic = col as isize + kc as isize - pad as isize;
                    if ic < 0 || ic >= wid as isize {
                        continue;
                    }
                    let xo = (ir as usize * wid + ic as usize) * c;
                    let wo = (kr * k + kc) * c;
                    for ch in 0..c {
                        dx[xo + ch] += dyr[ch] * w[wo + ch];
                        dw[wo + ch] += dyr[ch] * x[xo + ch];
                    }
                }
            }
        }
    }
}

/// Per-row normalization over the trailing channel axis.
/// Caches (mean, rstd) per row for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_forward(
    x: &[f64],
    rows: usize,
    c: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    y: &mut [f64],
    cache: &mut Vec<f64>,
) {
    cache.clear();
    cache.reserve(rows * 2);
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let yr = &mut y[r * c..(r + 1) * c];
        for ch in 0..c {
            yr[ch] = (xr[ch] - mean) * rstd * gamma[ch] + beta[ch];
        }
        cache.push(mean);
        cache.push(rstd);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    x: &[f64],
    rows: usize,
    c: usize,
    gamma: &[f64],
    cache: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let cf = c as f64;
    for r in 0..rows {
        let mean = cache[r * 2];
        let rstd = cache[r * 2 + 1];
        let xr = &x[r * c..(r + 1) * c];
        let dyr = &dy[r * c..(r + 1) * c];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ch in 0..c {
            let xhat = (xr[ch] - mean) * rstd;
            let dxhat = dyr[ch] * gamma[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[ch] += dyr[ch] * xhat;
            dbeta[ch] += dyr[ch];
        }
        let dxr = &mut dx[r * c..(r + 1) * c];
        for ch in 0..c {
            let xhat = (xr[ch] - mean) * rstd;
            let dxhat = dyr[ch] * gamma[ch];
            dxr[ch] += rstd * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe ln(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

const GELU_K: f64 = 0.7978845608028654; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Selective scan over one flattened direction.
///
/// Shapes: x, dt: [L,C]; b, cp: [L,N]; a: [C,N] (entries < 0); d: [C];
/// y: [L,C]. Recurrence per channel and state:
///   h[t] = exp(dt[t,c] * a[c,n]) * h[t-1] + dt[t,c] * b[t,n] * x[t,c]
///   y[t,c] = sum_n cp[t,n] * h[t,c,n] + d[c] * x[t,c]
///
/// When `caches` is provided it receives (h, abar), both [L,C,N], for the
/// adjoint pass; otherwise only a rolling state is kept.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_forward(
    x: &[f64],
    dt: &[f64],
    b: &[f64],
    cp: &[f64],
    a: &[f64],
    d: &[f64],
    l: usize,
    c: usize,
    n: usize,
    y: &mut [f64],
    caches: Option<(&mut Vec<f64>, &mut Vec<f64>)>,
) {
    match caches {
        Some((h_cache, abar_cache)) => {
            h_cache.clear();
            h_cache.resize(l * c * n, 0.0);
            abar_cache.clear();
            abar_cache.resize(l * c * n, 0.0);
            for t in 0..l {
                let bt = &b[t * n..(t + 1) * n];
                let ct = &cp[t * n..(t + 1) * n];
                for ch in 0..c {
                    let dtv = dt[t * c + ch];
                    let xv = x[t * c + ch];
                    let dtx = dtv * xv;
                    let ar = &a[ch * n..(ch + 1) * n];
                    let off = (t * c + ch) * n;
                    let mut acc = 0.0;
                    if t == 0 {
                        for s in 0..n {
                            let ab = (dtv * ar[s]).exp();
                            let hv = dtx * bt[s];
                            h_cache[off + s] = hv;
                            abar_cache[off + s] = ab;
                            acc += ct[s] * hv;
                        }
                    } else {
                        let prev = ((t - 1) * c + ch) * n;
                        for s in 0..n {
                            let ab = (dtv * ar[s]).exp();
                            let hv = ab * h_cache[prev + s] + dtx * bt[s];
                            h_cache[off + s] = hv;
                            abar_cache[off + s] = ab;
                            acc += ct[s] * hv;
                        }
                    }
                    y[t * c + ch] = acc + d[ch] * xv;
                }
            }
        }
        None => {
            let mut h = vec![0.0; c * n];
            for t in 0..l {
                let bt = &b[t * n..(t + 1) * n];
                let ct = &cp[t * n..(t + 1) * n];
                for ch in 0..c {
                    let dtv = dt[t * c + ch];
                    let xv = x[t * c + ch];
                    let dtx = dtv * xv;
                    let ar = &a[ch * n..(ch + 1) * n];
                    let hr = &mut h[ch * n..(ch + 1) * n];
                    let mut acc = 0.0;
                    for s in 0..n {
                        let ab = (dtv * ar[s]).exp();
                        let hv = ab * hr[s] + dtx * bt[s];
                        hr[s] = hv;
                        acc += ct[s] * hv;
                    }
                    y[t * c + ch] = acc + d[ch] * xv;
                }
            }
        }
    }
}

/// Adjoint of [`selective_scan_forward`] using its cached (h, abar).
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_backward(
    x: &[f64],
    dt: &[f64],
    b: &[f64],
    cp: &[f64],
    a: &[f64],
    d: &[f64],
    l: usize,
    c: usize,
    n: usize,
    h_cache: &[f64],
    abar_cache: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    ddt: &mut [f64],
    db: &mut [f64],
    dcp: &mut [f64],
    da: &mut [f64],
    dd: &mut [f64],
) {
    let mut lambda = vec![0.0; c * n];
    for t in (0..l).rev() {
        let bt = &b[t * n..(t + 1) * n];
        let ct = &cp[t * n..(t + 1) * n];
        for ch in 0..c {
            let dyv = dy[t * c + ch];
            let xv = x[t * c + ch];
            let dtv = dt[t * c + ch];
            dd[ch] += dyv * xv;
            let mut dxv = dyv * d[ch];
            let mut ddtv = 0.0;
            let off = (t * c + ch) * n;
            let ar = &a[ch * n..(ch + 1) * n];
            let lam_r = &mut lambda[ch * n..(ch + 1) * n];
            for s in 0..n {
                let hv = h_cache[off + s];
                dcp[t * n + s] += dyv * hv;
                let lam = lam_r[s] + dyv * ct[s];
                let hprev = if t == 0 {
                    0.0
                } else {
                    h_cache[((t - 1) * c + ch) * n + s]
                };
                let ab = abar_cache[off + s];
                ddtv += lam * (ar[s] * ab * hprev + bt[s] * xv);
                da[ch * n + s] += lam * dtv * ab * hprev;
                db[t * n + s] += lam * dtv * xv;
                dxv += lam * dtv * bt[s];
                lam_r[s] = lam * ab;
            }
            dx[t * c + ch] += dxv;
            ddt[t * c + ch] += ddtv;
        }
    }
}

/// Bilinear upsampling weights for one output coordinate: source index
/// pair and interpolation fraction, half-pixel centers.
#[inline]
fn bilinear_axis(dst: usize, scale: usize, src_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// x [H,W,C] -> y [sH,sW,C] with half-pixel-centered bilinear sampling.
pub fn bilinear_upsample_forward(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    scale: usize,
    y: &mut [f64],
) {
    let (oh, ow) = (h * scale, w * scale);
    for r in 0..oh {
        let (r0, r1, fr) = bilinear_axis(r, scale, h);
        for col in 0..ow {
            let (c0, c1, fc) = bilinear_axis(col, scale, w);
            let to = (r * ow + col) * c;
            for ch in 0..c {
                let v00 = x[(r0 * w + c0) * c + ch];
                let v01 = x[(r0 * w + c1) * c + ch];
                let v10 = x[(r1 * w + c0) * c + ch];
                let v11 = x[(r1 * w + c1) * c + ch];
                y[to + ch] = v00 * (1.0 - fr) * (1.0 - fc)
                    + v01 * (1.0 - fr) * fc
                    + v10 * fr * (1.0 - fc)
                    + v11 * fr * fc;
            }
        }
    }
}

/// Adjoint of bilinear upsampling: scatter each output gradient back to
/// its four source corners with the same weights.
pub fn bilinear_upsample_backward(
    dy: &[f64],
    h: usize,
    w: usize,
    c: usize,
    scale: usize,
    dx: &mut [f64],
) {
    let (oh, ow) = (h * scale, w * scale);
    for r in 0..oh {
        let (r0, r1, fr) = bilinear_axis(r, scale, h);
        for col in 0..ow {
            let (c0, c1, fc) = bilinear_axis(col, scale, w);
            let from = (r * ow + col) * c;
            for ch in 0..c {
                let g = dy[from + ch];
                dx[(r0 * w + c0) * c + ch] += g * (1.0 - fr) * (1.0 - fc);
                dx[(r0 * w + c1) * c + ch] += g * (1.0 - fr) * fc;
                dx[(r1 * w + c0) * c + ch] += g * fr * (1.0 - fc);
                dx[(r1 * w + c1) * c + ch] += g * fr * fc;
            }
        }
    }
}

/// Depth-to-space: x [H,W,r*r*C] -> y [rH,rW,C], row-major within each cell.
pub fn pixel_shuffle_forward(x: &[f64], h: usize, w: usize, c_out: usize, r: usize, y: &mut [f64]) {
    let wo = w * r;
    for row in 0..h {
        for col in 0..w {
            let xo = (row * w + col) * r * r * c_out;
            for dy in 0..r {
                for dx in 0..r {
                    let yo = ((row * r + dy) * wo + (col * r + dx)) * c_out;
                    let block = xo + (dy * r + dx) * c_out;
                    y[yo..yo + c_out].copy_from_slice(&x[block..block + c_out]);
                }
            }
        }
    }
}

pub fn pixel_shuffle_backward(
    dy: &[f64],
    h: usize,
    w: usize,
    c_out: usize,
    r: usize,
    dx: &mut [f64],
) {
    let wo = w * r;
    for row in 0..h {
        for col in 0..w {
            let xo = (row * w + col) * r * r * c_out;
            for dyr in 0..r {
                for dxc in 0..r {
                    let yo = ((row * r + dyr) * wo + (col * r + dxc)) * c_out;
                    let block = xo + (dyr * r + dxc) * c_out;
                    for ch in 0..c_out {
                        dx[block + ch] += dy[yo + ch];
                    }
                }
            }
        }
    }
}
