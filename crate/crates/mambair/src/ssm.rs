//! Continuous state-space systems and their discrete evaluation forms.
//!
//! A diagonal LTI system h' = A h + B x, y = C h + D x is discretized with
//! the zero-order hold rule and can then be evaluated three ways: as a
//! recurrence, as a causal convolution with the structured kernel
//! K = (C B., C A. B., ..., C A.^{L-1} B.), or - in the input-dependent
//! (selective) variant - as an associative parallel scan. The forms agree
//! to tight tolerances; the test suites treat that agreement as the
//! ground truth for everything built on top.
//!
//! The state matrix is diagonal throughout, stored as a length-N vector
//! and parameterized as A = -exp(a_log) so stability is structural.

use crate::error::{MirError, Result};
use crate::rng::Rng;
use crate::tensor::kernels;

/// Continuous-time diagonal LTI parameters.
#[derive(Clone, Debug)]
pub struct LtiParams {
    /// Diagonal of A, all entries strictly negative.
    pub a: Vec<f64>,
    /// Input map B, length N.
    pub b: Vec<f64>,
    /// Output map C, length N.
    pub c: Vec<f64>,
    /// Scalar feedthrough.
    pub d: f64,
}

impl LtiParams {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, d: f64) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() || a.len() != c.len() {
            return Err(MirError::Shape(format!(
                "state size mismatch: |A|={}, |B|={}, |C|={}",
                a.len(),
                b.len(),
                c.len()
            )));
        }
        if a.iter().any(|&v| v >= 0.0) {
            return Err(MirError::Numeric(
                "diagonal of A must be strictly negative".into(),
            ));
        }
        Ok(LtiParams { a, b, c, d })
    }

    /// Stable parameterization A = -exp(a_log).
    pub fn from_a_log(a_log: &[f64], b: Vec<f64>, c: Vec<f64>, d: f64) -> Result<Self> {
        LtiParams::new(a_log.iter().map(|v| -v.exp()).collect(), b, c, d)
    }

    pub fn state_size(&self) -> usize {
        self.a.len()
    }
}

/// ZOH-discretized parameters at step delta.
#[derive(Clone, Debug)]
pub struct DiscreteParams {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub delta: f64,
}

/// Structured convolution kernel K. of a discretized system.
#[derive(Clone, Debug)]
pub struct SsmKernel {
    pub k_bar: Vec<f64>,
}

/// Below this |delta * a| the exact B. expression degenerates to 0/0 and
/// is replaced by its series limit delta * B.
const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

/// Zero-order-hold discretization:
/// A. = exp(delta A), B. = (delta A)^{-1} (exp(delta A) - I) delta B,
/// elementwise on the diagonal.
pub fn discretize_zoh(params: &LtiParams, delta: f64) -> Result<DiscreteParams> {
    if delta <= 0.0 {
        return Err(MirError::Numeric(format!(
            "discretization step must be positive, got {delta}"
        )));
    }
    let n = params.state_size();
    let mut a_bar = vec![0.0; n];
    let mut b_bar = vec![0.0; n];
    for i in 0..n {
        let da = delta * params.a[i];
        let ea = da.exp();
        a_bar[i] = ea;
        b_bar[i] = if da.abs() < ZOH_SERIES_THRESHOLD {
            delta * params.b[i]
        } else {
            (ea - 1.0) / da * delta * params.b[i]
        };
    }
    Ok(DiscreteParams {
        a_bar,
        b_bar,
        delta,
    })
}

/// RNN form: h_k = A. h_{k-1} + B. x_k, y_k = C h_k + D x_k.
pub fn ssm_recurrent(
    disc: &DiscreteParams,
    c: &[f64],
    d: f64,
    x: &[f64],
    h0: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let n = disc.a_bar.len();
    if c.len() != n {
        return Err(MirError::Shape(format!(
            "output map length {} != state size {n}",
            c.len()
        )));
    }
    let mut h = match h0 {
        Some(init) => {
            if init.len() != n {
                return Err(MirError::Shape(format!(
                    "initial state length {} != state size {n}",
                    init.len()
                )));
            }
            init.to_vec()
        }
        None => vec![0.0; n],
    };
    let mut y = Vec::with_capacity(x.len());
    for &xv in x {
        let mut acc = d * xv;
        for i in 0..n {
            h[i] = disc.a_bar[i] * h[i] + disc.b_bar[i] * xv;
            acc += c[i] * h[i];
        }
        y.push(acc);
    }
    Ok(y)
}

/// The structured kernel K.[i] = C A.^i B. for i = 0..L-1.
pub fn ssm_kernel(params: &LtiParams, delta: f64, len: usize) -> Result<SsmKernel> {
    let disc = discretize_zoh(params, delta)?;
    let n = params.state_size();
    let mut power = disc.b_bar.clone(); // A.^i B., starting at i = 0
    let mut k_bar = Vec::with_capacity(len);
    for _ in 0..len {
        let mut acc = 0.0;
        for i in 0..n {
            acc += params.c[i] * power[i];
        }
        k_bar.push(acc);
        for i in 0..n {
            power[i] *= disc.a_bar[i];
        }
    }
    Ok(SsmKernel { k_bar })
}

/// CNN form: y = x (*) K. plus the feedthrough D x. The feedthrough is
/// required for equivalence with the RNN form.
pub fn ssm_convolutional(params: &LtiParams, delta: f64, x: &[f64]) -> Result<Vec<f64>> {
    let kernel = ssm_kernel(params, delta, x.len())?;
    let l = x.len();
    let mut y = vec![0.0; l];
    for k in 0..l {
        let mut acc = params.d * x[k];
        // causal convolution: taps at or before position k
        for (i, kv) in kernel.k_bar[..=k].iter().enumerate() {
            acc += kv * x[k - i];
        }
        y[k] = acc;
    }
    Ok(y)
}

// ── selective (input-dependent) variant ─────────────────────────────────

/// Learned parameter bundle for one selective scan over C channels with
/// state size N. Delta, B and C become per-token functions of the input;
/// A and D stay learned constants.
#[derive(Clone, Debug)]
pub struct SelectiveParams {
    pub c_feat: usize,
    pub n: usize,
    /// [C,N]; A = -exp(a_log).
    pub a_log: Vec<f64>,
    /// [C,C] projection for the per-channel step size.
    pub w_dt: Vec<f64>,
    /// [C] step-size bias (pre-softplus).
    pub b_dt: Vec<f64>,
    /// [C,N] projection for per-token B.
    pub w_b: Vec<f64>,
    /// [C,N] projection for per-token C.
    pub w_c: Vec<f64>,
    /// [C] feedthrough.
    pub d: Vec<f64>,
}

impl SelectiveParams {
    /// Zeroed projections; useful to express degenerate cases in tests.
    pub fn zeros(c_feat: usize, n: usize) -> Self {
        SelectiveParams {
            c_feat,
            n,
            a_log: vec![0.0; c_feat * n],
            w_dt: vec![0.0; c_feat * c_feat],
            b_dt: vec![0.0; c_feat],
            w_b: vec![0.0; c_feat * n],
            w_c: vec![0.0; c_feat * n],
            d: vec![0.0; c_feat],
        }
    }

    /// Reference initialization: a_log[c,n] = ln(n+1) spreads decay rates,
    /// projections are Xavier-uniform, the step-size bias is chosen so
    /// softplus(b_dt) is log-uniform in [1e-3, 1e-1], and D starts at 1.
    pub fn init(c_feat: usize, n: usize, rng: &mut Rng) -> Self {
        let mut p = SelectiveParams::zeros(c_feat, n);
        for c in 0..c_feat {
            for s in 0..n {
                p.a_log[c * n + s] = ((s + 1) as f64).ln();
            }
        }
        let lim_dt = (6.0 / (2.0 * c_feat as f64)).sqrt();
        for v in p.w_dt.iter_mut() {
            *v = rng.uniform_in(-lim_dt, lim_dt);
        }
        let lim_n = (6.0 / (c_feat + n) as f64).sqrt();
        for v in p.w_b.iter_mut() {
            *v = rng.uniform_in(-lim_n, lim_n);
        }
        for v in p.w_c.iter_mut() {
            *v = rng.uniform_in(-lim_n, lim_n);
        }
        for v in p.b_dt.iter_mut() {
            let dt = 10f64.powf(rng.uniform_in(-3.0, -1.0));
            *v = softplus_inverse(dt);
        }
        for v in p.d.iter_mut() {
            *v = 1.0;
        }
        p
    }

    /// A = -exp(a_log), flattened [C,N].
    pub fn a(&self) -> Vec<f64> {
        self.a_log.iter().map(|v| -v.exp()).collect()
    }
}

/// x with softplus(x) = y; stable for small y.
pub fn softplus_inverse(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Per-token selective inputs produced by [`selective_project`].
#[derive(Clone, Debug)]
pub struct TokenParams {
    pub l: usize,
    /// [L,C] positive step sizes.
    pub dt: Vec<f64>,
    /// [L,N].
    pub b: Vec<f64>,
    /// [L,N].
    pub cp: Vec<f64>,
}

/// Input-dependent parameter maps:
/// dt_t = softplus(W_dt x_t + b_dt), B_t = W_b^T x_t, C_t = W_c^T x_t.
pub fn selective_project(params: &SelectiveParams, x: &[f64], l: usize) -> TokenParams {
    let c = params.c_feat;
    let n = params.n;
    assert_eq!(x.len(), l * c, "token buffer does not match [L,C]");
    let mut dt = vec![0.0; l * c];
    kernels::linear_forward(x, l, c, &params.w_dt, c, Some(&params.b_dt), &mut dt);
    for v in dt.iter_mut() {
        *v = kernels::softplus(*v);
    }
    let mut b = vec![0.0; l * n];
    kernels::linear_forward(x, l, c, &params.w_b, n, None, &mut b);
    let mut cp = vec![0.0; l * n];
    kernels::linear_forward(x, l, c, &params.w_c, n, None, &mut cp);
    TokenParams { l, dt, b, cp }
}

/// Discretization rule for the input term of the selective recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BbarRule {
    /// B._k = dt_k B_k: the standard selective-scan choice.
    FirstOrder,
    /// B._k = (dt_k A)^{-1}(exp(dt_k A) - I) dt_k B_k: exact ZOH, used to
    /// reduce the selective scan to the LTI forms in equivalence tests.
    ExactZoh,
}

fn effective_b(rule: BbarRule, dtv: f64, a: f64, bv: f64) -> f64 {
    match rule {
        BbarRule::FirstOrder => dtv * bv,
        BbarRule::ExactZoh => {
            let da = dtv * a;
            if da.abs() < ZOH_SERIES_THRESHOLD {
                dtv * bv
            } else {
                (da.exp() - 1.0) / da * dtv * bv
            }
        }
    }
}

/// Token-by-token evaluation of the selective recurrence.
/// x: [L,C], a: [C,N] (negative), d: [C]; output [L,C].
pub fn selective_scan_sequential(
    x: &[f64],
    tp: &TokenParams,
    a: &[f64],
    d: &[f64],
    c_feat: usize,
    n: usize,
    rule: BbarRule,
) -> Result<Vec<f64>> {
    let l = tp.l;
    if x.len() != l * c_feat {
        return Err(MirError::Shape(format!(
            "input length {} != L*C = {}",
            x.len(),
            l * c_feat
        )));
    }
    if tp.dt.len() != l * c_feat || tp.b.len() != l * n || tp.cp.len() != l * n {
        return Err(MirError::Shape(
            "per-token parameter length mismatch".into(),
        ));
    }
    let mut y = vec![0.0; l * c_feat];
    let mut h = vec![0.0; c_feat * n];
    for t in 0..l {
        let bt = &tp.b[t * n..(t + 1) * n];
        let ct = &tp.cp[t * n..(t + 1) * n];
        for ch in 0..c_feat {
            let dtv = tp.dt[t * c_feat + ch];
            let xv = x[t * c_feat + ch];
            let ar = &a[ch * n..(ch + 1) * n];
            let hr = &mut h[ch * n..(ch + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                let abar = (dtv * ar[s]).exp();
                hr[s] = abar * hr[s] + effective_b(rule, dtv, ar[s], bt[s]) * xv;
                acc += ct[s] * hr[s];
            }
            y[t * c_feat + ch] = acc + d[ch] * xv;
        }
    }
    Ok(y)
}

/// Scan monoid element: h -> a * h + b.
type ScanPair = (f64, f64);

const SCAN_IDENTITY: ScanPair = (1.0, 0.0);

/// Left-then-right composition of two affine recurrence steps.
#[inline]
fn compose(left: ScanPair, right: ScanPair) -> ScanPair {
    (left.0 * right.0, left.1 * right.0 + right.1)
}

/// Inclusive scan over one lane via a fixed balanced binary tree
/// (up/down sweep on an identity-padded power-of-two array). The
/// combination order depends only on the padded length, never on thread
/// count, so results are bit-reproducible.
fn inclusive_scan_tree(elems: &[ScanPair]) -> Vec<ScanPair> {
    let l = elems.len();
    let m = l.next_power_of_two().max(1);
    let mut buf = vec![SCAN_IDENTITY; m];
    buf[..l].copy_from_slice(elems);

    // up-sweep
    let mut stride = 2;
    while stride <= m {
        let mut i = stride - 1;
        while i < m {
            buf[i] = compose(buf[i - stride / 2], buf[i]);
            i += stride;
        }
        stride *= 2;
    }
    // down-sweep producing an exclusive scan; the monoid is not
    // commutative, so the parent prefix composes BEFORE the left sum
    buf[m - 1] = SCAN_IDENTITY;
    stride = m;
    while stride >= 2 {
        let mut i = stride - 1;
        while i < m {
            let left_sum = buf[i - stride / 2];
            let parent_prefix = buf[i];
            buf[i - stride / 2] = parent_prefix;
            buf[i] = compose(parent_prefix, left_sum);
            i += stride;
        }
        stride /= 2;
    }
    // inclusive[i] = exclusive[i] then elems[i]
    (0..l).map(|i| compose(buf[i], elems[i])).collect()
}

/// Parallel-scan evaluation of the selective recurrence. Identical
/// results to [`selective_scan_sequential`] up to floating-point
/// reassociation; bit-identical across runs and worker counts.
///
/// `workers` splits the independent (channel, state) lanes across
/// threads; 0 or 1 stays on the calling thread.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_parallel(
    x: &[f64],
    tp: &TokenParams,
    a: &[f64],
    d: &[f64],
    c_feat: usize,
    n: usize,
    rule: BbarRule,
    workers: usize,
) -> Result<Vec<f64>> {
    let l = tp.l;
    if x.len() != l * c_feat {
        return Err(MirError::Shape(format!(
            "input length {} != L*C = {}",
            x.len(),
            l * c_feat
        )));
    }
    if tp.dt.len() != l * c_feat || tp.b.len() != l * n || tp.cp.len() != l * n {
        return Err(MirError::Shape(
            "per-token parameter length mismatch".into(),
        ));
    }

    // independent affine recurrences per (channel, state) lane
    let lanes = c_feat * n;
    let scan_lane = |lane: usize| -> Vec<ScanPair> {
        let ch = lane / n;
        let s = lane % n;
        let av = a[ch * n + s];
        let elems: Vec<ScanPair> = (0..l)
            .map(|t| {
                let dtv = tp.dt[t * c_feat + ch];
                let xv = x[t * c_feat + ch];
                (
                    (dtv * av).exp(),
                    effective_b(rule, dtv, av, tp.b[t * n + s]) * xv,
                )
            })
            .collect();
        inclusive_scan_tree(&elems)
    };

    let mut lane_states: Vec<Vec<ScanPair>> = Vec::with_capacity(lanes);
    if workers > 1 && lanes > 1 {
        let chunk = lanes.div_ceil(workers);
        let mut results: Vec<Option<Vec<Vec<ScanPair>>>> = Vec::new();
        results.resize_with(workers, || None);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let lo = (w * chunk).min(lanes);
                let hi = ((w + 1) * chunk).min(lanes);
                let scan_lane = &scan_lane;
                handles.push(scope.spawn(move || (lo..hi).map(scan_lane).collect::<Vec<_>>()));
            }
            for (w, handle) in handles.into_iter().enumerate() {
                results[w] = Some(handle.join().expect("scan worker panicked"));
            }
        });
        for r in results.into_iter().flatten() {
            lane_states.extend(r);
        }
    } else {
        for lane in 0..lanes {
            lane_states.push(scan_lane(lane));
        }
    }

    // y[t,c] = sum_n cp[t,n] h[t,c,n] + d[c] x[t,c]; fixed order over n
    let mut y = vec![0.0; l * c_feat];
    for t in 0..l {
        for ch in 0..c_feat {
            let mut acc = 0.0;
            for s in 0..n {
                acc += tp.cp[t * n + s] * lane_states[ch * n + s][t].1;
            }
            y[t * c_feat + ch] = acc + d[ch] * x[t * c_feat + ch];
        }
    }
    Ok(y)
}

/// Random stable system in the range the equivalence suites sample:
/// a_log in [-3, 1], B and C in [-1, 1], D in [-1, 1].
pub fn random_lti(n: usize, rng: &mut Rng) -> LtiParams {
    let a_log: Vec<f64> = (0..n).map(|_| rng.uniform_in(-3.0, 1.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let c: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let d = rng.uniform_in(-1.0, 1.0);
    LtiParams::from_a_log(&a_log, b, c, d).expect("stable by construction")
}

#[cfg(test)]
mod tests;
