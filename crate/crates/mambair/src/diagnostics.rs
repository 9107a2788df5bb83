//! Empirical property probes: effective receptive field maps, channel
//! activation statistics, and wall-time complexity scaling against a
//! full-attention baseline.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::blocks::{ForwardTrace, Model};
use crate::error::{MirError, Result};
use crate::pipeline::io::image_write;
use crate::rng::Rng;
use crate::tensor::{self, Tape, Tensor};

/// Normalized gradient-magnitude map of one output pixel w.r.t. the
/// whole input.
#[derive(Clone, Debug)]
pub struct ErfMap {
    pub h: usize,
    pub w: usize,
    /// Row-major magnitudes, scaled to max 1.
    pub values: Vec<f64>,
    /// Magnitudes before normalization.
    pub raw: Vec<f64>,
}

/// How the probe input for the ERF is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErfInput {
    /// A constant mid-gray (0.5) image; fully deterministic.
    FixedGray,
    /// Average of |gradient| over 8 seeded random inputs.
    RandomAverage { seed: u64 },
}

/// Gradient of the center output pixel (summed over output channels)
/// w.r.t. the input, as |grad| summed over input channels.
pub fn compute_erf(model: &Model, input_size: usize, mode: ErfInput) -> Result<ErfMap> {
    let (h, w) = (input_size, input_size);
    let ch = model.config.in_channels;
    let inputs: Vec<Tensor> = match mode {
        ErfInput::FixedGray => vec![Tensor::filled(&[h, w, ch], 0.5)],
        ErfInput::RandomAverage { seed } => {
            let mut rng = Rng::derive(seed, "erf-inputs");
            (0..8)
                .map(|_| {
                    Tensor::from_vec(
                        &[h, w, ch],
                        (0..h * w * ch).map(|_| rng.uniform()).collect(),
                    )
                })
                .collect()
        }
    };

    let mut raw = vec![0.0; h * w];
    for input in &inputs {
        let input = input.clone().with_grad();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &input)?;
        let os = out.shape();
        let center = tape.select_pixel(&out, os[0] / 2, os[1] / 2)?;
        let scalar = tape.sum_all(&center);
        tape.backward(&scalar)?;
        let grad = input
            .grad()
            .ok_or_else(|| MirError::Autodiff("input received no gradient".into()))?;
        for p in 0..h * w {
            let mag: f64 = (0..ch).map(|c| grad[p * ch + c].abs()).sum();
            raw[p] += mag / inputs.len() as f64;
        }
    }

    let max = raw.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return Err(MirError::Numeric(
            "ERF is identically zero; output does not depend on the input".into(),
        ));
    }
    let values = raw.iter().map(|v| v / max).collect();
    Ok(ErfMap { h, w, values, raw })
}

impl ErfMap {
    /// Writes the map as a PGM heatmap (gamma 0.5 for visibility) plus
    /// a raw CSV of normalized values.
    pub fn write(&self, pgm_path: &Path, csv_path: &Path) -> Result<()> {
        let gamma: Vec<f64> = self.values.iter().map(|v| v.sqrt()).collect();
        let img = Tensor::from_vec(&[self.h, self.w, 1], gamma);
        image_write(pgm_path, &img)?;

        let mut csv = String::from("row,col,value\n");
        for r in 0..self.h {
            for c in 0..self.w {
                csv.push_str(&format!("{r},{c},{:.12e}\n", self.values[r * self.w + c]));
            }
        }
        std::fs::write(csv_path, csv)?;
        Ok(())
    }
}

/// Per-channel mean of ReLU-ed values from the last VSSM output, plus
/// the fraction of channels whose activation sits below 1e-3 of the max.
#[derive(Clone, Debug)]
pub struct ChannelStats {
    pub activations: Vec<f64>,
    pub near_zero_fraction: f64,
}

pub const NEAR_ZERO_RELATIVE: f64 = 1e-3;

pub fn channel_activation_stats(model: &Model, inputs: &[Tensor]) -> Result<ChannelStats> {
    if inputs.is_empty() {
        return Err(MirError::Config("need at least one probe input".into()));
    }
    let mut sum: Vec<f64> = Vec::new();
    for input in inputs {
        let mut tape = Tape::inference();
        let mut trace = ForwardTrace::default();
        model.forward_traced(&mut tape, input, &mut trace)?;
        let vssm = trace.last_vssm.ok_or_else(|| {
            MirError::Config("model has no VSSM layers to probe".into())
        })?;
        let c = *vssm.shape().last().unwrap();
        if sum.is_empty() {
            sum = vec![0.0; c];
        }
        let data = vssm.data();
        let pixels = data.len() / c;
        for p in 0..pixels {
            for ch in 0..c {
                sum[ch] += data[p * c + ch].max(0.0) / pixels as f64;
            }
        }
    }
    for v in sum.iter_mut() {
        *v /= inputs.len() as f64;
    }
    let max = sum.iter().cloned().fold(0.0f64, f64::max);
    let near_zero = if max == 0.0 {
        sum.len()
    } else {
        sum.iter().filter(|&&v| v < NEAR_ZERO_RELATIVE * max).count()
    };
    Ok(ChannelStats {
        near_zero_fraction: near_zero as f64 / sum.len() as f64,
        activations: sum,
    })
}

/// Writes per-channel activations as CSV.
pub fn write_channel_stats(stats: &ChannelStats, path: &Path) -> Result<()> {
    let mut csv = String::from("channel,activation\n");
    for (i, v) in stats.activations.iter().enumerate() {
        csv.push_str(&format!("{i},{v:.12e}\n"));
    }
    csv.push_str(&format!("# near_zero_fraction,{}\n", stats.near_zero_fraction));
    std::fs::write(path, csv)?;
    Ok(())
}

// ── full-attention baseline ──────────────────────────────────────────

/// Weights for single-head scaled dot-product attention over all H*W
/// tokens: the quadratic-cost reference in the complexity benchmark.
pub struct AttentionWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub c: usize,
}

impl AttentionWeights {
    pub fn init(c: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (2.0 * c as f64)).sqrt();
        let mat = |rng: &mut Rng| -> Vec<f64> {
            (0..c * c).map(|_| rng.uniform_in(-limit, limit)).collect()
        };
        AttentionWeights {
            wq: mat(rng),
            wk: mat(rng),
            wv: mat(rng),
            wo: mat(rng),
            c,
        }
    }

    pub fn zero_query(mut self) -> Self {
        self.wq.iter_mut().for_each(|v| *v = 0.0);
        self
    }
}

/// Softmax over each length-`cols` row, in place.
fn softmax_rows(scores: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut scores[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Full attention over the flattened feature map: the quadratic-cost
/// benchmark baseline. Scores are streamed one query row at a time so
/// memory stays O(n*c) while the arithmetic remains Theta(n^2 * c).
pub fn full_attention_forward(x: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || s[2] != w.c {
        return Err(MirError::Shape(format!(
            "attention expects [H,W,{}], got {s:?}",
            w.c
        )));
    }
    let (h, wd, c) = (s[0], s[1], s[2]);
    let n = h * wd;
    let xd = x.data();

    let project = |wmat: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * c];
        crate::tensor::kernels::linear_forward(&xd, n, c, wmat, c, None, &mut out);
        out
    };
    let q = project(&w.wq);
    let k = project(&w.wk);
    let v = project(&w.wv);

    let scale = 1.0 / (c as f64).sqrt();
    let mut attended = vec![0.0; n * c];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let qi = &q[i * c..(i + 1) * c];
        for j in 0..n {
            let kj = &k[j * c..(j + 1) * c];
            let mut acc = 0.0;
            for ch in 0..c {
                acc += qi[ch] * kj[ch];
            }
            row[j] = acc * scale;
        }
        softmax_rows(&mut row, 1, n);
        let out = &mut attended[i * c..(i + 1) * c];
        for (j, &a) in row.iter().enumerate() {
            let vj = &v[j * c..(j + 1) * c];
            for ch in 0..c {
                out[ch] += a * vj[ch];
            }
        }
    }
    let mut y = vec![0.0; n * c];
    crate::tensor::kernels::linear_forward(&attended, n, c, &w.wo, c, None, &mut y);
    drop(xd);
    Ok(Tensor::from_vec(&[h, wd, c], y))
}

/// Row-stochastic attention matrix for a given input, for tests.
pub fn attention_rows(x: &Tensor, w: &AttentionWeights) -> Result<Vec<f64>> {
    let s = x.shape();
    let (h, wd, c) = (s[0], s[1], s[2]);
    let n = h * wd;
    let xd = x.data();
    let mut q = vec![0.0; n * c];
    crate::tensor::kernels::linear_forward(&xd, n, c, &w.wq, c, None, &mut q);
    let mut k = vec![0.0; n * c];
    crate::tensor::kernels::linear_forward(&xd, n, c, &w.wk, c, None, &mut k);
    let scale = 1.0 / (c as f64).sqrt();
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += q[i * c + ch] * k[j * c + ch];
            }
            scores[i * n + j] = acc * scale;
        }
    }
    softmax_rows(&mut scores, n, n);
    Ok(scores)
}

// ── complexity benchmark ─────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchVariant {
    Ssm,
    FullAttention,
    /// Synthetic workload with exactly Theta(pixels) work.
    CalibrateLinear,
    /// Synthetic workload with exactly Theta(pixels^2) work.
    CalibrateQuadratic,
}

impl BenchVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ssm" => Ok(BenchVariant::Ssm),
            "full_attention" => Ok(BenchVariant::FullAttention),
            "calibrate_linear" => Ok(BenchVariant::CalibrateLinear),
            "calibrate_quadratic" => Ok(BenchVariant::CalibrateQuadratic),
            other => Err(MirError::Config(format!("unknown bench variant '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BenchVariant::Ssm => "ssm",
            BenchVariant::FullAttention => "full_attention",
            BenchVariant::CalibrateLinear => "calibrate_linear",
            BenchVariant::CalibrateQuadratic => "calibrate_quadratic",
        }
    }
}

/// One timing record: median wall time and peak live tensor bytes for a
/// square input of the given side length.
#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub side: usize,
    pub pixels: usize,
    pub variant: BenchVariant,
    pub ms_median: f64,
    pub bytes: usize,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    /// Least-squares slope of log(time) vs log(pixels) per variant.
    pub slopes: Vec<(BenchVariant, f64)>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx: f64 = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my: f64 = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in points {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Synthetic calibration workloads; the returned value defeats
/// dead-code elimination through `black_box`.
fn calibration_work(pixels: usize, quadratic: bool) -> f64 {
    let mut acc = 0.0f64;
    if quadratic {
        for i in 0..pixels {
            let base = (i as f64).sin();
            for j in 0..pixels {
                acc += base * (j as f64 + 1.0).recip();
            }
        }
    } else {
        // fixed number of passes so work = REPS * pixels
        const REPS: usize = 6000;
        for r in 0..REPS {
            let base = (r as f64 + 1.0).recip();
            for i in 0..pixels {
                acc += base * (i as f64);
            }
        }
    }
    std::hint::black_box(acc)
}

/// Times forward passes over square inputs of the given sides. One
/// warm-up run is discarded; the median of `runs` timed runs is kept.
/// Single-threaded by contract.
pub fn complexity_bench(
    model: &Model,
    sides: &[usize],
    variants: &[BenchVariant],
    runs: usize,
    seed: u64,
) -> Result<BenchReport> {
    if sides.len() < 4 {
        return Err(MirError::Config(format!(
            "need at least 4 sizes for a slope fit, got {}",
            sides.len()
        )));
    }
    if sides.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MirError::Config("sides must be strictly increasing".into()));
    }
    let runs = runs.max(5);
    let mut rng = Rng::derive(seed, "bench");
    let attn = AttentionWeights::init(model.config.channels, &mut rng);

    let mut records = Vec::new();
    let mut slopes = Vec::new();
    for &variant in variants {
        let mut points = Vec::new();
        for &side in sides {
            let pixels = side * side;
            let input = Tensor::from_vec(
                &[side, side, model.config.in_channels],
                (0..pixels * model.config.in_channels)
                    .map(|_| rng.uniform())
                    .collect(),
            );
            // feature-width input for the attention baseline (matched C)
            let feat = Tensor::from_vec(
                &[side, side, model.config.channels],
                (0..pixels * model.config.channels)
                    .map(|_| rng.uniform())
                    .collect(),
            );

            let time_once = || -> Result<f64> {
                tensor::reset_peak_tensor_bytes();
                let t0 = Instant::now();
                match variant {
                    BenchVariant::Ssm => {
                        let mut tape = Tape::inference();
                        let out = model.forward(&mut tape, &input)?;
                        std::hint::black_box(out.data()[0]);
                    }
                    BenchVariant::FullAttention => {
                        let out = full_attention_forward(&feat, &attn)?;
                        std::hint::black_box(out.data()[0]);
                    }
                    BenchVariant::CalibrateLinear => {
                        calibration_work(pixels, false);
                    }
                    BenchVariant::CalibrateQuadratic => {
                        calibration_work(pixels, true);
                    }
                }
                Ok(t0.elapsed().as_secs_f64() * 1e3)
            };

            time_once()?; // warm-up, discarded
            let mut times = Vec::with_capacity(runs);
            for _ in 0..runs {
                times.push(time_once()?);
            }
            let bytes = tensor::peak_tensor_bytes();
            let ms = median(times);
            points.push(((pixels as f64).ln(), ms.max(1e-6).ln()));
            records.push(BenchRecord {
                side,
                pixels,
                variant,
                ms_median: ms,
                bytes,
            });
        }
        slopes.push((variant, fit_slope(&points)));
    }
    Ok(BenchReport { records, slopes })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("side,pixels,variant,ms_median,bytes\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{:.4},{}\n",
                r.side,
                r.pixels,
                r.variant.as_str(),
                r.ms_median,
                r.bytes
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn slope_of(&self, variant: BenchVariant) -> Option<f64> {
        self.slopes.iter().find(|(v, _)| *v == variant).map(|(_, s)| *s)
    }
}
