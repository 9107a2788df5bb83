//! The training loop: sample patch, augment, degrade, forward, loss,
//! backward, Adam step, with periodic held-out evaluation and
//! checkpointing. Fully deterministic for a fixed seed: every random
//! draw comes from a stream derived from (seed, step) or (seed, image),
//! so resuming from a checkpoint reproduces the original trajectory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::blocks::{Model, Task};
use crate::error::{MirError, Result};
use crate::pipeline::adam::{AdamHyper, AdamState};
use crate::pipeline::augment::augment;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::{lr_at_step, RunConfig};
use crate::pipeline::degrade::{add_gaussian_noise, area_downsample, bilinear_upsample, clamp01};
use crate::pipeline::io::image_read;
use crate::pipeline::metrics::{psnr_y, ssim_y};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Quality and cost numbers reported by evaluation runs.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub steps: u64,
    pub train_loss: f64,
    /// Held-out mean Y-channel PSNR of the restored output.
    pub psnr_y: f64,
    pub ssim_y: f64,
    /// Same metric for the reference input (noisy image or bilinear
    /// upsample of the low-res input).
    pub baseline_psnr_y: f64,
    pub runtime_ms: f64,
}

#[derive(Default)]
pub struct TrainOptions {
    pub resume_from: Option<PathBuf>,
    /// CSV metrics log: "step,loss,psnr,ssim" per evaluation point.
    pub metrics_log: Option<PathBuf>,
    /// Stop (with a checkpoint) after this step, before total_steps is
    /// reached; the learning-rate schedule still follows total_steps.
    /// Bit-exact resume requires stopping on an eval_interval boundary,
    /// where the uninterrupted run also rounds its state through the
    /// checkpoint representation.
    pub stop_after_step: Option<u64>,
}

/// All .pgm/.ppm files in the directory, sorted by filename.
pub fn list_images(data_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(data_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("ppm")
            )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn crop(img: &Tensor, row: usize, col: usize, height: usize, width: usize) -> Tensor {
    let s = img.shape();
    let (w, c) = (s[1], s[2]);
    let src = img.data();
    let mut out = Vec::with_capacity(height * width * c);
    for r in row..row + height {
        let from = (r * w + col) * c;
        out.extend_from_slice(&src[from..from + width * c]);
    }
    drop(src);
    Tensor::from_vec(&[height, width, c], out)
}

/// Patch side actually used: the configured size clamped to the image
/// and rounded down to a multiple of the task scale.
fn effective_patch(cfg: &RunConfig, h: usize, w: usize) -> usize {
    let scale = cfg.model.task.scale();
    let p = cfg.train.patch_size.min(h).min(w);
    let p = p - p % scale;
    p.max(scale)
}

pub struct EvalPair {
    pub lq: Tensor,
    pub hq: Tensor,
    pub baseline: Tensor,
}

/// Held-out pairs with frozen degradations (noise drawn from per-image
/// streams so every evaluation sees identical inputs).
pub fn build_eval_pairs(cfg: &RunConfig, holdout: &[Tensor]) -> Result<Vec<EvalPair>> {
    let mut pairs = Vec::with_capacity(holdout.len());
    let scale = cfg.model.task.scale();
    for (idx, hq) in holdout.iter().enumerate() {
        match cfg.model.task {
            Task::Denoise => {
                let mut rng = Rng::derive(cfg.train.seed, &format!("eval-noise-{idx}"));
                let lq = add_gaussian_noise(hq, cfg.sigma(), &mut rng);
                pairs.push(EvalPair {
                    baseline: clamp01(&lq),
                    lq,
                    hq: hq.clone(),
                });
            }
            _ => {
                let s = hq.shape();
                let (ch, cw) = (s[0] - s[0] % scale, s[1] - s[1] % scale);
                let hq_c = crop(hq, 0, 0, ch, cw);
                let lq = area_downsample(&hq_c, scale)?;
                let baseline = clamp01(&bilinear_upsample(&lq, scale)?);
                pairs.push(EvalPair {
                    lq,
                    hq: hq_c,
                    baseline,
                });
            }
        }
    }
    Ok(pairs)
}

pub fn evaluate(model: &Model, pairs: &[EvalPair]) -> Result<(f64, f64, f64)> {
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut base_sum = 0.0;
    for pair in pairs {
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &pair.lq)?;
        out.check_finite("evaluation output")?;
        let restored = clamp01(&out);
        psnr_sum += psnr_y(&restored, &pair.hq)?;
        ssim_sum += ssim_y(&restored, &pair.hq)?;
        base_sum += psnr_y(&pair.baseline, &pair.hq)?;
    }
    let n = pairs.len() as f64;
    Ok((psnr_sum / n, ssim_sum / n, base_sum / n))
}

/// One training batch on a recording tape; returns the scalar loss.
pub fn train_step_loss(
    model: &Model,
    cfg: &RunConfig,
    train_imgs: &[Tensor],
    step: u64,
    tape: &mut Tape,
) -> Result<Tensor> {
    let mut rng = Rng::derive(cfg.train.seed, &format!("step-{step}"));
    let scale = cfg.model.task.scale();
    let mut losses = Vec::with_capacity(cfg.train.batch_size);
    for _ in 0..cfg.train.batch_size {
        let img = &train_imgs[rng.below(train_imgs.len())];
        let s = img.shape();
        let p = effective_patch(cfg, s[0], s[1]);
        let row = rng.below(s[0] - p + 1);
        let col = rng.below(s[1] - p + 1);
        let patch = crop(img, row, col, p, p);
        let code = rng.below(8) as u8;
        let hq = augment(&patch, code)?;
        let (lq, loss) = match cfg.model.task {
            Task::Denoise => {
                let lq = add_gaussian_noise(&hq, cfg.sigma(), &mut rng);
                let out = model.forward(tape, &lq)?;
                (lq, tape.charbonnier_loss(&out, &hq, 1e-3)?)
            }
            _ => {
                let lq = area_downsample(&hq, scale)?;
                let out = model.forward(tape, &lq)?;
                (lq, tape.l1_loss(&out, &hq)?)
            }
        };
        drop(lq);
        losses.push(loss);
    }
    let mut total = losses[0].clone();
    for l in &losses[1..] {
        total = tape.add(&total, l)?;
    }
    Ok(tape.scale(&total, 1.0 / cfg.train.batch_size as f64))
}

pub fn train(
    cfg: &RunConfig,
    data_dir: &Path,
    out_checkpoint: &Path,
    opts: &TrainOptions,
) -> Result<MetricReport> {
    cfg.validate()?;
    let start = Instant::now();

    let paths = list_images(data_dir)?;
    if paths.is_empty() {
        return Err(MirError::Config(format!(
            "no .pgm/.ppm images in {}",
            data_dir.display()
        )));
    }
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = image_read(p)?;
        if img.shape()[2] != cfg.model.in_channels {
            return Err(MirError::Config(format!(
                "{} has {} channels, config expects {}",
                p.display(),
                img.shape()[2],
                cfg.model.in_channels
            )));
        }
        images.push(img);
    }
    let holdout_n = cfg.train.holdout_count.min(images.len().saturating_sub(1));
    let train_imgs: Vec<Tensor> = images[..images.len() - holdout_n].to_vec();
    let holdout: Vec<Tensor> = images[images.len() - holdout_n..].to_vec();
    if train_imgs.is_empty() {
        return Err(MirError::Config("no training images after holdout".into()));
    }
    let eval_pairs = build_eval_pairs(cfg, &holdout)?;

    let model = Model::init(&cfg.model, cfg.train.seed)?;
    model.state().set_grad_enabled(true);
    let mut adam = AdamState::new(model.state());
    let mut start_step = 0u64;
    if let Some(resume) = &opts.resume_from {
        let ck = Checkpoint::load(resume)?;
        ck.restore_params(model.state())?;
        ck.restore_optimizer(model.state(), &mut adam)?;
        start_step = ck.step;
    }

    let config_echo = cfg.to_text();
    let mut log_lines = vec!["step,loss,psnr,ssim".to_string()];
    let mut last_loss = f64::NAN;
    let mut last_eval = (f64::NAN, f64::NAN, f64::NAN);

    let write_log = |lines: &[String], opts: &TrainOptions| -> Result<()> {
        if let Some(path) = &opts.metrics_log {
            std::fs::write(path, lines.join("\n") + "\n")?;
        }
        Ok(())
    };

    if cfg.train.total_steps == 0 || start_step >= cfg.train.total_steps {
        let ck = Checkpoint::capture(model.state(), Some(&adam), start_step, &config_echo);
        ck.save(out_checkpoint)?;
        let (psnr, ssim, base) = evaluate(&model, &eval_pairs)?;
        write_log(&log_lines, opts)?;
        return Ok(MetricReport {
            steps: start_step,
            train_loss: f64::NAN,
            psnr_y: psnr,
            ssim_y: ssim,
            baseline_psnr_y: base,
            runtime_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let mut tape = Tape::new();
    for step in start_step + 1..=cfg.train.total_steps {
        let loss = train_step_loss(&model, cfg, &train_imgs, step, &mut tape)?;
        last_loss = loss.item();
        if !last_loss.is_finite() {
            return Err(MirError::Numeric(format!(
                "non-finite loss {last_loss} at step {step}"
            )));
        }
        tape.backward(&loss)?;
        let hyper = AdamHyper {
            lr: lr_at_step(cfg.train.learning_rate, step, cfg.train.total_steps),
            beta1: cfg.train.adam_beta1,
            beta2: cfg.train.adam_beta2,
            eps: cfg.train.adam_eps,
        };
        adam.step(model.state(), &hyper)?;
        tape.clear();

        let stopping = opts.stop_after_step == Some(step);
        if step % cfg.train.eval_interval == 0 || step == cfg.train.total_steps || stopping {
            last_eval = evaluate(&model, &eval_pairs)?;
            log_lines.push(format!(
                "{step},{:.6},{:.4},{:.5}",
                last_loss, last_eval.0, last_eval.1
            ));
            write_log(&log_lines, opts)?;
            crate::pipeline::checkpoint::quantize_state_to_f32(model.state(), Some(&mut adam));
            let ck = Checkpoint::capture(model.state(), Some(&adam), step, &config_echo);
            ck.save(out_checkpoint)?;
        }
        if stopping {
            break;
        }
    }

    Ok(MetricReport {
        steps: cfg.train.total_steps,
        train_loss: last_loss,
        psnr_y: last_eval.0,
        ssim_y: last_eval.1,
        baseline_psnr_y: last_eval.2,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests;
