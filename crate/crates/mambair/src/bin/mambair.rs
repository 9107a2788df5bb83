//! Command-line interface: training, inference, ERF maps, complexity
//! benchmarks, channel statistics, and the self-test suite.
//!
//! Exit codes: 0 success, 1 failed selftest, 2 configuration error,
//! 3 I/O error, 4 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mambair::blocks::Model;
use mambair::diagnostics::{
    channel_activation_stats, complexity_bench, compute_erf, write_channel_stats, BenchVariant,
    ErfInput,
};
use mambair::error::MirError;
use mambair::pipeline::checkpoint::Checkpoint;
use mambair::pipeline::config::RunConfig;
use mambair::pipeline::ensemble::restore_image;
use mambair::pipeline::io::{image_read, image_write};
use mambair::pipeline::train::{list_images, train, TrainOptions};
use mambair::selftest::run_selftest;

#[derive(Parser)]
#[command(
    name = "mambair",
    about = "Selective state-space image restoration at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable, last wins).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed override (applies after --set).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, MirError> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path)?,
            None => String::new(),
        };
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        RunConfig::from_text(&text, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of PGM/PPM images.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory with high-quality training images.
        #[arg(long)]
        input: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV log (step,loss,psnr,ssim).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Resume from an earlier checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore an image (or every image in a directory) with a trained
    /// model.
    Infer {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image, or a directory of PGM/PPM images.
        #[arg(long)]
        input: PathBuf,
        /// Output image path (a directory when --input is a directory).
        #[arg(long)]
        out: PathBuf,
        /// Average the outputs over all 8 dihedral transforms.
        #[arg(long)]
        ensemble: bool,
    },
    /// Effective receptive field of a model as a heatmap + CSV.
    Erf {
        #[command(flatten)]
        config: ConfigArgs,
        /// Probe a trained checkpoint instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Square input side length.
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Average gradients over 8 random inputs instead of fixed gray.
        #[arg(long)]
        random_inputs: bool,
        /// Output PGM path (CSV written next to it).
        #[arg(long)]
        out: PathBuf,
    },
    /// Wall-time scaling over input sizes, with fitted log-log slopes.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated variants: ssm, full_attention,
        /// calibrate_linear, calibrate_quadratic.
        #[arg(long, default_value = "ssm,full_attention")]
        variant: String,
        /// Comma-separated side lengths.
        #[arg(long, default_value = "48,60,72,84,96")]
        sizes: String,
        /// Timed runs per size (median kept).
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-channel activation statistics of the last VSSM layer.
    Channels {
        #[command(flatten)]
        config: ConfigArgs,
        /// Probe a trained checkpoint instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image file or directory of probe images.
        #[arg(long)]
        input: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full property/equivalence suite.
    Selftest,
}

fn exit_code_for(err: &MirError) -> u8 {
    match err {
        MirError::Config(_) | MirError::Shape(_) => 2,
        MirError::Io(_) | MirError::Format(_) => 3,
        MirError::Numeric(_) | MirError::Autodiff(_) => 4,
    }
}

/// Model from a checkpoint (config echo + weights) or a fresh init.
fn model_from(
    config: &ConfigArgs,
    checkpoint: &Option<PathBuf>,
) -> Result<(Model, RunConfig), MirError> {
    match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut overrides = config.set.clone();
            if let Some(seed) = config.seed {
                overrides.push(format!("seed={seed}"));
            }
            let cfg = RunConfig::from_text(&ck.config_echo, &overrides)?;
            let model = Model::init(&cfg.model, cfg.train.seed)?;
            ck.restore_params(model.state())?;
            Ok((model, cfg))
        }
        None => {
            let cfg = config.load()?;
            let model = Model::init(&cfg.model, cfg.train.seed)?;
            Ok((model, cfg))
        }
    }
}

fn run(cli: Cli) -> Result<u8, MirError> {
    match cli.command {
        Command::Train {
            config,
            input,
            out,
            log,
            resume,
        } => {
            let cfg = config.load()?;
            let opts = TrainOptions {
                resume_from: resume,
                metrics_log: log,
                stop_after_step: None,
            };
            let report = train(&cfg, &input, &out, &opts)?;
            println!(
                "trained {} steps: loss {:.6}, holdout PSNR {:.3} dB (baseline {:.3}), SSIM {:.4}",
                report.steps,
                report.train_loss,
                report.psnr_y,
                report.baseline_psnr_y,
                report.ssim_y
            );
            Ok(0)
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            ensemble,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = RunConfig::from_text(&ck.config_echo, &[])?;
            let model = Model::init(&cfg.model, cfg.train.seed)?;
            ck.restore_params(model.state())?;
            if input.is_dir() {
                let paths = list_images(&input)?;
                if paths.is_empty() {
                    return Err(MirError::Config(format!(
                        "no .pgm/.ppm images in {}",
                        input.display()
                    )));
                }
                std::fs::create_dir_all(&out)?;
                for p in &paths {
                    let image = image_read(p)?;
                    let restored = restore_image(&model, &image, ensemble)?;
                    let dest = out.join(p.file_name().expect("listed files have names"));
                    image_write(&dest, &restored)?;
                }
                println!("restored {} images into {}", paths.len(), out.display());
            } else {
                let image = image_read(&input)?;
                let restored = restore_image(&model, &image, ensemble)?;
                image_write(&out, &restored)?;
                println!("restored {} -> {}", input.display(), out.display());
            }
            Ok(0)
        }
        Command::Erf {
            config,
            checkpoint,
            size,
            random_inputs,
            out,
        } => {
            let (model, cfg) = model_from(&config, &checkpoint)?;
            let mode = if random_inputs {
                ErfInput::RandomAverage {
                    seed: cfg.train.seed,
                }
            } else {
                ErfInput::FixedGray
            };
            let erf = compute_erf(&model, size, mode)?;
            let csv = out.with_extension("csv");
            erf.write(&out, &csv)?;
            let support = erf.raw.iter().filter(|&&v| v > 1e-12).count();
            println!(
                "ERF over {size}x{size}: {support}/{} positions above 1e-12; wrote {} and {}",
                size * size,
                out.display(),
                csv.display()
            );
            Ok(0)
        }
        Command::Bench {
            config,
            variant,
            sizes,
            runs,
            out,
        } => {
            let cfg = config.load()?;
            let model = Model::init(&cfg.model, cfg.train.seed)?;
            let variants: Vec<BenchVariant> = variant
                .split(',')
                .map(|v| BenchVariant::parse(v.trim()))
                .collect::<Result<_, _>>()?;
            let sides: Vec<usize> = sizes
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| MirError::Config(format!("bad size '{s}'")))
                })
                .collect::<Result<_, _>>()?;
            let report = complexity_bench(&model, &sides, &variants, runs, cfg.train.seed)?;
            report.write_csv(&out)?;
            for (variant, slope) in &report.slopes {
                println!("slope[{}] = {:.3}", variant.as_str(), slope);
            }
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Channels {
            config,
            checkpoint,
            input,
            out,
        } => {
            let (model, _) = model_from(&config, &checkpoint)?;
            let paths = if input.is_dir() {
                list_images(&input)?
            } else {
                vec![input.clone()]
            };
            if paths.is_empty() {
                return Err(MirError::Config(format!(
                    "no probe images found in {}",
                    input.display()
                )));
            }
            let mut images = Vec::with_capacity(paths.len());
            for p in &paths {
                images.push(image_read(p)?);
            }
            let stats = channel_activation_stats(&model, &images)?;
            write_channel_stats(&stats, &out)?;
            println!(
                "{} channels, near-zero fraction {:.3}; wrote {}",
                stats.activations.len(),
                stats.near_zero_fraction,
                out.display()
            );
            Ok(0)
        }
        Command::Selftest => {
            let ok = run_selftest()?;
            Ok(if ok { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
