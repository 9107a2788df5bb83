//! Run configuration: UTF-8 text, one `key = value` per line, `#`
//! comments. Unknown keys are errors (both in files and in `--set`
//! overrides). Values not present fall back to task-dependent defaults.

use crate::blocks::{ModelConfig, Task};
use crate::error::{MirError, Result};

/// Training hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Square patch side; clamped to the image size (and rounded down to
    /// a multiple of the scale) at sampling time.
    pub patch_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: u64,
    pub seed: u64,
    /// Gaussian noise level on the 0-255 scale (denoising tasks).
    pub noise_level: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub eval_interval: u64,
    /// Trailing (sorted by filename) images held out for evaluation.
    pub holdout_count: usize,
}

/// Everything one run needs: architecture plus training settings.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const CONFIG_KEYS: &[&str] = &[
    "task",
    "in_channels",
    "channels",
    "groups",
    "blocks_per_group",
    "state_size",
    "expansion",
    "bottleneck_factor",
    "ca_reduction",
    "use_local_conv",
    "use_channel_attention",
    "replace_with_mlp",
    "scan_directions",
    "shared_scan_params",
    "patch_size",
    "batch_size",
    "learning_rate",
    "total_steps",
    "seed",
    "noise_level",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "eval_interval",
    "holdout_count",
];

impl RunConfig {
    /// Desk-scale defaults for a task. Patch sizes follow the training
    /// protocol (64 for SR, 128 for denoising); the sampler clamps them
    /// to the corpus image size.
    pub fn default_for(task: Task) -> RunConfig {
        RunConfig {
            model: ModelConfig::toy(task),
            train: TrainConfig {
                patch_size: if task == Task::Denoise { 128 } else { 64 },
                batch_size: 2,
                learning_rate: 2e-4,
                total_steps: 2000,
                seed: 0,
                noise_level: 25.0,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                eval_interval: 200,
                holdout_count: 8,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.patch_size == 0 || t.batch_size == 0 {
            return Err(MirError::Config(
                "patch_size and batch_size must be positive".into(),
            ));
        }
        if !t.patch_size.is_multiple_of(self.model.task.scale()) {
            return Err(MirError::Config(format!(
                "patch_size {} not divisible by scale {}",
                t.patch_size,
                self.model.task.scale()
            )));
        }
        if !t.learning_rate.is_finite() || t.learning_rate <= 0.0 {
            return Err(MirError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..255.0).contains(&t.noise_level) {
            return Err(MirError::Config(format!(
                "noise_level {} outside [0, 255)",
                t.noise_level
            )));
        }
        if t.eval_interval == 0 {
            return Err(MirError::Config("eval_interval must be positive".into()));
        }
        Ok(())
    }

    /// Noise standard deviation in internal [0,1] units.
    pub fn sigma(&self) -> f64 {
        self.train.noise_level / 255.0
    }

    /// Canonical text form: every key, fixed order. Used for the
    /// checkpoint config echo and for writing default config files.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("task", m.task.as_str().to_string());
        kv("in_channels", m.in_channels.to_string());
        kv("channels", m.channels.to_string());
        kv("groups", m.groups.to_string());
        kv("blocks_per_group", m.blocks_per_group.to_string());
        kv("state_size", m.state_size.to_string());
        kv("expansion", format!("{}", m.expansion));
        kv("bottleneck_factor", m.bottleneck_factor.to_string());
        kv("ca_reduction", m.ca_reduction.to_string());
        kv("use_local_conv", m.use_local_conv.to_string());
        kv("use_channel_attention", m.use_channel_attention.to_string());
        kv("replace_with_mlp", m.replace_with_mlp.to_string());
        kv("scan_directions", m.scan_directions.to_string());
        kv("shared_scan_params", m.shared_scan_params.to_string());
        kv("patch_size", t.patch_size.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", format!("{}", t.learning_rate));
        kv("total_steps", t.total_steps.to_string());
        kv("seed", t.seed.to_string());
        kv("noise_level", format!("{}", t.noise_level));
        kv("adam_beta1", format!("{}", t.adam_beta1));
        kv("adam_beta2", format!("{}", t.adam_beta2));
        kv("adam_eps", format!("{}", t.adam_eps));
        kv("eval_interval", t.eval_interval.to_string());
        kv("holdout_count", t.holdout_count.to_string());
        s
    }

    /// Parses config text plus `key=value` overrides (overrides win;
    /// later entries shadow earlier ones).
    pub fn from_text(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(MirError::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        for ov in overrides {
            let Some((k, v)) = ov.split_once('=') else {
                return Err(MirError::Config(format!(
                    "override '{ov}' must be key=value"
                )));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }

        for (k, _) in &pairs {
            if !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(MirError::Config(format!("unknown config key '{k}'")));
            }
        }

        // task first (it fixes the defaults), then the rest in order
        let task = match pairs.iter().rev().find(|(k, _)| k == "task") {
            Some((_, v)) => Task::parse(v)?,
            None => Task::Denoise,
        };
        let mut cfg = RunConfig::default_for(task);
        let mut patch_explicit = false;
        for (k, v) in &pairs {
            apply_key(&mut cfg, k, v, &mut patch_explicit)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_as<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| MirError::Config(format!("invalid value '{v}' for key '{k}'")))
}

fn apply_key(cfg: &mut RunConfig, k: &str, v: &str, patch_explicit: &mut bool) -> Result<()> {
    match k {
        "task" => {
            let task = Task::parse(v)?;
            cfg.model.task = task;
            if !*patch_explicit {
                cfg.train.patch_size = if task == Task::Denoise { 128 } else { 64 };
            }
        }
        "in_channels" => cfg.model.in_channels = parse_as(k, v)?,
        "channels" => cfg.model.channels = parse_as(k, v)?,
        "groups" => cfg.model.groups = parse_as(k, v)?,
        "blocks_per_group" => cfg.model.blocks_per_group = parse_as(k, v)?,
        "state_size" => cfg.model.state_size = parse_as(k, v)?,
        "expansion" => cfg.model.expansion = parse_as(k, v)?,
        "bottleneck_factor" => cfg.model.bottleneck_factor = parse_as(k, v)?,
        "ca_reduction" => cfg.model.ca_reduction = parse_as(k, v)?,
        "use_local_conv" => cfg.model.use_local_conv = parse_as(k, v)?,
        "use_channel_attention" => cfg.model.use_channel_attention = parse_as(k, v)?,
        "replace_with_mlp" => cfg.model.replace_with_mlp = parse_as(k, v)?,
        "scan_directions" => cfg.model.scan_directions = parse_as(k, v)?,
        "shared_scan_params" => cfg.model.shared_scan_params = parse_as(k, v)?,
        "patch_size" => {
            cfg.train.patch_size = parse_as(k, v)?;
            *patch_explicit = true;
        }
        "batch_size" => cfg.train.batch_size = parse_as(k, v)?,
        "learning_rate" => cfg.train.learning_rate = parse_as(k, v)?,
        "total_steps" => cfg.train.total_steps = parse_as(k, v)?,
        "seed" => cfg.train.seed = parse_as(k, v)?,
        "noise_level" => cfg.train.noise_level = parse_as(k, v)?,
        "adam_beta1" => cfg.train.adam_beta1 = parse_as(k, v)?,
        "adam_beta2" => cfg.train.adam_beta2 = parse_as(k, v)?,
        "adam_eps" => cfg.train.adam_eps = parse_as(k, v)?,
        "eval_interval" => cfg.train.eval_interval = parse_as(k, v)?,
        "holdout_count" => cfg.train.holdout_count = parse_as(k, v)?,
        other => return Err(MirError::Config(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

/// Learning rate after scheduled halvings at 50%, 75% and 90% of the
/// total step budget.
pub fn lr_at_step(base: f64, step: u64, total: u64) -> f64 {
    let mut lr = base;
    for frac in [0.5, 0.75, 0.9] {
        if step as f64 >= frac * total as f64 {
            lr *= 0.5;
        }
    }
    lr
}
