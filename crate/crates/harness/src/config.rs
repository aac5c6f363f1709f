//! Experiment configuration read from `section.key = value` text files.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use partflow::codec::{CodecMode, CodecTrainConfig};
use partflow::partdecode::{ClickPolicy, DEFAULT_DELTA_C};
use partflow::segdit::{ModelConfig, Task};
use partflow::shapeforge::{GenConfig, TextureMode, View};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `section.key = value`")]
    Syntax { line: usize },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key}: cannot parse {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to zero over `max_steps`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Sampling probabilities for interactive, full and guided-full samples.
    pub task_mix: [f64; 3],
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub schedule: LrSchedule,
    pub guidance_view: View,
    pub log_every: usize,
    /// Write an intermediate bundle every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            max_steps: 10_000,
            task_mix: [1.0 / 3.0; 3],
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_steps: 0,
            schedule: LrSchedule::Constant,
            guidance_view: View::PosZ,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let sum: f64 = self.task_mix.iter().sum();
        if self.task_mix.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(ConfigError::Invalid(format!("task_mix {:?} must be probabilities summing to 1", self.task_mix)));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(ConfigError::Invalid("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if step < self.warmup_steps { (step + 1) as f64 / self.warmup_steps as f64 } else { 1.0 };
        let decay = match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let p = step as f64 / self.max_steps.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        };
        self.learning_rate * warm * decay
    }

    pub fn task_probability(&self, task: Task) -> f64 {
        self.task_mix[task.index() as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub steps: usize,
    pub seed: u64,
    pub delta_c: f64,
    pub click_policy: ClickPolicy,
    pub guidance_view: View,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { steps: 12, seed: 0, delta_c: DEFAULT_DELTA_C, click_policy: ClickPolicy::Interior, guidance_view: View::PosZ }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    pub holdout: usize,
    pub gen: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { count: 64, seed: 0, holdout: 32, gen: GenConfig::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub codec: CodecTrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), value: value.into(), reason: e.to_string() })
}

/// Accepts plain numbers and `p/q` fractions.
fn parse_fraction(key: &str, value: &str) -> Result<f64, ConfigError> {
    match value.split_once('/') {
        Some((p, q)) => Ok(parse::<f64>(key, p.trim())? / parse::<f64>(key, q.trim())?),
        None => parse(key, value),
    }
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64), ConfigError> {
    let bad = || ConfigError::BadValue { key: key.into(), value: value.into(), reason: "expected `lo,hi`".into() };
    let (a, b) = value.split_once(',').ok_or_else(bad)?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Starts from defaults and applies every assignment in `text`. Blank
    /// lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if !key.contains('.') {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            cfg.set(key, value)?;
        }
        cfg.train.validate()?;
        cfg.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let g = &mut self.data.gen;
        let (c, m, t, e) = (&mut self.codec, &mut self.model, &mut self.train, &mut self.eval);
        match key {
            "data.count" => self.data.count = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.holdout" => self.data.holdout = parse(key, v)?,
            "data.resolution" => g.resolution = parse(key, v)?,
            "data.min_primitives" => g.min_primitives = parse(key, v)?,
            "data.max_primitives" => g.max_primitives = parse(key, v)?,
            "data.center_range" => g.center_range = parse_range(key, v)?,
            "data.size_range" => g.size_range = parse_range(key, v)?,
            "data.min_part_voxels" => g.min_part_voxels = parse(key, v)?,
            "data.materials" => g.materials = parse(key, v)?,
            "data.texture" => {
                g.texture = match v {
                    "per_part" => TextureMode::PerPart,
                    "uniform" => TextureMode::Uniform,
                    "materials" => TextureMode::Materials,
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: v.into(), reason: "per_part|uniform|materials".into() }),
                }
            }
            "codec.mode" => {
                c.mode = match v {
                    "identity" => CodecMode::Identity,
                    "learned" => CodecMode::Learned,
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: v.into(), reason: "identity|learned".into() }),
                }
            }
            "codec.d_lat" => c.d_lat = parse(key, v)?,
            "codec.hidden" => c.hidden = parse(key, v)?,
            "codec.max_epochs" => c.max_epochs = parse(key, v)?,
            "codec.learning_rate" => c.learning_rate = parse(key, v)?,
            "codec.stop_mse" => c.stop_mse = parse(key, v)?,
            "codec.seed" => c.seed = parse(key, v)?,
            "model.d_model" => m.d_model = parse(key, v)?,
            "model.blocks" => m.blocks = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.ff_ratio" => m.ff_ratio = parse(key, v)?,
            "model.point_embed" => m.point_embed = parse(key, v)?,
            "model.patch_size" => m.patch_size = parse(key, v)?,
            "model.freq_dim" => m.freq_dim = parse(key, v)?,
            "model.rope_base" => m.rope_base = parse(key, v)?,
            "model.cross_rope" => m.cross_rope = parse(key, v)?,
            "model.mask_padded_points" => m.mask_padded_points = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.max_steps" => t.max_steps = parse(key, v)?,
            "train.task_mix" => {
                let parts: Vec<f64> = v.split(',').map(|p| parse_fraction(key, p.trim())).collect::<Result<_, _>>()?;
                t.task_mix = parts.try_into().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    reason: "expected three comma-separated values".into(),
                })?;
            }
            "train.seed" => t.seed = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.grad_clip" => t.grad_clip = parse(key, v)?,
            "train.warmup_steps" => t.warmup_steps = parse(key, v)?,
            "train.schedule" => {
                t.schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(ConfigError::BadValue { key: key.into(), value: v.into(), reason: "constant|cosine".into() }),
                }
            }
            "train.guidance_view" => t.guidance_view = parse(key, v)?,
            "train.log_every" => t.log_every = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "flow.steps" | "eval.steps" => e.steps = parse(key, v)?,
            "eval.seed" => e.seed = parse(key, v)?,
            "decode.delta_c" => e.delta_c = parse(key, v)?,
            "clicks.policy" => e.click_policy = parse(key, v)?,
            "eval.guidance_view" => e.guidance_view = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_assignments() {
        let cfg = ExperimentConfig::parse(
            "# toy run\ntrain.learning_rate = 3e-4\ntrain.task_mix = 1/2, 1/4, 1/4\nmodel.point_embed = explicit\n\nclicks.policy = random # note\n",
        )
        .unwrap();
        assert_eq!(cfg.train.learning_rate, 3e-4);
        assert_eq!(cfg.train.task_mix, [0.5, 0.25, 0.25]);
        assert_eq!(cfg.model.point_embed, partflow::segdit::PointEmbed::Explicit);
        assert_eq!(cfg.eval.click_policy, ClickPolicy::Random);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(ExperimentConfig::parse("train.nope = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(ExperimentConfig::parse("just text"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(ExperimentConfig::parse("train.task_mix = 0.5,0.5,0.5"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ExperimentConfig::parse("train.batch_size = many"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let t = TrainConfig { learning_rate: 1.0, max_steps: 100, warmup_steps: 10, schedule: LrSchedule::Cosine, ..Default::default() };
        assert!((t.lr_at(0) - 0.1).abs() < 1e-12);
        assert!(t.lr_at(99) < 0.01);
        assert_eq!(TrainConfig::default().lr_at(5), 1e-4);
    }
}
