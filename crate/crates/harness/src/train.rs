//! Interleaved multi-task flow-matching training.

use std::path::Path;

use log::info;
use partflow::codec::{encode, CodecError, CodecParams, LatentGrid};
use partflow::flowcore::{cfm_loss_and_grad, interpolate, sample_noise, FlowError, LossWeight};
use partflow::optim::{clip_grad_norm, AdamW, AdamWConfig};
use partflow::partdecode::MAX_CLICKS;
use partflow::segdit::{InitScheme, ModelConfig, ModelError, ModelParams, Task, TaskCondition};
use partflow::shapeforge::{
    make_full_target, make_interactive_target, render_guidance, ShapeError, ShapeRecord, DEFAULT_GUIDANCE_SIZE,
};
use partflow::voxcore::{Palette, VoxError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BundleError, ModelBundle};
use crate::config::{ConfigError, TrainConfig};
use crate::segment::click_prompt;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("codec must be frozen before flow training")]
    CodecNotFrozen,
    #[error("non-finite loss at step {step} ({task:?}, t = {t})")]
    NonFiniteLoss { step: usize, task: Task, t: f64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Vox(#[from] VoxError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("click conversion: {0}")]
    Clicks(String),
}

/// One supervised sample of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub task: Task,
    pub t: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    /// Mean sample loss per optimizer step.
    pub fn step_losses(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.records {
            if out.len() <= r.step {
                out.resize(r.step + 1, (0.0, 0));
            }
            out[r.step].0 += r.loss;
            out[r.step].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    /// Mean loss over the last `window` records of `task`.
    pub fn recent_mean(&self, task: Task, window: usize) -> Option<f64> {
        let xs: Vec<f64> = self.records.iter().rev().filter(|r| r.task == task).take(window).map(|r| r.loss).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Per-shape data reused across steps.
struct Prepared<'a> {
    shape: &'a ShapeRecord,
    z: LatentGrid,
    palettes: Vec<Palette>,
}

/// A drawn training example before noising.
struct Example {
    task: Task,
    cond: TaskCondition,
    y: LatentGrid,
}

fn pick_task(mix: &[f64; 3], rng: &mut ChaCha8Rng) -> Task {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for task in Task::ALL {
        acc += mix[task.index() as usize];
        if u < acc {
            return task;
        }
    }
    // Rounding can leave `u` just above the cumulative sum.
    *Task::ALL.iter().rev().find(|t| mix[t.index() as usize] > 0.0).unwrap_or(&Task::Full)
}

fn draw_example(cfg: &TrainConfig, codec: &CodecParams, p: &Prepared, task: Task, rng: &mut ChaCha8Rng) -> Result<Example, TrainError> {
    let (grid, labels) = (&p.shape.grid, &p.shape.labels);
    let (cond, target) = match task {
        Task::Interactive => {
            let part = rng.random_range(0..labels.num_parts());
            let members: Vec<usize> = (0..grid.len()).filter(|&i| labels.labels()[i] == part).collect();
            let k = rng.random_range(1..=MAX_CLICKS);
            let clicks: Vec<_> = (0..k).map(|_| grid.coords()[members[rng.random_range(0..members.len())]]).collect();
            let prompt = click_prompt(grid, &clicks).map_err(|e| TrainError::Clicks(e.to_string()))?;
            (TaskCondition::Interactive(prompt), make_interactive_target(grid, labels, part)?)
        }
        Task::Full | Task::GuidedFull => {
            let palette = &p.palettes[rng.random_range(0..p.palettes.len())];
            let target = make_full_target(grid, labels, palette)?;
            let cond = if task == Task::Full {
                TaskCondition::Full
            } else {
                let map = render_guidance(grid, &target, cfg.guidance_view, DEFAULT_GUIDANCE_SIZE, DEFAULT_GUIDANCE_SIZE)?;
                TaskCondition::GuidedFull(map)
            };
            (cond, target)
        }
    };
    Ok(Example { task, cond, y: encode(codec, &target)? })
}

/// Trains a fresh flow model from `cfg.seed` against a frozen codec.
pub fn train(cfg: &TrainConfig, model: ModelConfig, shapes: &[ShapeRecord], codec: CodecParams) -> Result<(ModelBundle, TrainLog), TrainError> {
    train_with_checkpoints(cfg, model, shapes, codec, None)
}

/// As [`train`], additionally saving the bundle to `checkpoint_dir` every
/// `cfg.checkpoint_every` steps.
pub fn train_with_checkpoints(
    cfg: &TrainConfig,
    model: ModelConfig,
    shapes: &[ShapeRecord],
    codec: CodecParams,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelBundle, TrainLog), TrainError> {
    if !codec.frozen() {
        return Err(TrainError::CodecNotFrozen);
    }
    if shapes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    cfg.validate()?;
    if model.d_lat != codec.d_lat() {
        return Err(ModelError::DimMismatch { expected: model.d_lat, got: codec.d_lat() }.into());
    }
    let mut flow = ModelParams::init(model, cfg.seed, InitScheme::Standard)?;
    let prepared: Vec<Prepared> = shapes
        .iter()
        .map(|s| Ok(Prepared { shape: s, z: encode(&codec, &s.grid)?, palettes: s.palettes()? }))
        .collect::<Result<_, TrainError>>()?;

    let opt_cfg = AdamWConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg, flow.count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut grads = vec![0.0; flow.count()];
    let mut log = TrainLog::default();
    let weight = LossWeight::Uniform;

    for step in 0..cfg.max_steps {
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut step_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let task = pick_task(&cfg.task_mix, &mut rng);
            let p = &prepared[rng.random_range(0..prepared.len())];
            let ex = draw_example(cfg, &codec, p, task, &mut rng)?;
            let t: f64 = rng.random();
            let eps = sample_noise(&ex.y, rng.random());
            let y_t = interpolate(&ex.y, &eps, t)?;
            let (v_hat, tape) = flow.forward_recorded(&y_t, &p.z, &ex.cond, t)?;
            let (loss, mut adjoint) = cfm_loss_and_grad(&v_hat, &ex.y, &eps, t, &weight)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, task: ex.task, t });
            }
            let scale = 1.0 / cfg.batch_size as f64;
            adjoint.iter_mut().for_each(|a| *a *= scale);
            tape.backward_into(&flow, &adjoint, &mut grads)?;
            step_loss += loss * scale;
            log.records.push(LossRecord { step, task: ex.task, t, loss });
        }
        let norm = if cfg.grad_clip > 0.0 { clip_grad_norm(&mut grads, cfg.grad_clip) } else { 0.0 };
        opt.update_with_lr(flow.as_mut_slice(), &grads, cfg.lr_at(step));
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            info!("step {} loss {:.5} grad-norm {:.3} lr {:.2e}", step + 1, step_loss, norm, cfg.lr_at(step));
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let mut snapshot = flow.clone();
                snapshot.round_to_f32();
                ModelBundle { codec: codec.clone(), flow: snapshot, train: cfg.clone(), step: step + 1 }.save(dir)?;
            }
        }
    }
    // Checkpoints store single precision; round now so the returned bundle
    // behaves exactly like one reloaded from disk.
    flow.round_to_f32();
    Ok((ModelBundle { codec, flow, train: cfg.clone(), step: cfg.max_steps }, log))
}
