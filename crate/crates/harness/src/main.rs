use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use harness::bundle::{ModelBundle, CODEC_FILE};
use harness::config::ExperimentConfig;
use harness::eval::{evaluate, Protocol};
use harness::segment::{click_prompt, FlowSegmenter};
use harness::service::{serve, AppState};
use harness::train::train_with_checkpoints;
use partflow::codec::{train_codec, CodecMode, CodecParams};
use partflow::dataset::{read_split, write_split};
use partflow::partdecode::{decode_full, decode_guided, decode_interactive};
use partflow::segdit::{Task, TaskCondition};
use partflow::shapeforge::{make_full_target, render_guidance, sample_dataset, DEFAULT_GUIDANCE_SIZE};
use partflow::voxcore::{read_grid, sample_palette_default, write_grid, Coord, PartLabeling};

const TRAIN_SPLIT: &str = "train";
const TEST_SPLIT: &str = "test";

#[derive(Parser)]
#[command(name = "partflow", about = "Part segmentation by flow-matched voxel colorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train and test splits.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Held-out shapes written to the test split; defaults to `data.holdout`.
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit and freeze the voxel codec on the train split.
    TrainCodec {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the flow model; writes a checkpoint directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Frozen codec checkpoint; the identity codec is used when omitted.
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Run an evaluation protocol and write a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        protocol: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = TEST_SPLIT)]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Segment one shape file and write the colorized grid.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        /// Shape grid (`.svg1`); guided segmentation needs stored labels.
        #[arg(long)]
        shape: PathBuf,
        #[arg(long)]
        task: String,
        /// Clicks as `x,y,z;x,y,z`.
        #[arg(long, default_value = "")]
        clicks: String,
        #[arg(long, default_value_t = 12)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the HTTP API over a dataset split.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long, default_value = TEST_SPLIT)]
        split: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn parse_clicks(text: &str) -> Result<Vec<Coord>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let v: Vec<u16> = s.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>().with_context(|| format!("bad click {s:?}"))?;
            match v[..] {
                [x, y, z] => Ok([x, y, z]),
                _ => bail!("click {s:?} needs three coordinates"),
            }
        })
        .collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { count, seed, out, holdout, config } => {
            let cfg = load_config(config.as_deref())?;
            let holdout = holdout.unwrap_or(cfg.data.holdout);
            let view = cfg.train.guidance_view;
            write_split(&out, TRAIN_SPLIT, &sample_dataset(count, seed, &cfg.data.gen)?, view)?;
            if holdout > 0 {
                // A distinct stream so the test split never overlaps training shapes.
                write_split(&out, TEST_SPLIT, &sample_dataset(holdout, seed.wrapping_add(1 << 32), &cfg.data.gen)?, view)?;
            }
            log::info!("wrote {count} train and {holdout} test shapes to {}", out.display());
        }
        Command::TrainCodec { data, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let grids: Vec<_> = read_split(&data, TRAIN_SPLIT)?.into_iter().map(|s| s.grid).collect();
            let (codec, report) = train_codec(&grids, &cfg.codec)?;
            codec.save(&out)?;
            log::info!("codec trained for {} epochs, reconstruction mse {:.5}", report.epochs, report.final_mse);
        }
        Command::Train { data, config, out, codec } => {
            let cfg = load_config(config.as_deref())?;
            let shapes = read_split(&data, TRAIN_SPLIT)?;
            let codec = match codec {
                Some(p) => CodecParams::load(p)?,
                None if cfg.codec.mode == CodecMode::Identity => CodecParams::identity(),
                None => {
                    let p = data.join(CODEC_FILE);
                    CodecParams::load(&p).with_context(|| format!("no --codec given and {} unreadable", p.display()))?
                }
            };
            let (bundle, log) = train_with_checkpoints(&cfg.train, cfg.model.clone(), &shapes, codec, Some(&out))?;
            bundle.save(&out)?;
            fs::write(out.join("train_log.json"), serde_json::to_vec(&log)?)?;
            log::info!("saved checkpoint to {}", out.display());
        }
        Command::Eval { ckpt, data, protocol, steps, seed, report, split, config } => {
            let cfg = load_config(config.as_deref())?;
            let protocol: Protocol = protocol.parse()?;
            let bundle = ModelBundle::load(&ckpt)?;
            let shapes = read_split(&data, &split)?;
            let steps = steps.unwrap_or(cfg.eval.steps);
            let seed = seed.unwrap_or(cfg.eval.seed);
            let metrics = evaluate(&bundle, &shapes, protocol, steps, seed, &cfg.eval)?
                .with_source(format!("{}/{split}", data.display()), ckpt.display().to_string());
            fs::write(&report, serde_json::to_vec_pretty(&metrics)?)?;
            println!("{}", metrics.table());
        }
        Command::Segment { ckpt, shape, task, clicks, steps, seed, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let bundle = ModelBundle::load(&ckpt)?;
            let (grid, labels) = read_grid(&shape)?;
            let task: Task = match task.as_str() {
                "guided" => Task::GuidedFull,
                other => other.parse().map_err(anyhow::Error::msg)?,
            };
            let clicks = parse_clicks(&clicks)?;
            // Guided requests render their guidance from a palette drawn with `seed`.
            let palette = match (&labels, task) {
                (Some(l), Task::GuidedFull) => Some(sample_palette_default(l.num_parts() as usize, seed)?),
                (None, Task::GuidedFull) => bail!("guided segmentation needs a labeled shape file"),
                _ => None,
            };
            let cond = match (task, &palette, &labels) {
                (Task::Interactive, _, _) => TaskCondition::Interactive(click_prompt(&grid, &clicks).map_err(anyhow::Error::msg)?),
                (Task::GuidedFull, Some(palette), Some(labels)) => {
                    let target = make_full_target(&grid, labels, palette)?;
                    TaskCondition::GuidedFull(render_guidance(&grid, &target, cfg.eval.guidance_view, DEFAULT_GUIDANCE_SIZE, DEFAULT_GUIDANCE_SIZE)?)
                }
                _ => TaskCondition::Full,
            };
            let colored = FlowSegmenter::new(&bundle, steps).colorize(&grid, &cond, seed).map_err(anyhow::Error::msg)?;
            let predicted = match (task, &palette) {
                (Task::Interactive, _) => PartLabeling::new(decode_interactive(&colored).iter().map(|&m| u32::from(m)).collect())?,
                (Task::GuidedFull, Some(palette)) => decode_guided(&colored, palette),
                _ => decode_full(&colored, cfg.eval.delta_c),
            };
            write_grid(&out, &colored, Some(&predicted))?;
            println!("{} voxels, {} predicted parts", colored.len(), predicted.num_parts());
        }
        Command::Serve { ckpt, data, bind, split, config } => {
            let cfg = load_config(config.as_deref())?;
            let bundle = ModelBundle::load(&ckpt)?;
            let shapes = read_split(&data, &split)?;
            let state = AppState::new(bundle, shapes, cfg.eval);
            tokio::runtime::Runtime::new()?.block_on(serve(state, &bind))?;
        }
    }
    Ok(())
}
