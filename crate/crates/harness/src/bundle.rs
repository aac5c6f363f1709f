//! A trained checkpoint: frozen codec plus flow parameters.

use std::fs;
use std::path::Path;

use partflow::codec::{CodecError, CodecParams};
use partflow::segdit::{ModelError, ModelParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TrainConfig;

pub const FLOW_FILE: &str = "flow.ckpt";
pub const CODEC_FILE: &str = "codec.ckpt";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("codec in bundle is not frozen")]
    CodecNotFrozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub codec: CodecParams,
    pub flow: ModelParams,
    /// Echo of the training configuration, including optimizer settings.
    pub train: TrainConfig,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct FlowExtra {
    train: TrainConfig,
    step: usize,
}

impl ModelBundle {
    /// Writes `flow.ckpt` and `codec.ckpt` into `dir`, creating it if needed.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), BundleError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.codec.save(dir.join(CODEC_FILE))?;
        self.flow.save(dir.join(FLOW_FILE), &FlowExtra { train: self.train.clone(), step: self.step })?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, BundleError> {
        let dir = dir.as_ref();
        let codec = CodecParams::load(dir.join(CODEC_FILE))?;
        if !codec.frozen() {
            return Err(BundleError::CodecNotFrozen);
        }
        let (flow, extra) = ModelParams::load(dir.join(FLOW_FILE))?;
        let extra: FlowExtra = serde_json::from_value(extra)?;
        Ok(Self { codec, flow, train: extra.train, step: extra.step })
    }
}
