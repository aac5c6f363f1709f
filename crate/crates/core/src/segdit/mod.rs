//! Conditional velocity transformer over sparse latent grids.
//!
//! Voxel tokens carry `[z ‖ y_t]`, up to ten point tokens carry clicks, and a
//! rendered guidance image enters through cross-attention. The timestep and
//! task embeddings are summed into one vector that drives adaptive layer-norm
//! modulation in every block. Forward and backward passes are hand-written so
//! training needs no autodiff framework.

mod attention;
mod embed;
mod model;
mod params;
mod rope;

use thiserror::Error;

pub use embed::{
    build_point_tokens, encode_guidance, explicit_coord_tokens, fuse_modulation, guidance_patches, point_frequencies,
    sinusoidal, task_embedding, timestep_embedding,
};
pub use model::Tape;
pub use params::{BlockSlots, InitScheme, Layout, ModelConfig, ModelParams, PointEmbed, Slot};

use crate::container::ContainerError;
use crate::shapeforge::GuidanceMap;

/// Maximum number of point tokens; shorter prompts are zero-padded.
pub const MAX_POINTS: usize = 10;
pub const POINT_OCTAVES: usize = 6;
pub const POINT_FREQ_DIM: usize = 3 * 2 * POINT_OCTAVES;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{0} points given, at most {MAX_POINTS} supported")]
    TooManyPoints(usize),
    #[error("point {0:?} outside the unit cube")]
    PointOutOfRange([f64; 3]),
    #[error("unknown task index {0}")]
    UnknownTask(u32),
    #[error("expected {expected} latent channels, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("noisy target and condition latents have different supports")]
    CoordMismatch,
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("backward called without a recorded forward pass")]
    NoRecordedForward,
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Interactive,
    Full,
    GuidedFull,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Interactive, Task::Full, Task::GuidedFull];

    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn from_index(i: u32) -> Result<Self, ModelError> {
        Self::ALL.get(i as usize).copied().ok_or(ModelError::UnknownTask(i))
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Interactive => "interactive",
            Task::Full => "full",
            Task::GuidedFull => "guided_full",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown task {s:?}"))
    }
}

/// Click positions in normalized voxel space `[0, 1]^3`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointPrompt {
    pub points: Vec<[f64; 3]>,
}

impl PointPrompt {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, ModelError> {
        if points.len() > MAX_POINTS {
            return Err(ModelError::TooManyPoints(points.len()));
        }
        if let Some(p) = points.iter().find(|p| p.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(ModelError::PointOutOfRange(*p));
        }
        Ok(Self { points })
    }
}

/// The ten point tokens: click coordinates (zero when padded), their
/// pre-projection features and a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTokens {
    pub coords: [[f64; 3]; MAX_POINTS],
    /// `MAX_POINTS x d_model`, row-major.
    pub features: Vec<f64>,
    pub valid: [bool; MAX_POINTS],
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskCondition {
    Interactive(PointPrompt),
    Full,
    GuidedFull(GuidanceMap),
}

impl TaskCondition {
    pub fn task(&self) -> Task {
        match self {
            TaskCondition::Interactive(_) => Task::Interactive,
            TaskCondition::Full => Task::Full,
            TaskCondition::GuidedFull(_) => Task::GuidedFull,
        }
    }
}
