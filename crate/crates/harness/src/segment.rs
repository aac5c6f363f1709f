//! The trained flow model behind the evaluation [`Segmenter`] interface.

use partflow::codec::{decode, encode};
use partflow::flowcore::euler_sample;
use partflow::partdecode::{Segmenter, SegmenterError};
use partflow::segdit::{PointPrompt, TaskCondition};
use partflow::shapeforge::{normalized_center, GuidanceMap};
use partflow::voxcore::{Coord, SparseVoxelGrid};

use crate::bundle::ModelBundle;

/// Colorizes a shape by Euler-sampling the flow model for `steps` steps.
pub struct FlowSegmenter<'a> {
    pub bundle: &'a ModelBundle,
    pub steps: usize,
}

impl<'a> FlowSegmenter<'a> {
    pub fn new(bundle: &'a ModelBundle, steps: usize) -> Self {
        Self { bundle, steps }
    }

    pub fn colorize(&self, grid: &SparseVoxelGrid, cond: &TaskCondition, seed: u64) -> Result<SparseVoxelGrid, SegmenterError> {
        let z = encode(&self.bundle.codec, grid)?;
        let y = euler_sample(&self.bundle.flow, &z, cond, self.steps, seed)?;
        Ok(decode(&self.bundle.codec, &y, grid.coords())?)
    }
}

/// Click coordinates as normalized voxel centers.
pub fn click_prompt(grid: &SparseVoxelGrid, clicks: &[Coord]) -> Result<PointPrompt, SegmenterError> {
    Ok(PointPrompt::new(clicks.iter().map(|&c| normalized_center(c, grid.resolution())).collect())?)
}

impl Segmenter for FlowSegmenter<'_> {
    fn interactive(&self, grid: &SparseVoxelGrid, clicks: &[Coord], seed: u64) -> Result<SparseVoxelGrid, SegmenterError> {
        self.colorize(grid, &TaskCondition::Interactive(click_prompt(grid, clicks)?), seed)
    }

    fn full(&self, grid: &SparseVoxelGrid, seed: u64) -> Result<SparseVoxelGrid, SegmenterError> {
        self.colorize(grid, &TaskCondition::Full, seed)
    }

    fn guided(&self, grid: &SparseVoxelGrid, guidance: &GuidanceMap, seed: u64) -> Result<SparseVoxelGrid, SegmenterError> {
        self.colorize(grid, &TaskCondition::GuidedFull(guidance.clone()), seed)
    }
}
