//! Latent codec standing in for the frozen sparse-compression VAE.
//!
//! `Identity` keeps one latent cell per voxel whose latent is the voxel color.
//! `Learned` pools each 2x2x2 block into one cell and runs small per-cell
//! encoder/decoder networks; it is a plain autoencoder with no KL term.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::linalg::{linear, linear_backward, Mat};
use crate::optim::{AdamW, AdamWConfig};
use crate::voxcore::{Coord, SparseVoxelGrid, VoxError};

const CODEC_MAGIC: &[u8; 4] = b"CDEC";
const POOLED_FEATURES: usize = 4;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("latent has {got} channels, codec expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("voxel {0:?} maps to an inactive latent cell")]
    CoordOutsideLatentSupport(Coord),
    #[error("codec training diverged at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("invalid latent grid: {0}")]
    InvalidLatent(String),
    #[error("codec training needs at least one grid")]
    EmptyDataset,
    #[error(transparent)]
    Vox(#[from] VoxError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Per-cell latent vectors on the active cells of an `R/stride` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    resolution: u32,
    stride: u32,
    coords: Vec<Coord>,
    dim: usize,
    values: Vec<f64>,
}

impl LatentGrid {
    pub fn new(resolution: u32, stride: u32, coords: Vec<Coord>, dim: usize, values: Vec<f64>) -> Result<Self, CodecError> {
        if coords.is_empty() {
            return Err(CodecError::InvalidLatent("no active cells".into()));
        }
        if values.len() != coords.len() * dim {
            return Err(CodecError::InvalidLatent(format!(
                "{} values for {} cells x {dim} channels",
                values.len(),
                coords.len()
            )));
        }
        if coords.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CodecError::InvalidLatent("cells not sorted and unique".into()));
        }
        if coords.iter().flatten().any(|&v| u32::from(v) >= resolution) {
            return Err(CodecError::InvalidLatent("cell outside grid".into()));
        }
        Ok(Self { resolution, stride, coords, dim, values })
    }

    /// Same support, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self { values, ..self.clone() }
    }

    pub fn zeros_like(&self) -> Self {
        self.with_values(vec![0.0; self.values.len()])
    }

    /// Latent-grid resolution (`voxel resolution / stride`).
    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn voxel_resolution(&self) -> u32 {
        self.resolution * self.stride
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn same_support(&self, other: &LatentGrid) -> bool {
        self.resolution == other.resolution && self.stride == other.stride && self.dim == other.dim && self.coords == other.coords
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecMode {
    Identity,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct CodecHeader {
    mode: CodecMode,
    d_lat: usize,
    stride: u32,
    hidden: usize,
    frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    header: CodecHeader,
    weights: Vec<f64>,
}

struct Slots {
    enc_w1: std::ops::Range<usize>,
    enc_b1: std::ops::Range<usize>,
    enc_w2: std::ops::Range<usize>,
    enc_b2: std::ops::Range<usize>,
    dec_w1: std::ops::Range<usize>,
    dec_b1: std::ops::Range<usize>,
    dec_w2: std::ops::Range<usize>,
    dec_b2: std::ops::Range<usize>,
}

fn slots(d_lat: usize, hidden: usize) -> (Slots, usize) {
    let mut off = 0;
    let mut take = |n: usize| {
        let r = off..off + n;
        off += n;
        r
    };
    let s = Slots {
        enc_w1: take(POOLED_FEATURES * hidden),
        enc_b1: take(hidden),
        enc_w2: take(hidden * d_lat),
        enc_b2: take(d_lat),
        dec_w1: take(d_lat * hidden),
        dec_b1: take(hidden),
        dec_w2: take(hidden * 3),
        dec_b2: take(3),
    };
    (s, off)
}

impl CodecParams {
    pub fn identity() -> Self {
        Self {
            header: CodecHeader { mode: CodecMode::Identity, d_lat: 3, stride: 1, hidden: 0, frozen: true },
            weights: Vec::new(),
        }
    }

    /// Untrained learned codec with stride 2.
    pub fn learned(d_lat: usize, hidden: usize, seed: u64) -> Self {
        let (s, total) = slots(d_lat, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vec![0.0; total];
        for (range, fan_in) in [(s.enc_w1, POOLED_FEATURES), (s.enc_w2, hidden), (s.dec_w1, d_lat), (s.dec_w2, hidden)] {
            let bound = (3.0 / fan_in as f64).sqrt();
            for w in &mut weights[range] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Self { header: CodecHeader { mode: CodecMode::Learned, d_lat, stride: 2, hidden, frozen: false }, weights }
    }

    pub fn mode(&self) -> CodecMode {
        self.header.mode
    }

    pub fn d_lat(&self) -> usize {
        self.header.d_lat
    }

    pub fn stride(&self) -> u32 {
        self.header.stride
    }

    pub fn frozen(&self) -> bool {
        self.header.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.header.frozen = frozen;
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// CRC32 over the mode and parameter bits.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&[self.header.mode as u8]);
        for w in &self.weights {
            h.update(&w.to_le_bytes());
        }
        h.finalize()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        container::write(path, CODEC_MAGIC, &self.header, &self.weights)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        let (header, weights): (CodecHeader, _) = container::read(path, CODEC_MAGIC)?;
        let expected = match header.mode {
            CodecMode::Identity => 0,
            CodecMode::Learned => slots(header.d_lat, header.hidden).1,
        };
        if weights.len() != expected {
            return Err(CodecError::ChannelMismatch { expected, got: weights.len() });
        }
        Ok(Self { header, weights })
    }

    fn encoder_forward(&self, pooled: &Mat) -> (Mat, Mat) {
        let (s, _) = slots(self.header.d_lat, self.header.hidden);
        let w = &self.weights;
        let mut h = linear(pooled, &w[s.enc_w1], Some(&w[s.enc_b1]), self.header.hidden);
        h.data.iter_mut().for_each(|v| *v = v.tanh());
        let z = linear(&h, &w[s.enc_w2], Some(&w[s.enc_b2]), self.header.d_lat);
        (h, z)
    }

    fn decoder_forward(&self, z: &Mat) -> (Mat, Mat) {
        let (s, _) = slots(self.header.d_lat, self.header.hidden);
        let w = &self.weights;
        let mut h = linear(z, &w[s.dec_w1], Some(&w[s.dec_b1]), self.header.hidden);
        h.data.iter_mut().for_each(|v| *v = v.tanh());
        let out = linear(&h, &w[s.dec_w2], Some(&w[s.dec_b2]), 3);
        (h, out)
    }
}

/// Block-pooled inputs for the learned encoder: occupancy fraction and mean color.
struct Pooled {
    cells: Vec<Coord>,
    inputs: Mat,
    /// Canonical voxel index -> cell index.
    membership: Vec<usize>,
    counts: Vec<usize>,
}

fn pool(grid: &SparseVoxelGrid, stride: u32) -> Pooled {
    let s = stride as u16;
    let mut cells: BTreeMap<Coord, ([f64; 3], usize)> = BTreeMap::new();
    for (i, c) in grid.coords().iter().enumerate() {
        let e = cells.entry(c.map(|v| v / s)).or_insert(([0.0; 3], 0));
        let col = grid.color(i);
        for k in 0..3 {
            e.0[k] += f64::from(col[k]);
        }
        e.1 += 1;
    }
    let block = f64::from(stride.pow(3));
    let mut inputs = Mat::zeros(cells.len(), POOLED_FEATURES);
    let mut counts = Vec::with_capacity(cells.len());
    for (r, (sum, n)) in cells.values().enumerate() {
        let row = inputs.row_mut(r);
        row[0] = *n as f64 / block;
        for k in 0..3 {
            row[1 + k] = sum[k] / *n as f64;
        }
        counts.push(*n);
    }
    let cell_coords: Vec<Coord> = cells.into_keys().collect();
    let membership = grid
        .coords()
        .iter()
        .map(|c| cell_coords.binary_search(&c.map(|v| v / s)).unwrap())
        .collect();
    Pooled { cells: cell_coords, inputs, membership, counts }
}

pub fn encode(params: &CodecParams, grid: &SparseVoxelGrid) -> Result<LatentGrid, CodecError> {
    match params.header.mode {
        CodecMode::Identity => {
            let values = grid.colors().iter().flat_map(|c| c.map(f64::from)).collect();
            LatentGrid::new(grid.resolution(), 1, grid.coords().to_vec(), 3, values)
        }
        CodecMode::Learned => {
            let stride = params.header.stride;
            let pooled = pool(grid, stride);
            let (_, z) = params.encoder_forward(&pooled.inputs);
            LatentGrid::new(grid.resolution().div_ceil(stride), stride, pooled.cells, params.header.d_lat, z.data)
        }
    }
}

/// Colors for `target_coords` (the known active voxels), clamped to `[-1, 1]`.
pub fn decode(params: &CodecParams, latent: &LatentGrid, target_coords: &[Coord]) -> Result<SparseVoxelGrid, CodecError> {
    if latent.dim != params.header.d_lat {
        return Err(CodecError::ChannelMismatch { expected: params.header.d_lat, got: latent.dim });
    }
    let s = latent.stride as u16;
    let cell_of = |c: &Coord| latent.coords.binary_search(&c.map(|v| v / s)).map_err(|_| CodecError::CoordOutsideLatentSupport(*c));
    let clamp = |v: f64| v.clamp(-1.0, 1.0) as f32;
    let colors: Vec<[f32; 3]> = match params.header.mode {
        CodecMode::Identity => target_coords
            .iter()
            .map(|c| cell_of(c).map(|i| std::array::from_fn(|k| clamp(latent.cell(i)[k]))))
            .collect::<Result<_, _>>()?,
        CodecMode::Learned => {
            let z = Mat::from_vec(latent.len(), latent.dim, latent.values.clone());
            let (_, out) = params.decoder_forward(&z);
            target_coords
                .iter()
                .map(|c| cell_of(c).map(|i| std::array::from_fn(|k| clamp(out.row(i)[k]))))
                .collect::<Result<_, _>>()?
        }
    };
    Ok(SparseVoxelGrid::from_colors(latent.voxel_resolution(), target_coords.to_vec(), &colors)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub mode: CodecMode,
    pub d_lat: usize,
    pub hidden: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub stop_mse: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { mode: CodecMode::Learned, d_lat: 8, hidden: 32, max_epochs: 2000, learning_rate: 1e-2, stop_mse: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub epochs: usize,
    pub final_mse: f64,
    pub history: Vec<f64>,
}

/// Mean squared color error of `decode(encode(g))` before clamping, over all voxels.
pub fn reconstruction_mse(params: &CodecParams, grids: &[SparseVoxelGrid]) -> Result<f64, CodecError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for g in grids {
        let rec = decode(params, &encode(params, g)?, g.coords())?;
        for i in 0..g.len() {
            let (a, b) = (g.color(i), rec.color(i));
            sum += (0..3).map(|k| (f64::from(a[k]) - f64::from(b[k])).powi(2)).sum::<f64>();
        }
        n += 3 * g.len();
    }
    Ok(sum / n as f64)
}

/// Full-batch AdamW on the reconstruction MSE. Returns frozen parameters.
pub fn train_codec(grids: &[SparseVoxelGrid], cfg: &CodecTrainConfig) -> Result<(CodecParams, CodecTrainReport), CodecError> {
    if cfg.mode == CodecMode::Identity {
        return Ok((CodecParams::identity(), CodecTrainReport { epochs: 0, final_mse: 0.0, history: vec![] }));
    }
    if grids.is_empty() {
        return Err(CodecError::EmptyDataset);
    }
    let mut params = CodecParams::learned(cfg.d_lat, cfg.hidden, cfg.seed);
    let (s, total) = slots(cfg.d_lat, cfg.hidden);

    // Per-cell mean target colors; the within-block variance is a constant offset.
    let pooled: Vec<Pooled> = grids.iter().map(|g| pool(g, params.header.stride)).collect();
    let inputs = pooled.iter().skip(1).fold(pooled[0].inputs.clone(), |acc, p| acc.vstack(&p.inputs));
    let weights_per_cell: Vec<f64> = pooled.iter().flat_map(|p| p.counts.iter().map(|&n| n as f64)).collect();
    let n_vox: usize = grids.iter().map(|g| g.len()).sum();
    let mut floor = 0.0;
    for (g, p) in grids.iter().zip(&pooled) {
        for (i, &cell) in p.membership.iter().enumerate() {
            let m = &p.inputs.row(cell)[1..];
            floor += (0..3).map(|k| (f64::from(g.color(i)[k]) - m[k]).powi(2)).sum::<f64>();
        }
    }
    let denom = 3.0 * n_vox as f64;

    let mut opt = AdamW::new(AdamWConfig { learning_rate: cfg.learning_rate, weight_decay: 0.0, ..Default::default() }, total);
    let mut history = Vec::new();
    let mut epochs = 0;
    let mut mse = f64::INFINITY;
    while epochs < cfg.max_epochs {
        let (h1, z) = params.encoder_forward(&inputs);
        let (h2, out) = params.decoder_forward(&z);
        let mut dout = Mat::zeros(out.rows, 3);
        let mut loss = floor;
        for r in 0..out.rows {
            let n = weights_per_cell[r];
            for k in 0..3 {
                let diff = out.row(r)[k] - inputs.row(r)[1 + k];
                loss += n * diff * diff;
                dout.row_mut(r)[k] = 2.0 * n * diff / denom;
            }
        }
        mse = loss / denom;
        epochs += 1;
        if !mse.is_finite() {
            return Err(CodecError::NonFiniteLoss(epochs));
        }
        history.push(mse);
        if mse < cfg.stop_mse {
            break;
        }

        let w = params.weights.clone();
        let mut grads = vec![0.0; total];
        let mut dh2 = backward_affine(&h2, &w[s.dec_w2.clone()], &dout, &mut grads, &s.dec_w2, &s.dec_b2);
        for (d, h) in dh2.data.iter_mut().zip(&h2.data) {
            *d *= 1.0 - h * h;
        }
        let dz = backward_affine(&z, &w[s.dec_w1.clone()], &dh2, &mut grads, &s.dec_w1, &s.dec_b1);
        let mut dh1 = backward_affine(&h1, &w[s.enc_w2.clone()], &dz, &mut grads, &s.enc_w2, &s.enc_b2);
        for (d, h) in dh1.data.iter_mut().zip(&h1.data) {
            *d *= 1.0 - h * h;
        }
        let (dw, db) = split_pair(&mut grads, &s.enc_w1, &s.enc_b1);
        linear_backward(&inputs, &w[s.enc_w1.clone()], &dh1, dw, Some(db), false);

        opt.update(&mut params.weights, &grads);
    }
    crate::container::round_to_f32(&mut params.weights);
    params.header.frozen = true;
    Ok((params, CodecTrainReport { epochs, final_mse: mse, history }))
}

fn split_pair<'a>(grads: &'a mut [f64], w: &std::ops::Range<usize>, b: &std::ops::Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(w.end, b.start);
    let (head, tail) = grads.split_at_mut(b.start);
    (&mut head[w.clone()], &mut tail[..b.len()])
}

fn backward_affine(x: &Mat, w: &[f64], dy: &Mat, grads: &mut [f64], wr: &std::ops::Range<usize>, br: &std::ops::Range<usize>) -> Mat {
    let (dw, db) = split_pair(grads, wr, br);
    linear_backward(x, w, dy, dw, Some(db), true).unwrap()
}
