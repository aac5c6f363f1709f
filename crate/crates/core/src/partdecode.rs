//! Turning generated colors back into part masks, plus the evaluation
//! protocols: simulated-click IoU@k and matched full-segmentation IoU.

use std::collections::{HashMap, VecDeque};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shapeforge::{make_full_target, render_guidance, GuidanceMap, ShapeError, ShapeRecord, View, DEFAULT_GUIDANCE_SIZE};
use crate::voxcore::{color_distance, Coord, Palette, PartLabeling, SparseVoxelGrid, VoxError};

pub const DEFAULT_DELTA_C: f64 = 0.3;
pub const CLICK_COUNTS: [usize; 5] = [1, 3, 5, 7, 10];
pub const MAX_CLICKS: usize = 10;

pub type BinaryMask = Vec<bool>;
pub type SegmenterError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("mask lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("labelings cover different grids")]
    GridMismatch,
    #[error("part {0} does not exist")]
    UnknownPart(u32),
    #[error("max_clicks must be in 1..=10, got {0}")]
    BadClickCount(usize),
    #[error("click counts must be drawn from 1, 3, 5, 7, 10; got {0:?}")]
    BadClickSet(Vec<usize>),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("segmenter returned colors on a different support")]
    SupportMismatch,
    #[error("segmenter failed: {0}")]
    Segmenter(#[source] SegmenterError),
    #[error(transparent)]
    Vox(#[from] VoxError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

pub fn iou(a: &[bool], b: &[bool]) -> Result<f64, DecodeError> {
    if a.len() != b.len() {
        return Err(DecodeError::LengthMismatch(a.len(), b.len()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground where the mean color channel is positive.
pub fn decode_interactive(colored: &SparseVoxelGrid) -> BinaryMask {
    colored.colors().iter().map(|c| (c[0] + c[1] + c[2]) / 3.0 > 0.0).collect()
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Single-linkage clustering of voxel colors: two voxels share a part when
/// they are connected by a chain of colors closer than `delta_c`.
pub fn decode_full(colored: &SparseVoxelGrid, delta_c: f64) -> PartLabeling {
    let colors = colored.colors();
    let mut uf = UnionFind::new(colors.len());
    let cell = |c: &[f32; 3]| c.map(|v| (f64::from(v) / delta_c).floor() as i64);
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, c) in colors.iter().enumerate() {
        buckets.entry(cell(c)).or_default().push(i);
    }
    for (i, c) in colors.iter().enumerate() {
        let k = cell(c);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(members) = buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else { continue };
                    for &j in members.iter().filter(|&&j| j > i) {
                        if color_distance(c, &colors[j]) < delta_c {
                            uf.union(i, j);
                        }
                    }
                }
            }
        }
    }
    let roots: Vec<usize> = (0..colors.len()).map(|i| uf.find(i)).collect();
    PartLabeling::compacted(&roots).expect("one label per voxel")
}

/// Snaps each voxel to its nearest palette color (lowest index on ties).
pub fn decode_guided(colored: &SparseVoxelGrid, palette: &Palette) -> PartLabeling {
    let nearest: Vec<usize> = colored
        .colors()
        .iter()
        .map(|c| {
            let mut best = (f64::INFINITY, 0);
            for (j, p) in palette.colors().iter().enumerate() {
                let d = color_distance(c, p);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect();
    PartLabeling::compacted(&nearest).expect("one label per voxel")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(predicted part, ground-truth part)` pairs; injective in both columns.
    pub assignment: Vec<(u32, u32)>,
    pub per_pair_iou: Vec<f64>,
    pub mean_iou: f64,
}

/// Minimum-cost perfect assignment on an `n x n` matrix; returns the column
/// chosen for each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // Potentials-based O(n^3) Kuhn-Munkres with 1-based sentinels.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

/// IoU between every predicted part (rows) and ground-truth part (columns).
pub fn iou_matrix(pred: &PartLabeling, gt: &PartLabeling) -> Result<Vec<Vec<f64>>, DecodeError> {
    if pred.len() != gt.len() {
        return Err(DecodeError::GridMismatch);
    }
    let (np, ng) = (pred.num_parts() as usize, gt.num_parts() as usize);
    let mut inter = vec![vec![0usize; ng]; np];
    let mut size_p = vec![0usize; np];
    let mut size_g = vec![0usize; ng];
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        inter[a as usize][b as usize] += 1;
        size_p[a as usize] += 1;
        size_g[b as usize] += 1;
    }
    Ok((0..np)
        .map(|i| {
            (0..ng)
                .map(|j| {
                    let union = size_p[i] + size_g[j] - inter[i][j];
                    if union == 0 { 1.0 } else { inter[i][j] as f64 / union as f64 }
                })
                .collect()
        })
        .collect())
}

/// Optimal one-to-one matching maximizing summed IoU; unmatched ground-truth
/// parts score zero in the mean.
pub fn match_parts(pred: &PartLabeling, gt: &PartLabeling) -> Result<MatchResult, DecodeError> {
    let m = iou_matrix(pred, gt)?;
    let (np, ng) = (pred.num_parts() as usize, gt.num_parts() as usize);
    let n = np.max(ng);
    let cost: Vec<Vec<f64>> =
        (0..n).map(|i| (0..n).map(|j| if i < np && j < ng { -m[i][j] } else { 0.0 }).collect()).collect();
    let cols = hungarian(&cost);
    let mut assignment = Vec::new();
    let mut per_pair_iou = Vec::new();
    for (i, &j) in cols.iter().enumerate().take(np) {
        if j < ng {
            assignment.push((i as u32, j as u32));
            per_pair_iou.push(m[i][j]);
        }
    }
    let mean_iou = if ng == 0 { 1.0 } else { per_pair_iou.iter().sum::<f64>() / ng as f64 };
    Ok(MatchResult { assignment, per_pair_iou, mean_iou })
}

/// Inference backend driven by the evaluation protocols. Implementations own
/// their sampler settings (step count, model); `seed` fixes the noise.
pub trait Segmenter {
    fn interactive(&self, grid: &SparseVoxelGrid, clicks: &[Coord], seed: u64) -> Result<SparseVoxelGrid, SegmenterError>;
    fn full(&self, grid: &SparseVoxelGrid, seed: u64) -> Result<SparseVoxelGrid, SegmenterError>;
    fn guided(&self, grid: &SparseVoxelGrid, guidance: &GuidanceMap, seed: u64) -> Result<SparseVoxelGrid, SegmenterError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClickPolicy {
    /// Deepest voxel of the false-negative region by 6-connected distance.
    #[default]
    Interior,
    /// Uniformly random voxel of the false-negative region.
    Random,
}

impl std::str::FromStr for ClickPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interior" => Ok(Self::Interior),
            "random" => Ok(Self::Random),
            _ => Err(format!("unknown click policy {s:?}")),
        }
    }
}

const NEIGHBORS: [[i32; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

fn neighbor(grid: &SparseVoxelGrid, c: Coord, d: [i32; 3]) -> Option<usize> {
    let r = grid.resolution() as i32;
    let mut out = [0u16; 3];
    for a in 0..3 {
        let v = i32::from(c[a]) + d[a];
        if !(0..r).contains(&v) {
            return None;
        }
        out[a] = v as u16;
    }
    grid.index_of(out)
}

/// 6-connected distance from each region voxel to the region boundary
/// (voxels with a face neighbor outside the region have distance 1);
/// `None` outside the region.
pub fn boundary_distance(grid: &SparseVoxelGrid, region: &[bool]) -> Vec<Option<u32>> {
    let mut dist = vec![None; region.len()];
    let mut queue = VecDeque::new();
    for (i, &inside) in region.iter().enumerate() {
        if inside && NEIGHBORS.iter().any(|&d| neighbor(grid, grid.coords()[i], d).is_none_or(|j| !region[j])) {
            dist[i] = Some(1);
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let next = dist[i].unwrap() + 1;
        for d in NEIGHBORS {
            if let Some(j) = neighbor(grid, grid.coords()[i], d) {
                if region[j] && dist[j].is_none() {
                    dist[j] = Some(next);
                    queue.push_back(j);
                }
            }
        }
    }
    dist
}

fn pick(grid: &SparseVoxelGrid, region: &[bool], policy: ClickPolicy, rng: &mut ChaCha8Rng) -> Option<usize> {
    match policy {
        ClickPolicy::Interior => {
            let dist = boundary_distance(grid, region);
            let mut best: Option<(u32, usize)> = None;
            for (i, d) in dist.iter().enumerate() {
                if let Some(d) = *d {
                    if best.is_none_or(|(bd, _)| d > bd) {
                        best = Some((d, i));
                    }
                }
            }
            best.map(|(_, i)| i)
        }
        ClickPolicy::Random => {
            let members: Vec<usize> = (0..region.len()).filter(|&i| region[i]).collect();
            (!members.is_empty()).then(|| members[rng.random_range(0..members.len())])
        }
    }
}

/// Clicks placed and the IoU after each one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickTrace {
    pub clicks: Vec<Coord>,
    pub ious: Vec<f64>,
}

/// Simulates up to `max_clicks` positive clicks on one part. Each click after
/// the first targets the false-negative region of the previous prediction,
/// skipping voxels already clicked; when that is exhausted it falls back to
/// any unclicked voxel of the part, then to repeating the first click.
pub fn simulate_clicks<S: Segmenter + ?Sized>(
    seg: &S,
    grid: &SparseVoxelGrid,
    gt: &PartLabeling,
    part: u32,
    max_clicks: usize,
    policy: ClickPolicy,
    seed: u64,
) -> Result<ClickTrace, DecodeError> {
    if !(1..=MAX_CLICKS).contains(&max_clicks) {
        return Err(DecodeError::BadClickCount(max_clicks));
    }
    gt.check_grid(grid)?;
    if part >= gt.num_parts() || gt.part_size(part) == 0 {
        return Err(DecodeError::UnknownPart(part));
    }
    let truth = gt.mask(part);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clicked = vec![false; truth.len()];
    let mut clicks = Vec::with_capacity(max_clicks);
    let mut ious = Vec::with_capacity(max_clicks);
    let mut pred: Option<BinaryMask> = None;
    for k in 0..max_clicks {
        let unclicked: Vec<bool> = truth.iter().zip(&clicked).map(|(&t, &c)| t && !c).collect();
        let fn_region: Vec<bool> = match &pred {
            None => truth.clone(),
            Some(p) => unclicked.iter().zip(p).map(|(&u, &p)| u && !p).collect(),
        };
        let idx = pick(grid, &fn_region, policy, &mut rng)
            .or_else(|| pick(grid, &unclicked, policy, &mut rng))
            .unwrap_or_else(|| grid.index_of(clicks[0]).expect("first click is active"));
        clicked[idx] = true;
        clicks.push(grid.coords()[idx]);
        let colored = seg.interactive(grid, &clicks, seed.wrapping_add(k as u64)).map_err(DecodeError::Segmenter)?;
        if !colored.same_support(grid) {
            return Err(DecodeError::SupportMismatch);
        }
        let mask = decode_interactive(&colored);
        ious.push(iou(&mask, &truth)?);
        pred = Some(mask);
    }
    Ok(ClickTrace { clicks, ious })
}

fn part_seed(seed: u64, shape: usize, part: u32) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add((shape as u64) << 8).wrapping_add(u64::from(part))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeClickResult {
    pub id: String,
    /// Mean IoU over parts after `k` clicks, indexed by `k - 1`.
    pub mean_iou_by_click: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouAtReport {
    /// `(N, mean IoU@N in percent)` over all parts of all shapes.
    pub iou_at: Vec<(usize, f64)>,
    pub per_shape: Vec<ShapeClickResult>,
}

/// Mean IoU@N (percent) over every part of every shape.
pub fn iou_at_n_report<S: Segmenter + ?Sized>(
    seg: &S,
    shapes: &[ShapeRecord],
    counts: &[usize],
    policy: ClickPolicy,
    seed: u64,
) -> Result<IouAtReport, DecodeError> {
    if shapes.is_empty() {
        return Err(DecodeError::EmptyDataset);
    }
    if counts.is_empty() || counts.iter().any(|n| !CLICK_COUNTS.contains(n)) {
        return Err(DecodeError::BadClickSet(counts.to_vec()));
    }
    let max_clicks = *counts.iter().max().unwrap();
    let mut totals = vec![0.0; max_clicks];
    let mut parts = 0usize;
    let mut per_shape = Vec::with_capacity(shapes.len());
    for (s, shape) in shapes.iter().enumerate() {
        let start = Instant::now();
        let mut sums = vec![0.0; max_clicks];
        for part in 0..shape.labels.num_parts() {
            let trace = simulate_clicks(seg, &shape.grid, &shape.labels, part, max_clicks, policy, part_seed(seed, s, part))?;
            for (acc, v) in sums.iter_mut().zip(&trace.ious) {
                *acc += v;
            }
        }
        let np = f64::from(shape.labels.num_parts());
        for (t, v) in totals.iter_mut().zip(&sums) {
            *t += v;
        }
        parts += shape.labels.num_parts() as usize;
        per_shape.push(ShapeClickResult {
            id: shape.id.clone(),
            mean_iou_by_click: sums.iter().map(|v| v / np).collect(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let iou_at = sorted.into_iter().map(|n| (n, 100.0 * totals[n - 1] / parts as f64)).collect();
    Ok(IouAtReport { iou_at, per_shape })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeFullResult {
    pub id: String,
    pub predicted_parts: u32,
    pub iou: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    /// Mean matched IoU in percent.
    pub full_iou: f64,
    pub per_shape: Vec<ShapeFullResult>,
}

fn full_report_with<F>(shapes: &[ShapeRecord], mut segment: F) -> Result<FullReport, DecodeError>
where
    F: FnMut(usize, &ShapeRecord) -> Result<PartLabeling, DecodeError>,
{
    if shapes.is_empty() {
        return Err(DecodeError::EmptyDataset);
    }
    let mut per_shape = Vec::with_capacity(shapes.len());
    for (s, shape) in shapes.iter().enumerate() {
        let start = Instant::now();
        let pred = segment(s, shape)?;
        let m = match_parts(&pred, &shape.labels)?;
        per_shape.push(ShapeFullResult {
            id: shape.id.clone(),
            predicted_parts: pred.num_parts(),
            iou: m.mean_iou,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let full_iou = 100.0 * per_shape.iter().map(|r| r.iou).sum::<f64>() / per_shape.len() as f64;
    Ok(FullReport { full_iou, per_shape })
}

fn checked(grid: &SparseVoxelGrid, colored: SparseVoxelGrid) -> Result<SparseVoxelGrid, DecodeError> {
    if colored.same_support(grid) {
        Ok(colored)
    } else {
        Err(DecodeError::SupportMismatch)
    }
}

/// Unguided full segmentation decoded by color clustering.
pub fn full_report<S: Segmenter + ?Sized>(seg: &S, shapes: &[ShapeRecord], delta_c: f64, seed: u64) -> Result<FullReport, DecodeError> {
    full_report_with(shapes, |s, shape| {
        let colored = checked(&shape.grid, seg.full(&shape.grid, part_seed(seed, s, 0)).map_err(DecodeError::Segmenter)?)?;
        Ok(decode_full(&colored, delta_c))
    })
}

/// Guided full segmentation: the guidance map is rendered from the
/// ground-truth target in the shape's first palette, and predictions are
/// snapped to that palette.
pub fn guided_report<S: Segmenter + ?Sized>(seg: &S, shapes: &[ShapeRecord], view: View, seed: u64) -> Result<FullReport, DecodeError> {
    full_report_with(shapes, |s, shape| {
        let palette = shape.palettes()?.swap_remove(0);
        let target = make_full_target(&shape.grid, &shape.labels, &palette)?;
        let map = render_guidance(&shape.grid, &target, view, DEFAULT_GUIDANCE_SIZE, DEFAULT_GUIDANCE_SIZE)?;
        let colored = checked(&shape.grid, seg.guided(&shape.grid, &map, part_seed(seed, s, 0)).map_err(DecodeError::Segmenter)?)?;
        Ok(decode_guided(&colored, &palette))
    })
}
