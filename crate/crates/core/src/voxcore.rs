//! Sparse voxel grids, part labelings, color palettes and the `SVG1` file format.
//!
//! A grid stores its active voxels in lexicographic coordinate order. Every
//! other module relies on that order: losses, metrics, labelings and the
//! on-disk encoding all index voxels by their canonical position.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Integer voxel coordinate `(i, j, k)`.
pub type Coord = [u16; 3];

/// Occupancy channel followed by three color channels.
pub const FEATURE_CHANNELS: usize = 4;

pub const WHITE: [f32; 3] = [1.0, 1.0, 1.0];
pub const BLACK: [f32; 3] = [-1.0, -1.0, -1.0];

/// Default minimum pairwise separation of palette colors.
pub const DEFAULT_PALETTE_SEPARATION: f64 = 0.6;

const PALETTE_DRAW_BUDGET: usize = 10_000;

const GRID_MAGIC: &[u8; 4] = b"SVGF";
const GRID_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VoxError {
    #[error("grid has no active voxels")]
    EmptyGrid,
    #[error("duplicate voxel at {0:?}")]
    DuplicateVoxel(Coord),
    #[error("voxel {coord:?} outside a {resolution}^3 grid")]
    OutOfBounds { coord: Coord, resolution: u32 },
    #[error("channel value {value} out of range at voxel {index}")]
    ChannelRange { index: usize, value: f32 },
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid labeling: {0}")]
    InvalidLabeling(String),
    #[error("no palette with {num_parts} colors at separation {min_separation} within {PALETTE_DRAW_BUDGET} draws")]
    PaletteInfeasible { num_parts: usize, min_separation: f64 },
    #[error("unsupported grid format (bad magic or version)")]
    FormatVersionMismatch,
    #[error("corrupt grid payload: {0}")]
    CorruptPayload(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Active voxels of an `R x R x R` grid with one feature vector per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    resolution: u32,
    coords: Vec<Coord>,
    features: Vec<[f32; FEATURE_CHANNELS]>,
}

impl SparseVoxelGrid {
    /// Validates and canonicalizes (sorts) the voxel list.
    pub fn new(
        resolution: u32,
        coords: Vec<Coord>,
        features: Vec<[f32; FEATURE_CHANNELS]>,
    ) -> Result<Self, VoxError> {
        if coords.is_empty() {
            return Err(VoxError::EmptyGrid);
        }
        if coords.len() != features.len() {
            return Err(VoxError::LengthMismatch { expected: coords.len(), got: features.len() });
        }
        for c in &coords {
            if c.iter().any(|&v| u32::from(v) >= resolution) {
                return Err(VoxError::OutOfBounds { coord: *c, resolution });
            }
        }
        for (index, f) in features.iter().enumerate() {
            for &value in &f[1..] {
                if !(-1.0..=1.0).contains(&value) {
                    return Err(VoxError::ChannelRange { index, value });
                }
            }
            if !f[0].is_finite() {
                return Err(VoxError::ChannelRange { index, value: f[0] });
            }
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| coords[i]);
        for w in order.windows(2) {
            if coords[w[0]] == coords[w[1]] {
                return Err(VoxError::DuplicateVoxel(coords[w[0]]));
            }
        }
        let coords_sorted = order.iter().map(|&i| coords[i]).collect();
        let features_sorted = order.iter().map(|&i| features[i]).collect();
        Ok(Self { resolution, coords: coords_sorted, features: features_sorted })
    }

    /// Grid with occupancy 1 and the given colors.
    pub fn from_colors(resolution: u32, coords: Vec<Coord>, colors: &[[f32; 3]]) -> Result<Self, VoxError> {
        let features = colors.iter().map(|c| [1.0, c[0], c[1], c[2]]).collect();
        Self::new(resolution, coords, features)
    }

    pub fn resolution(&self) -> u32 {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn features(&self) -> &[[f32; FEATURE_CHANNELS]] {
        &self.features
    }

    pub fn color(&self, index: usize) -> [f32; 3] {
        let f = &self.features[index];
        [f[1], f[2], f[3]]
    }

    pub fn colors(&self) -> Vec<[f32; 3]> {
        (0..self.len()).map(|i| self.color(i)).collect()
    }

    /// Canonical index of a voxel, if active.
    pub fn index_of(&self, coord: Coord) -> Option<usize> {
        self.coords.binary_search(&coord).ok()
    }

    /// Same voxels, new colors (aligned with canonical order).
    pub fn with_colors(&self, colors: &[[f32; 3]]) -> Result<Self, VoxError> {
        if colors.len() != self.len() {
            return Err(VoxError::LengthMismatch { expected: self.len(), got: colors.len() });
        }
        let mut features = self.features.clone();
        for (index, (f, c)) in features.iter_mut().zip(colors).enumerate() {
            for (dst, &value) in f[1..].iter_mut().zip(c) {
                if !(-1.0..=1.0).contains(&value) {
                    return Err(VoxError::ChannelRange { index, value });
                }
                *dst = value;
            }
        }
        Ok(Self { resolution: self.resolution, coords: self.coords.clone(), features })
    }

    pub fn same_support(&self, other: &SparseVoxelGrid) -> bool {
        self.resolution == other.resolution && self.coords == other.coords
    }
}

/// One part id per active voxel, contiguous in `0..num_parts`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartLabeling {
    labels: Vec<u32>,
    num_parts: u32,
}

impl PartLabeling {
    /// Requires every id in `0..max+1` to occur.
    pub fn new(labels: Vec<u32>) -> Result<Self, VoxError> {
        let Some(&max) = labels.iter().max() else {
            return Err(VoxError::InvalidLabeling("empty labeling".into()));
        };
        let num_parts = max + 1;
        let mut seen = vec![false; num_parts as usize];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(VoxError::InvalidLabeling(format!("part {missing} never occurs")));
        }
        Ok(Self { labels, num_parts })
    }

    /// Renumbers arbitrary ids to `0..P` in order of first occurrence.
    pub fn compacted<T: Copy + Eq + std::hash::Hash>(raw: &[T]) -> Result<Self, VoxError> {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|v| {
                let next = map.len() as u32;
                *map.entry(*v).or_insert(next)
            })
            .collect();
        Self::new(labels)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_parts(&self) -> u32 {
        self.num_parts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mask(&self, part: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == part).collect()
    }

    pub fn part_size(&self, part: u32) -> usize {
        self.labels.iter().filter(|&&l| l == part).count()
    }

    pub fn check_grid(&self, grid: &SparseVoxelGrid) -> Result<(), VoxError> {
        if self.len() != grid.len() {
            return Err(VoxError::LengthMismatch { expected: grid.len(), got: self.len() });
        }
        Ok(())
    }
}

/// Part colors with a guaranteed minimum pairwise distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    colors: Vec<[f32; 3]>,
    min_separation: f64,
}

impl Palette {
    pub fn new(colors: Vec<[f32; 3]>, min_separation: f64) -> Result<Self, VoxError> {
        for (i, a) in colors.iter().enumerate() {
            if a.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(VoxError::ChannelRange { index: i, value: a[0] });
            }
            for b in &colors[..i] {
                if color_distance(a, b) < min_separation || a == b {
                    return Err(VoxError::InvalidLabeling(format!(
                        "palette colors {i} closer than {min_separation}"
                    )));
                }
            }
        }
        Ok(Self { colors, min_separation })
    }

    pub fn colors(&self) -> &[[f32; 3]] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn min_separation(&self) -> f64 {
        self.min_separation
    }
}

pub fn color_distance(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Rejection-samples `num_parts` uniform colors in `[-1, 1]^3`.
pub fn sample_palette(num_parts: usize, seed: u64, min_separation: f64) -> Result<Palette, VoxError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colors: Vec<[f32; 3]> = Vec::with_capacity(num_parts);
    let mut draws = 0;
    while colors.len() < num_parts {
        if draws == PALETTE_DRAW_BUDGET {
            return Err(VoxError::PaletteInfeasible { num_parts, min_separation });
        }
        draws += 1;
        let c: [f32; 3] = std::array::from_fn(|_| rng.random_range(-1.0f32..=1.0));
        if colors.iter().all(|o| color_distance(o, &c) >= min_separation && *o != c) {
            colors.push(c);
        }
    }
    Ok(Palette { colors, min_separation })
}

/// Starts at the default separation and halves it on each infeasible attempt.
pub fn sample_palette_default(num_parts: usize, seed: u64) -> Result<Palette, VoxError> {
    let mut sep = DEFAULT_PALETTE_SEPARATION;
    loop {
        match sample_palette(num_parts, seed, sep) {
            Err(VoxError::PaletteInfeasible { .. }) if sep > 1e-6 => sep /= 2.0,
            other => return other,
        }
    }
}

/// Serializes a grid (and optional labels) to `SVG1` bytes.
pub fn encode_grid(grid: &SparseVoxelGrid, labels: Option<&PartLabeling>) -> Result<Vec<u8>, VoxError> {
    if let Some(l) = labels {
        l.check_grid(grid)?;
    }
    let n = grid.len();
    let mut out = Vec::with_capacity(25 + n * (6 + 16 + 4) + 4);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.extend_from_slice(&grid.resolution.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_CHANNELS as u32).to_le_bytes());
    out.push(u8::from(labels.is_some()));
    for c in &grid.coords {
        for v in c {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for f in &grid.features {
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(l) = labels {
        for v in &l.labels {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VoxError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| VoxError::CorruptPayload("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, VoxError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, VoxError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, VoxError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, VoxError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_grid(bytes: &[u8]) -> Result<(SparseVoxelGrid, Option<PartLabeling>), VoxError> {
    if bytes.len() < 8 || &bytes[..4] != GRID_MAGIC {
        return Err(VoxError::FormatVersionMismatch);
    }
    if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != GRID_VERSION {
        return Err(VoxError::FormatVersionMismatch);
    }
    if bytes.len() < 12 {
        return Err(VoxError::CorruptPayload("truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(VoxError::CorruptPayload("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let resolution = r.u32()?;
    let n = r.u32()? as usize;
    let channels = r.u32()? as usize;
    if channels != FEATURE_CHANNELS {
        return Err(VoxError::CorruptPayload(format!("unsupported channel count {channels}")));
    }
    let has_labels = r.u8()? != 0;
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push([r.u16()?, r.u16()?, r.u16()?]);
    }
    let mut features = Vec::with_capacity(n);
    for _ in 0..n {
        features.push([r.f32()?, r.f32()?, r.f32()?, r.f32()?]);
    }
    let labels = if has_labels {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(r.u32()?);
        }
        Some(l)
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(VoxError::CorruptPayload("trailing bytes".into()));
    }
    if coords.windows(2).any(|w| w[0] >= w[1]) {
        return Err(VoxError::CorruptPayload("coordinates not in canonical order".into()));
    }
    let grid = SparseVoxelGrid::new(resolution, coords, features)?;
    let labels = labels.map(PartLabeling::new).transpose()?;
    Ok((grid, labels))
}

pub fn write_grid(path: impl AsRef<Path>, grid: &SparseVoxelGrid, labels: Option<&PartLabeling>) -> Result<(), VoxError> {
    fs::write(path, encode_grid(grid, labels)?)?;
    Ok(())
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<(SparseVoxelGrid, Option<PartLabeling>), VoxError> {
    decode_grid(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_voxel() -> SparseVoxelGrid {
        SparseVoxelGrid::new(32, vec![[0, 0, 0]], vec![[1.0, 0.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn minimal_grid() {
        assert_eq!(one_voxel().len(), 1);
    }

    #[test]
    fn unsorted_input_is_canonicalized() {
        let g = SparseVoxelGrid::new(
            4,
            vec![[1, 0, 0], [0, 0, 0]],
            vec![[1.0, 0.5, 0.5, 0.5], [1.0, -0.5, -0.5, -0.5]],
        )
        .unwrap();
        assert_eq!(g.coords(), &[[0, 0, 0], [1, 0, 0]]);
        assert_eq!(g.color(0), [-0.5; 3]);
        assert_eq!(g.color(1), [0.5; 3]);
    }

    #[test]
    fn construction_errors() {
        let f = [1.0, 0.0, 0.0, 0.0];
        assert!(matches!(
            SparseVoxelGrid::new(4, vec![[0, 0, 0], [0, 0, 0]], vec![f, f]),
            Err(VoxError::DuplicateVoxel(_))
        ));
        assert!(matches!(SparseVoxelGrid::new(4, vec![], vec![]), Err(VoxError::EmptyGrid)));
        assert!(matches!(
            SparseVoxelGrid::new(4, vec![[4, 0, 0]], vec![f]),
            Err(VoxError::OutOfBounds { .. })
        ));
        assert!(matches!(
            SparseVoxelGrid::new(4, vec![[0, 0, 0]], vec![[1.0, 1.5, 0.0, 0.0]]),
            Err(VoxError::ChannelRange { .. })
        ));
    }

    #[test]
    fn labeling_contiguity() {
        assert!(PartLabeling::new(vec![0, 2]).is_err());
        let l = PartLabeling::compacted(&[7, 7, 3, 9]).unwrap();
        assert_eq!(l.labels(), &[0, 0, 1, 2]);
        assert_eq!(l.num_parts(), 3);
    }

    #[test]
    fn palette_single_and_deterministic() {
        let p = sample_palette(1, 99, 0.6).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p.colors()[0].iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(sample_palette(5, 7, 0.6).unwrap(), sample_palette(5, 7, 0.6).unwrap());
    }

    #[test]
    fn palette_eight_parts_brute_force() {
        let p = sample_palette(8, 11, 0.6).unwrap();
        let mut pairs = 0;
        for i in 0..8 {
            for j in (i + 1)..8 {
                let c = p.colors();
                let d: f64 = (0..3).map(|k| (f64::from(c[i][k]) - f64::from(c[j][k])).powi(2)).sum();
                assert!(d.sqrt() >= 0.6);
                pairs += 1;
            }
        }
        assert_eq!(pairs, 28);
    }

    #[test]
    fn palette_infeasible() {
        // 30 colors pairwise >= 3.0 apart cannot fit in a cube of diagonal 3.46.
        assert!(matches!(sample_palette(30, 1, 3.0), Err(VoxError::PaletteInfeasible { .. })));
        let p = sample_palette_default(30, 1).unwrap();
        assert_eq!(p.len(), 30);
    }

    #[test]
    fn one_voxel_roundtrip_and_bad_magic() {
        let g = one_voxel();
        let bytes = encode_grid(&g, None).unwrap();
        let (back, labels) = decode_grid(&bytes).unwrap();
        assert_eq!(back, g);
        assert!(labels.is_none());

        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        assert!(matches!(decode_grid(&bad), Err(VoxError::FormatVersionMismatch)));
        let mut corrupt = bytes;
        corrupt[30] ^= 0x01;
        assert!(matches!(decode_grid(&corrupt), Err(VoxError::CorruptPayload(_))));
    }

    #[test]
    fn large_grid_reserializes_bytewise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set = std::collections::BTreeSet::new();
        while set.len() < 5000 {
            set.insert([rng.random_range(0..32u16), rng.random_range(0..32u16), rng.random_range(0..32u16)]);
        }
        let coords: Vec<Coord> = set.into_iter().collect();
        let features = coords
            .iter()
            .map(|_| [1.0, rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
            .collect();
        let g = SparseVoxelGrid::new(32, coords, features).unwrap();
        let labels = PartLabeling::compacted(&(0..5000).map(|i| i % 7).collect::<Vec<_>>()).unwrap();
        let first = encode_grid(&g, Some(&labels)).unwrap();
        let (g2, l2) = decode_grid(&first).unwrap();
        let second = encode_grid(&g2, l2.as_ref()).unwrap();
        assert_eq!(first, second);
    }
}
