//! Procedural multi-part shapes, colorization targets and rendered guidance maps.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxcore::{
    sample_palette, sample_palette_default, Coord, Palette, PartLabeling, SparseVoxelGrid, VoxError, BLACK,
    DEFAULT_PALETTE_SEPARATION, WHITE,
};

/// Palettes generated per shape for full-segmentation targets.
pub const PALETTES_PER_SHAPE: usize = 10;
pub const DEFAULT_GUIDANCE_SIZE: u32 = 64;

const MAX_CONSECUTIVE_REJECTIONS: usize = 100;
const GUIDANCE_MAGIC: &[u8; 4] = b"GMAP";
const GUIDANCE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("resolution {0} below the minimum of 8")]
    BadResolution(u32),
    #[error("invalid shape spec: {0}")]
    InvalidSpec(String),
    #[error("primitive {primitive} contributes {voxels} voxels after priority resolution")]
    DegenerateShape { primitive: usize, voxels: usize },
    #[error("gave up after {0} consecutive degenerate shapes")]
    DatasetExhausted(usize),
    #[error("part {part} not in a {num_parts}-part labeling")]
    UnknownPart { part: u32, num_parts: u32 },
    #[error("palette has {palette} colors, labeling has {parts} parts")]
    PaletteSizeMismatch { palette: usize, parts: u32 },
    #[error("colored grid is not aligned with the source grid")]
    Misaligned,
    #[error("bad guidance map file: {0}")]
    GuidanceFormat(String),
    #[error(transparent)]
    Vox(#[from] VoxError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Box,
    Sphere,
    Cylinder,
}

/// Solid in unit-cube coordinates. `size` holds half extents (box), radii
/// (sphere), or `(radius_x, radius_y, half_height)` of a z-aligned cylinder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub priority: i32,
    /// Surface color carried by the input asset's voxels.
    pub albedo: [f32; 3],
}

impl Primitive {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d: [f64; 3] = std::array::from_fn(|i| (p[i] - self.center[i]) / self.size[i]);
        match self.kind {
            PrimitiveKind::Box => d.iter().all(|v| v.abs() <= 1.0),
            PrimitiveKind::Sphere => d.iter().map(|v| v * v).sum::<f64>() <= 1.0,
            PrimitiveKind::Cylinder => d[0] * d[0] + d[1] * d[1] <= 1.0 && d[2].abs() <= 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureMode {
    /// Each part gets its own albedo, drawn from a well-separated palette.
    PerPart,
    /// All voxels share a neutral color; parts are implied by geometry only.
    Uniform,
    /// Each part takes one of `GenConfig::materials` shared albedos, so
    /// appearance hints at parts without identifying them.
    Materials,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub resolution: u32,
    pub min_primitives: usize,
    pub max_primitives: usize,
    pub center_range: (f64, f64),
    pub size_range: (f64, f64),
    pub texture: TextureMode,
    /// Shapes with a smaller part are rejected as degenerate.
    pub min_part_voxels: usize,
    /// Size of the per-shape albedo set in `TextureMode::Materials`.
    #[serde(default = "default_materials")]
    pub materials: usize,
}

fn default_materials() -> usize {
    2
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            min_primitives: 2,
            max_primitives: 8,
            center_range: (0.2, 0.8),
            size_range: (0.1, 0.3),
            texture: TextureMode::PerPart,
            min_part_voxels: 1,
            materials: default_materials(),
        }
    }
}

/// A generated shape: the textured input asset plus its ground-truth parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecord {
    pub id: String,
    pub seed: u64,
    pub grid: SparseVoxelGrid,
    pub labels: PartLabeling,
}

impl ShapeRecord {
    pub fn num_parts(&self) -> u32 {
        self.labels.num_parts()
    }

    /// The shape's `PALETTES_PER_SHAPE` full-segmentation palettes.
    pub fn palettes(&self) -> Result<Vec<Palette>, VoxError> {
        palettes_for_shape(self.seed, self.num_parts() as usize)
    }
}

pub fn palette_seed(shape_seed: u64, index: usize) -> u64 {
    shape_seed.wrapping_mul(PALETTES_PER_SHAPE as u64).wrapping_add(index as u64)
}

pub fn palettes_for_shape(shape_seed: u64, num_parts: usize) -> Result<Vec<Palette>, VoxError> {
    (0..PALETTES_PER_SHAPE)
        .map(|j| sample_palette_default(num_parts, palette_seed(shape_seed, j)))
        .collect()
}

/// Voxelizes a spec. A voxel is active iff its center lies in some primitive;
/// the highest-priority containing primitive owns it.
pub fn generate_shape(spec: &ShapeSpec, resolution: u32) -> Result<(SparseVoxelGrid, PartLabeling), ShapeError> {
    generate_shape_with(spec, resolution, 1)
}

fn generate_shape_with(
    spec: &ShapeSpec,
    resolution: u32,
    min_part_voxels: usize,
) -> Result<(SparseVoxelGrid, PartLabeling), ShapeError> {
    if resolution < 8 {
        return Err(ShapeError::BadResolution(resolution));
    }
    if spec.primitives.is_empty() {
        return Err(ShapeError::InvalidSpec("no primitives".into()));
    }
    let mut priorities: Vec<i32> = spec.primitives.iter().map(|p| p.priority).collect();
    priorities.sort_unstable();
    if priorities.windows(2).any(|w| w[0] == w[1]) {
        return Err(ShapeError::InvalidSpec("priorities must be unique".into()));
    }
    if spec.primitives.iter().any(|p| p.size.iter().any(|&s| s <= 0.0)) {
        return Err(ShapeError::InvalidSpec("sizes must be positive".into()));
    }

    let r = resolution as usize;
    let scale = 1.0 / f64::from(resolution);
    let mut coords = Vec::new();
    let mut owners = Vec::new();
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                let p = [(i as f64 + 0.5) * scale, (j as f64 + 0.5) * scale, (k as f64 + 0.5) * scale];
                let owner = spec
                    .primitives
                    .iter()
                    .enumerate()
                    .filter(|(_, prim)| prim.contains(p))
                    .max_by_key(|(_, prim)| prim.priority)
                    .map(|(idx, _)| idx);
                if let Some(idx) = owner {
                    coords.push([i as u16, j as u16, k as u16]);
                    owners.push(idx);
                }
            }
        }
    }

    let mut counts = vec![0usize; spec.primitives.len()];
    for &o in &owners {
        counts[o] += 1;
    }
    if let Some((primitive, &voxels)) = counts.iter().enumerate().find(|(_, &c)| c < min_part_voxels.max(1)) {
        return Err(ShapeError::DegenerateShape { primitive, voxels });
    }

    let features = owners
        .iter()
        .map(|&o| {
            let a = spec.primitives[o].albedo;
            [1.0, a[0], a[1], a[2]]
        })
        .collect();
    // Coordinates were produced in lexicographic order, so compaction numbers
    // parts by their first canonical voxel.
    let grid = SparseVoxelGrid::new(resolution, coords, features)?;
    Ok((grid, PartLabeling::compacted(&owners)?))
}

/// Draws a random spec with `min_primitives..=max_primitives` primitives.
pub fn random_spec(seed: u64, cfg: &GenConfig) -> Result<ShapeSpec, ShapeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_primitives..=cfg.max_primitives);
    let mut priorities: Vec<i32> = (0..n as i32).collect();
    priorities.shuffle(&mut rng);
    let albedos: Vec<[f32; 3]> = match cfg.texture {
        TextureMode::PerPart => sample_palette(n, rng.next_u64(), DEFAULT_PALETTE_SEPARATION)?.colors().to_vec(),
        TextureMode::Uniform => vec![[0.0; 3]; n],
        TextureMode::Materials => {
            let set = sample_palette(cfg.materials.max(1), rng.next_u64(), DEFAULT_PALETTE_SEPARATION)?;
            (0..n).map(|_| set.colors()[rng.random_range(0..set.len())]).collect()
        }
    };
    let primitives = (0..n)
        .map(|i| {
            let kind = [PrimitiveKind::Box, PrimitiveKind::Sphere, PrimitiveKind::Cylinder][rng.random_range(0..3)];
            let center = std::array::from_fn(|_| rng.random_range(cfg.center_range.0..=cfg.center_range.1));
            let size = std::array::from_fn(|_| rng.random_range(cfg.size_range.0..=cfg.size_range.1));
            Primitive { kind, center, size, priority: priorities[i], albedo: albedos[i] }
        })
        .collect();
    Ok(ShapeSpec { seed, primitives })
}

/// Draws `count` non-degenerate shapes, deterministic in `seed`.
pub fn sample_dataset(count: usize, seed: u64, cfg: &GenConfig) -> Result<Vec<ShapeRecord>, ShapeError> {
    if cfg.min_primitives < 1 || cfg.min_primitives > cfg.max_primitives {
        return Err(ShapeError::InvalidSpec("bad primitive count range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut rejections = 0;
    while out.len() < count {
        let spec_seed = rng.next_u64();
        let spec = random_spec(spec_seed, cfg)?;
        match generate_shape_with(&spec, cfg.resolution, cfg.min_part_voxels) {
            Ok((grid, labels)) => {
                rejections = 0;
                out.push(ShapeRecord { id: format!("shape_{:04}", out.len()), seed: spec_seed, grid, labels });
            }
            Err(ShapeError::DegenerateShape { .. }) => {
                rejections += 1;
                if rejections >= MAX_CONSECUTIVE_REJECTIONS {
                    return Err(ShapeError::DatasetExhausted(rejections));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// White on the chosen part, black elsewhere.
pub fn make_interactive_target(
    grid: &SparseVoxelGrid,
    labels: &PartLabeling,
    part: u32,
) -> Result<SparseVoxelGrid, ShapeError> {
    labels.check_grid(grid)?;
    if part >= labels.num_parts() {
        return Err(ShapeError::UnknownPart { part, num_parts: labels.num_parts() });
    }
    let colors: Vec<[f32; 3]> = labels.labels().iter().map(|&l| if l == part { WHITE } else { BLACK }).collect();
    Ok(grid.with_colors(&colors)?)
}

/// Paints each voxel with its part's palette color.
pub fn make_full_target(
    grid: &SparseVoxelGrid,
    labels: &PartLabeling,
    palette: &Palette,
) -> Result<SparseVoxelGrid, ShapeError> {
    labels.check_grid(grid)?;
    if palette.len() != labels.num_parts() as usize {
        return Err(ShapeError::PaletteSizeMismatch { palette: palette.len(), parts: labels.num_parts() });
    }
    let colors: Vec<[f32; 3]> = labels.labels().iter().map(|&l| palette.colors()[l as usize]).collect();
    Ok(grid.with_colors(&colors)?)
}

/// Orthographic viewing direction. `PosZ` looks from the `+z` side, so the
/// voxel with the largest `k` in each column is visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl View {
    pub const ALL: [View; 6] = [View::PosX, View::NegX, View::PosY, View::NegY, View::PosZ, View::NegZ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn depth_axis(self) -> usize {
        self.code() as usize / 2
    }

    fn positive(self) -> bool {
        self.code().is_multiple_of(2)
    }

    /// Image column axis and row axis: the two remaining axes in ascending order.
    pub fn image_axes(self) -> (usize, usize) {
        match self.depth_axis() {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        }
    }
}

impl std::str::FromStr for View {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "+x" => View::PosX,
            "-x" => View::NegX,
            "+y" => View::PosY,
            "-y" => View::NegY,
            "+z" => View::PosZ,
            "-z" => View::NegZ,
            _ => return Err(format!("unknown view {s:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidancePixel {
    pub color: [f32; 3],
    pub background: bool,
}

const BACKGROUND: GuidancePixel = GuidancePixel { color: [0.0; 3], background: true };

/// Rendered 2D part-color image, row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap {
    pub width: u32,
    pub height: u32,
    pub view: View,
    pub pixels: Vec<GuidancePixel>,
}

impl GuidanceMap {
    pub fn pixel(&self, row: u32, col: u32) -> GuidancePixel {
        self.pixels[(row * self.width + col) as usize]
    }
}

/// Voxel column hit by the center of each pixel along one image axis.
fn pixel_to_voxel(pixels: u32, resolution: u32) -> Vec<u32> {
    (0..pixels)
        .map(|p| (((f64::from(p) + 0.5) * f64::from(resolution) / f64::from(pixels)) as u32).min(resolution - 1))
        .collect()
}

/// Splats `colored` orthographically along `view` with a depth buffer.
pub fn render_guidance(
    grid: &SparseVoxelGrid,
    colored: &SparseVoxelGrid,
    view: View,
    width: u32,
    height: u32,
) -> Result<GuidanceMap, ShapeError> {
    if !grid.same_support(colored) {
        return Err(ShapeError::Misaligned);
    }
    let (ua, va) = view.image_axes();
    let da = view.depth_axis();
    let mut nearest: HashMap<(u16, u16), (u16, usize)> = HashMap::new();
    for (idx, c) in colored.coords().iter().enumerate() {
        let key = (c[ua], c[va]);
        let depth = c[da];
        nearest
            .entry(key)
            .and_modify(|e| {
                let closer = if view.positive() { depth > e.0 } else { depth < e.0 };
                if closer {
                    *e = (depth, idx);
                }
            })
            .or_insert((depth, idx));
    }
    let cols = pixel_to_voxel(width, grid.resolution());
    let rows = pixel_to_voxel(height, grid.resolution());
    let mut pixels = Vec::with_capacity((width * height) as usize);
    for &row in &rows {
        for &col in &cols {
            pixels.push(match nearest.get(&(col as u16, row as u16)) {
                Some(&(_, idx)) => GuidancePixel { color: colored.color(idx), background: false },
                None => BACKGROUND,
            });
        }
    }
    Ok(GuidanceMap { width, height, view, pixels })
}

pub fn encode_guidance_map(map: &GuidanceMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + map.pixels.len() * 13);
    out.extend_from_slice(GUIDANCE_MAGIC);
    out.extend_from_slice(&GUIDANCE_VERSION.to_le_bytes());
    out.extend_from_slice(&map.width.to_le_bytes());
    out.extend_from_slice(&map.height.to_le_bytes());
    out.push(map.view.code());
    for p in &map.pixels {
        for c in p.color {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.push(u8::from(p.background));
    }
    out
}

pub fn decode_guidance_map(bytes: &[u8]) -> Result<GuidanceMap, ShapeError> {
    let bad = |m: &str| ShapeError::GuidanceFormat(m.into());
    if bytes.len() < 17 || &bytes[..4] != GUIDANCE_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if word(4) != GUIDANCE_VERSION {
        return Err(bad("unsupported version"));
    }
    let (width, height) = (word(8), word(12));
    let view = View::from_code(bytes[16]).ok_or_else(|| bad("bad view code"))?;
    let n = (width as usize) * (height as usize);
    if bytes.len() != 17 + n * 13 {
        return Err(bad("size mismatch"));
    }
    let pixels = bytes[17..]
        .chunks_exact(13)
        .map(|c| GuidancePixel {
            color: std::array::from_fn(|i| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap())),
            background: c[12] != 0,
        })
        .collect();
    Ok(GuidanceMap { width, height, view, pixels })
}

/// Voxel-space center of a grid coordinate, normalized to `[0, 1]`.
pub fn normalized_center(c: Coord, resolution: u32) -> [f64; 3] {
    std::array::from_fn(|i| (f64::from(c[i]) + 0.5) / f64::from(resolution))
}
