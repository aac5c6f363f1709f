//! On-disk dataset layout: `{root}/{split}/{id}.svg1`, `{root}/{split}/{id}.gd1`
//! and a shared `{root}/manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shapeforge::{
    decode_guidance_map, encode_guidance_map, make_full_target, palette_seed, render_guidance, GuidanceMap,
    ShapeError, ShapeRecord, View, DEFAULT_GUIDANCE_SIZE, PALETTES_PER_SHAPE,
};
use crate::voxcore::{read_grid, write_grid, VoxError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no split {0:?} in manifest")]
    UnknownSplit(String),
    #[error("shape {0} has no labels")]
    MissingLabels(String),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Vox(#[from] VoxError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub seed: u64,
    pub num_parts: u32,
    pub num_voxels: usize,
    pub palette_seeds: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub resolution: u32,
    pub guidance_view: String,
    pub shapes: Vec<ManifestEntry>,
}

fn read_manifest(root: &Path) -> Result<Option<Manifest>, DatasetError> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
}

fn view_name(view: View) -> &'static str {
    ["+x", "-x", "+y", "-y", "+z", "-z"][view.code() as usize]
}

/// Writes one split, replacing any previous entries for it in the manifest.
/// The stored guidance map is rendered from the shape's first palette.
pub fn write_split(root: impl AsRef<Path>, split: &str, shapes: &[ShapeRecord], view: View) -> Result<(), DatasetError> {
    let root = root.as_ref();
    let dir = root.join(split);
    fs::create_dir_all(&dir)?;
    let mut manifest = read_manifest(root)?.unwrap_or_default();
    manifest.shapes.retain(|e| e.split != split);
    manifest.guidance_view = view_name(view).into();
    for shape in shapes {
        manifest.resolution = shape.grid.resolution();
        write_grid(dir.join(format!("{}.svg1", shape.id)), &shape.grid, Some(&shape.labels))?;
        let palette = &shape.palettes()?[0];
        let target = make_full_target(&shape.grid, &shape.labels, palette)?;
        let map = render_guidance(&shape.grid, &target, view, DEFAULT_GUIDANCE_SIZE, DEFAULT_GUIDANCE_SIZE)?;
        fs::write(dir.join(format!("{}.gd1", shape.id)), encode_guidance_map(&map))?;
        manifest.shapes.push(ManifestEntry {
            id: shape.id.clone(),
            split: split.into(),
            seed: shape.seed,
            num_parts: shape.num_parts(),
            num_voxels: shape.grid.len(),
            palette_seeds: (0..PALETTES_PER_SHAPE).map(|j| palette_seed(shape.seed, j)).collect(),
        });
    }
    fs::write(root.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn shape_path(root: impl AsRef<Path>, split: &str, id: &str) -> PathBuf {
    root.as_ref().join(split).join(format!("{id}.svg1"))
}

pub fn read_split(root: impl AsRef<Path>, split: &str) -> Result<Vec<ShapeRecord>, DatasetError> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?.ok_or_else(|| DatasetError::UnknownSplit(split.into()))?;
    let entries: Vec<_> = manifest.shapes.iter().filter(|e| e.split == split).collect();
    if entries.is_empty() {
        return Err(DatasetError::UnknownSplit(split.into()));
    }
    entries
        .into_iter()
        .map(|e| {
            let (grid, labels) = read_grid(shape_path(root, split, &e.id))?;
            let labels = labels.ok_or_else(|| DatasetError::MissingLabels(e.id.clone()))?;
            Ok(ShapeRecord { id: e.id.clone(), seed: e.seed, grid, labels })
        })
        .collect()
}

pub fn read_guidance(root: impl AsRef<Path>, split: &str, id: &str) -> Result<GuidanceMap, DatasetError> {
    let bytes = fs::read(root.as_ref().join(split).join(format!("{id}.gd1")))?;
    Ok(decode_guidance_map(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapeforge::{sample_dataset, GenConfig};

    #[test]
    fn split_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig { resolution: 12, ..GenConfig::default() };
        let shapes = sample_dataset(3, 2, &cfg).unwrap();
        write_split(dir.path(), "train", &shapes, View::PosZ).unwrap();
        let held = sample_dataset(2, 3, &cfg).unwrap();
        write_split(dir.path(), "test", &held, View::PosZ).unwrap();
        assert_eq!(read_split(dir.path(), "train").unwrap(), shapes);
        assert_eq!(read_split(dir.path(), "test").unwrap(), held);
        let map = read_guidance(dir.path(), "train", &shapes[0].id).unwrap();
        assert_eq!(map.width, 64);
        assert!(matches!(read_split(dir.path(), "val"), Err(DatasetError::UnknownSplit(_))));
    }
}
