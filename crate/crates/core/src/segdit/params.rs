use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelError, POINT_FREQ_DIM};
use crate::container;

const FLOW_MAGIC: &[u8; 4] = b"FLOW";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointEmbed {
    /// Every valid token carries the shared learned vector `e_p`.
    Label,
    /// Frequency encoding of the click coordinate, projected and added to `e_p`.
    Explicit,
}

impl std::str::FromStr for PointEmbed {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "label" => Ok(Self::Label),
            "explicit" => Ok(Self::Explicit),
            _ => Err(format!("unknown point embedding {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_ratio: usize,
    /// Latent channels per cell (3 for the identity codec).
    pub d_lat: usize,
    pub point_embed: PointEmbed,
    pub patch_size: usize,
    /// Width of the sinusoidal timestep/task encodings.
    pub freq_dim: usize,
    pub rope_base: f64,
    /// Rotate cross-attention queries/keys by their in-image-plane coordinates.
    pub cross_rope: bool,
    /// Exclude padded point tokens from attention keys.
    pub mask_padded_points: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            blocks: 4,
            heads: 4,
            ff_ratio: 4,
            d_lat: 3,
            point_embed: PointEmbed::Label,
            patch_size: 8,
            freq_dim: 64,
            rope_base: 100.0,
            cross_rope: true,
            mask_padded_points: false,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::BadConfig(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.head_dim() < 6 {
            return bad("head dimension must hold one rotary pair per axis".into());
        }
        if !self.d_model.is_multiple_of(4) {
            return bad("d_model must be a multiple of 4".into());
        }
        if self.freq_dim == 0 || !self.freq_dim.is_multiple_of(2) {
            return bad("freq_dim must be even".into());
        }
        if self.blocks == 0 || self.ff_ratio == 0 || self.d_lat == 0 || self.patch_size == 0 {
            return bad("sizes must be positive".into());
        }
        Ok(())
    }
}

/// Location and shape of one parameter tensor in the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn range(&self) -> Range<usize> {
        self.off..self.off + self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockSlots {
    pub ada_w: Slot,
    pub ada_b: Slot,
    pub q: Slot,
    pub k: Slot,
    pub v: Slot,
    pub o: Slot,
    pub o_b: Slot,
    pub xq: Slot,
    pub xk: Slot,
    pub xv: Slot,
    pub xo: Slot,
    pub xo_b: Slot,
    pub ff1: Slot,
    pub ff1_b: Slot,
    pub ff2: Slot,
    pub ff2_b: Slot,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub in_w: Slot,
    pub in_b: Slot,
    pub e_p: Slot,
    pub freq_w: Option<Slot>,
    pub pt_w: Slot,
    pub temb_w1: Slot,
    pub temb_b1: Slot,
    pub temb_w2: Slot,
    pub temb_b2: Slot,
    pub task_w1: Slot,
    pub task_b1: Slot,
    pub task_w2: Slot,
    pub task_b2: Slot,
    pub guide_w: Slot,
    pub guide_b: Slot,
    pub blocks: Vec<BlockSlots>,
    pub final_w: Slot,
    pub final_b: Slot,
    pub out_w: Slot,
    pub out_b: Slot,
    pub entries: Vec<(String, Slot)>,
    pub total: usize,
}

#[derive(Default)]
struct Builder {
    entries: Vec<(String, Slot)>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Slot {
        let slot = Slot { off: self.total, rows, cols };
        self.total += rows * cols;
        self.entries.push((name.into(), slot));
        slot
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.freq_dim;
        let mut b = Builder::default();
        let in_w = b.add("in.w", 2 * cfg.d_lat, d);
        let in_b = b.add("in.b", 1, d);
        let e_p = b.add("point.e_p", 1, d);
        let freq_w = (cfg.point_embed == PointEmbed::Explicit).then(|| b.add("point.freq_w", POINT_FREQ_DIM, d));
        let pt_w = b.add("point.proj", d, d);
        let temb_w1 = b.add("time.w1", f, d);
        let temb_b1 = b.add("time.b1", 1, d);
        let temb_w2 = b.add("time.w2", d, d);
        let temb_b2 = b.add("time.b2", 1, d);
        let task_w1 = b.add("task.w1", f, d);
        let task_b1 = b.add("task.b1", 1, d);
        let task_w2 = b.add("task.w2", d, d);
        let task_b2 = b.add("task.b2", 1, d);
        let guide_w = b.add("guide.w", 4 * cfg.patch_size * cfg.patch_size, d);
        let guide_b = b.add("guide.b", 1, d);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let mut add = |n: &str, r, c| b.add(format!("block{i}.{n}"), r, c);
                BlockSlots {
                    ada_w: add("ada.w", d, 9 * d),
                    ada_b: add("ada.b", 1, 9 * d),
                    q: add("attn.q", d, d),
                    k: add("attn.k", d, d),
                    v: add("attn.v", d, d),
                    o: add("attn.o", d, d),
                    o_b: add("attn.o_b", 1, d),
                    xq: add("cross.q", d, d),
                    xk: add("cross.k", d, d),
                    xv: add("cross.v", d, d),
                    xo: add("cross.o", d, d),
                    xo_b: add("cross.o_b", 1, d),
                    ff1: add("ff.w1", d, cfg.ff_ratio * d),
                    ff1_b: add("ff.b1", 1, cfg.ff_ratio * d),
                    ff2: add("ff.w2", cfg.ff_ratio * d, d),
                    ff2_b: add("ff.b2", 1, d),
                }
            })
            .collect();
        let final_w = b.add("final.ada.w", d, 2 * d);
        let final_b = b.add("final.ada.b", 1, 2 * d);
        let out_w = b.add("out.w", d, cfg.d_lat);
        let out_b = b.add("out.b", 1, cfg.d_lat);
        Layout {
            in_w,
            in_b,
            e_p,
            freq_w,
            pt_w,
            temb_w1,
            temb_b1,
            temb_w2,
            temb_b2,
            task_w1,
            task_b1,
            task_w2,
            task_b2,
            guide_w,
            guide_b,
            blocks,
            final_w,
            final_b,
            out_w,
            out_b,
            entries: b.entries,
            total: b.total,
        }
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Xavier weights, zero biases, zero adaptive-modulation and output maps.
    Standard,
    /// Every tensor random and non-zero; used for gradient verification.
    Dense,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    data: Vec<f64>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64, scheme: InitScheme) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, slot) in &layout.entries {
            let is_bias = slot.rows == 1 && name != "point.e_p";
            let zeroed = name.ends_with("ada.w") || name.starts_with("out.");
            let bound = match scheme {
                InitScheme::Standard if is_bias || zeroed => 0.0,
                InitScheme::Standard if name == "point.e_p" => 1.0,
                InitScheme::Standard => (6.0 / (slot.rows + slot.cols) as f64).sqrt(),
                InitScheme::Dense if is_bias => 0.2,
                InitScheme::Dense if name == "point.e_p" => 1.0,
                InitScheme::Dense => (3.0 / slot.rows as f64).sqrt(),
            };
            if bound > 0.0 {
                for v in &mut data[slot.range()] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(Self { config, layout, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, slot: Slot) -> &[f64] {
        &self.data[slot.range()]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.data[slot.range()]
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in &self.data {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }

    /// Rounds parameters to `f32` precision so a checkpoint roundtrip is exact.
    pub fn round_to_f32(&mut self) {
        container::round_to_f32(&mut self.data);
    }

    pub fn save<H: Serialize>(&self, path: impl AsRef<Path>, extra: &H) -> Result<(), ModelError> {
        let header = serde_json::json!({ "model": self.config, "extra": extra });
        container::write(path, FLOW_MAGIC, &header, &self.data)?;
        Ok(())
    }

    /// Loads parameters and returns the extra header value stored alongside.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value), ModelError> {
        let (mut header, data): (serde_json::Value, Vec<f64>) = container::read(path, FLOW_MAGIC)?;
        let config: ModelConfig = serde_json::from_value(header["model"].take())
            .map_err(|e| ModelError::BadConfig(format!("checkpoint config: {e}")))?;
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(ModelError::BadConfig(format!("checkpoint has {} parameters, config needs {}", data.len(), layout.total)));
        }
        Ok((Self { config, layout, data }, header["extra"].take()))
    }
}
