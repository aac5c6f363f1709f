use super::params::{ModelParams, PointEmbed, Slot};
use super::{ModelError, PointPrompt, PointTokens, Task, MAX_POINTS, POINT_FREQ_DIM, POINT_OCTAVES};
use crate::linalg::{linear, linear_backward, silu, silu_grad, Mat};
use crate::shapeforge::GuidanceMap;

/// Interleaved `[sin(p w_0), cos(p w_0), sin(p w_1), ...]` with
/// `w_i = 10000^(-2i/dim)`.
pub fn sinusoidal(pos: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let (s, c) = (pos * w).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

/// `[sin(2^l pi u_a), cos(2^l pi u_a)]` for each axis `a` and octave `l`.
pub fn point_frequencies(u: [f64; 3]) -> [f64; POINT_FREQ_DIM] {
    let mut out = [0.0; POINT_FREQ_DIM];
    for (a, &x) in u.iter().enumerate() {
        for l in 0..POINT_OCTAVES {
            let (s, c) = (f64::from(1u32 << l) * std::f64::consts::PI * x).sin_cos();
            out[a * 2 * POINT_OCTAVES + 2 * l] = s;
            out[a * 2 * POINT_OCTAVES + 2 * l + 1] = c;
        }
    }
    out
}

fn point_tokens_with(prompt: &PointPrompt, params: &ModelParams, explicit: bool) -> Result<PointTokens, ModelError> {
    let prompt = PointPrompt::new(prompt.points.clone())?;
    let d = params.config().d_model;
    let layout = params.layout();
    let e_p = params.get(layout.e_p);
    let mut tokens = PointTokens { coords: [[0.0; 3]; MAX_POINTS], features: vec![0.0; MAX_POINTS * d], valid: [false; MAX_POINTS] };
    for (i, &u) in prompt.points.iter().enumerate() {
        tokens.coords[i] = u;
        tokens.valid[i] = true;
        let row = &mut tokens.features[i * d..(i + 1) * d];
        row.copy_from_slice(e_p);
        if explicit {
            let freq_w = layout.freq_w.ok_or_else(|| ModelError::BadConfig("model has no coordinate projection".into()))?;
            let w = params.get(freq_w);
            for (k, g) in point_frequencies(u).iter().enumerate() {
                for (r, wv) in row.iter_mut().zip(&w[k * d..(k + 1) * d]) {
                    *r += g * wv;
                }
            }
        }
    }
    Ok(tokens)
}

/// Point tokens as configured by the model's point embedding mode.
pub fn build_point_tokens(prompt: &PointPrompt, params: &ModelParams) -> Result<PointTokens, ModelError> {
    point_tokens_with(prompt, params, params.config().point_embed == PointEmbed::Explicit)
}

/// Point tokens with the frequency coordinate encoding added to `e_p`.
pub fn explicit_coord_tokens(prompt: &PointPrompt, params: &ModelParams) -> Result<PointTokens, ModelError> {
    point_tokens_with(prompt, params, true)
}

/// Cached activations of a two-layer embedding MLP.
#[derive(Debug)]
pub(crate) struct MlpTape {
    pe: Mat,
    pre: Mat,
    act: Mat,
    pub out: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpSlots {
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

pub(crate) fn mlp_forward(params: &ModelParams, s: MlpSlots, pe: Vec<f64>) -> MlpTape {
    let d = s.w2.cols;
    let pe = Mat::from_vec(1, pe.len(), pe);
    let pre = linear(&pe, params.get(s.w1), Some(params.get(s.b1)), d);
    let act = Mat::from_vec(1, d, pre.data.iter().map(|&v| silu(v)).collect());
    let out = linear(&act, params.get(s.w2), Some(params.get(s.b2)), d).data;
    MlpTape { pe, pre, act, out }
}

pub(crate) fn mlp_backward(params: &ModelParams, g: &mut [f64], s: MlpSlots, tape: &MlpTape, dout: &[f64]) {
    let d = s.w2.cols;
    let dout = Mat::from_vec(1, d, dout.to_vec());
    let (w2, b2) = super::attention::split_weight_bias(g, s.w2, s.b2);
    let mut dact = linear_backward(&tape.act, params.get(s.w2), &dout, w2, Some(b2), true).unwrap();
    for (dv, &p) in dact.data.iter_mut().zip(&tape.pre.data) {
        *dv *= silu_grad(p);
    }
    let (w1, b1) = super::attention::split_weight_bias(g, s.w1, s.b1);
    linear_backward(&tape.pe, params.get(s.w1), &dact, w1, Some(b1), false);
}

pub(crate) fn time_slots(params: &ModelParams) -> MlpSlots {
    let l = params.layout();
    MlpSlots { w1: l.temb_w1, b1: l.temb_b1, w2: l.temb_w2, b2: l.temb_b2 }
}

pub(crate) fn task_slots(params: &ModelParams) -> MlpSlots {
    let l = params.layout();
    MlpSlots { w1: l.task_w1, b1: l.task_b1, w2: l.task_w2, b2: l.task_b2 }
}

/// Timesteps are scaled by 1000 before the sinusoidal encoding.
pub(crate) fn time_encoding(params: &ModelParams, t: f64) -> Vec<f64> {
    sinusoidal(1000.0 * t, params.config().freq_dim)
}

pub fn timestep_embedding(params: &ModelParams, t: f64) -> Vec<f64> {
    mlp_forward(params, time_slots(params), time_encoding(params, t)).out
}

pub fn task_embedding(params: &ModelParams, task: u32) -> Result<Vec<f64>, ModelError> {
    let task = Task::from_index(task)?;
    Ok(mlp_forward(params, task_slots(params), sinusoidal(f64::from(task.index()), params.config().freq_dim)).out)
}

/// The modulation vector is the sum of timestep and task embeddings.
pub fn fuse_modulation(e_t: &[f64], e_task: &[f64]) -> Vec<f64> {
    e_t.iter().zip(e_task).map(|(a, b)| a + b).collect()
}

/// Flattens the map into non-overlapping `P x P` patches, row-major over
/// patches; each patch lists its pixels row-major as `[r, g, b, background]`.
pub fn guidance_patches(map: &GuidanceMap, patch: usize) -> Result<Mat, ModelError> {
    let (w, h) = (map.width as usize, map.height as usize);
    if w == 0 || h == 0 || w % patch != 0 || h % patch != 0 || map.pixels.len() != w * h {
        return Err(ModelError::BadDimensions(format!("{w}x{h} guidance map is not tiled by {patch}x{patch} patches")));
    }
    let (pw, ph) = (w / patch, h / patch);
    let width = 4 * patch * patch;
    let mut out = Mat::zeros(pw * ph, width);
    for pr in 0..ph {
        for pc in 0..pw {
            let row = out.row_mut(pr * pw + pc);
            for y in 0..patch {
                for x in 0..patch {
                    let px = map.pixels[(pr * patch + y) * w + pc * patch + x];
                    let o = 4 * (y * patch + x);
                    for c in 0..3 {
                        row[o + c] = f64::from(px.color[c]);
                    }
                    row[o + 3] = if px.background { 1.0 } else { 0.0 };
                }
            }
        }
    }
    Ok(out)
}

/// Fixed 2D position term: half the channels encode the patch column, half
/// the patch row.
pub(crate) fn guidance_positions(cols: usize, rows: usize, d: usize) -> Mat {
    let mut out = Mat::zeros(cols * rows, d);
    for r in 0..rows {
        for c in 0..cols {
            let row = out.row_mut(r * cols + c);
            row[..d / 2].copy_from_slice(&sinusoidal(c as f64, d / 2));
            row[d / 2..].copy_from_slice(&sinusoidal(r as f64, d / 2));
        }
    }
    out
}

/// Guidance tokens: linear patch embedding plus the 2D position term.
pub fn encode_guidance(params: &ModelParams, map: &GuidanceMap) -> Result<Mat, ModelError> {
    Ok(guidance_tokens(params, &guidance_patches(map, params.config().patch_size)?, map))
}

pub(crate) fn guidance_tokens(params: &ModelParams, patches: &Mat, map: &GuidanceMap) -> Mat {
    let cfg = params.config();
    let l = params.layout();
    let p = cfg.patch_size;
    let mut tokens = linear(patches, params.get(l.guide_w), Some(params.get(l.guide_b)), cfg.d_model);
    tokens.add_assign(&guidance_positions(map.width as usize / p, map.height as usize / p, cfg.d_model));
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_at_zero() {
        assert_eq!(sinusoidal(0.0, 4), vec![0.0, 1.0, 0.0, 1.0]);
        let v = sinusoidal(3.0, 8);
        assert!((v[0] - 3f64.sin()).abs() < 1e-15);
        assert!((v[3] - (3.0 * 10000f64.powf(-0.25)).cos()).abs() < 1e-15);
    }

    #[test]
    fn frequencies_at_origin() {
        let g = point_frequencies([0.0; 3]);
        for k in 0..POINT_FREQ_DIM {
            assert_eq!(g[k], if k % 2 == 0 { 0.0 } else { 1.0 });
        }
        let g = point_frequencies([0.25, 0.0, 0.0]);
        assert!((g[2] - 1.0).abs() < 1e-15, "sin(2 pi / 4)");
    }
}
