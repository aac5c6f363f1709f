use super::attention::{self, split_weight_bias, AttnCache, AttnInput, AttnSlots};
use super::embed::{
    build_point_tokens, guidance_patches, guidance_tokens, mlp_backward, mlp_forward, sinusoidal, task_slots, time_encoding,
    time_slots, MlpTape,
};
use super::params::{BlockSlots, ModelParams, PointEmbed};
use super::rope::Rope;
use super::{ModelError, PointPrompt, TaskCondition, MAX_POINTS, POINT_FREQ_DIM};
use crate::codec::LatentGrid;
use crate::linalg::{gelu, gelu_grad, linear, linear_backward, silu, silu_grad, Mat};
use crate::shapeforge::GuidanceMap;

use super::embed::point_frequencies;

const LN_EPS: f64 = 1e-6;

#[derive(Debug)]
struct Norm {
    n: Mat,
    rstd: Vec<f64>,
}

/// Per-row layer norm without affine parameters.
fn layer_norm(x: &Mat) -> Norm {
    let mut n = x.clone();
    let mut rstd = Vec::with_capacity(x.rows);
    let c = x.cols as f64;
    for row in n.data.chunks_exact_mut(x.cols) {
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * r);
        rstd.push(r);
    }
    Norm { n, rstd }
}

fn layer_norm_backward(dn: &Mat, norm: &Norm) -> Mat {
    let c = dn.cols as f64;
    let mut dx = Mat::zeros(dn.rows, dn.cols);
    for r in 0..dn.rows {
        let (dy, y) = (dn.row(r), norm.n.row(r));
        let mean_dy = dy.iter().sum::<f64>() / c;
        let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c;
        for ((o, &a), &b) in dx.row_mut(r).iter_mut().zip(dy).zip(y) {
            *o = norm.rstd[r] * (a - mean_dy - b * mean_dyy);
        }
    }
    dx
}

/// `n * (1 + scale) + shift`, broadcast over rows.
fn modulate(n: &Mat, shift: &[f64], scale: &[f64]) -> Mat {
    let mut h = n.clone();
    for row in h.data.chunks_exact_mut(n.cols) {
        for ((v, s), b) in row.iter_mut().zip(scale).zip(shift) {
            *v = *v * (1.0 + s) + b;
        }
    }
    h
}

/// Returns `(dn, dshift, dscale)`.
fn modulate_backward(dh: &Mat, n: &Mat, scale: &[f64]) -> (Mat, Vec<f64>, Vec<f64>) {
    let mut dn = dh.clone();
    let mut dshift = vec![0.0; dh.cols];
    let mut dscale = vec![0.0; dh.cols];
    for r in 0..dh.rows {
        for (j, (&g, &x)) in dh.row(r).iter().zip(n.row(r)).enumerate() {
            dshift[j] += g;
            dscale[j] += g * x;
        }
        for (v, s) in dn.row_mut(r).iter_mut().zip(scale) {
            *v *= 1.0 + s;
        }
    }
    (dn, dshift, dscale)
}

fn gated_add(x: &mut Mat, gate: &[f64], a: &Mat) {
    for (xr, ar) in x.data.chunks_exact_mut(x.cols).zip(a.data.chunks_exact(a.cols)) {
        for ((v, g), av) in xr.iter_mut().zip(gate).zip(ar) {
            *v += g * av;
        }
    }
}

/// Returns `(dx * gate, dgate)`.
fn gate_backward(dx: &Mat, gate: &[f64], a: &Mat) -> (Mat, Vec<f64>) {
    let mut da = dx.clone();
    let mut dgate = vec![0.0; dx.cols];
    for r in 0..dx.rows {
        for (j, (&g, &av)) in dx.row(r).iter().zip(a.row(r)).enumerate() {
            dgate[j] += g * av;
        }
        for (v, gt) in da.row_mut(r).iter_mut().zip(gate) {
            *v *= gt;
        }
    }
    (da, dgate)
}

fn self_slots(b: &BlockSlots) -> AttnSlots {
    AttnSlots { q: b.q, k: b.k, v: b.v, o: b.o, o_b: b.o_b }
}

fn cross_slots(b: &BlockSlots) -> AttnSlots {
    AttnSlots { q: b.xq, k: b.xk, v: b.xv, o: b.xo, o_b: b.xo_b }
}

/// Shared per-forward context.
#[derive(Debug)]
struct Context {
    heads: usize,
    rope_self: Rope,
    rope_xq: Option<Rope>,
    rope_xk: Option<Rope>,
    key_mask: Option<Vec<bool>>,
    guide: Option<Mat>,
}

impl Context {
    fn self_input<'a>(&'a self, h: &'a Mat) -> AttnInput<'a> {
        AttnInput {
            xq: h,
            xkv: h,
            rope_q: Some(&self.rope_self),
            rope_k: Some(&self.rope_self),
            key_mask: self.key_mask.as_deref(),
            heads: self.heads,
        }
    }

    fn cross_input<'a>(&'a self, h: &'a Mat, guide: &'a Mat) -> AttnInput<'a> {
        AttnInput { xq: h, xkv: guide, rope_q: self.rope_xq.as_ref(), rope_k: self.rope_xk.as_ref(), key_mask: None, heads: self.heads }
    }
}

#[derive(Debug)]
struct CrossTape {
    norm: Norm,
    h: Mat,
    cache: AttnCache,
    out: Mat,
}

#[derive(Debug)]
struct BlockTape {
    modv: Vec<f64>,
    norm1: Norm,
    h1: Mat,
    attn: AttnCache,
    a1: Mat,
    cross: Option<CrossTape>,
    norm3: Norm,
    h3: Mat,
    u: Mat,
    f: Mat,
    o: Mat,
}

fn chunk(v: &[f64], i: usize, d: usize) -> &[f64] {
    &v[i * d..(i + 1) * d]
}

fn block_forward(p: &[f64], bs: &BlockSlots, mut x: Mat, sm: &Mat, ctx: &Context) -> (Mat, BlockTape) {
    let d = x.cols;
    let modv = linear(sm, &p[bs.ada_w.range()], Some(&p[bs.ada_b.range()]), 9 * d).data;
    let m = |i| chunk(&modv, i, d);

    let norm1 = layer_norm(&x);
    let h1 = modulate(&norm1.n, m(0), m(1));
    let (a1, attn) = attention::forward(p, self_slots(bs), &ctx.self_input(&h1));
    gated_add(&mut x, m(2), &a1);

    let cross = ctx.guide.as_ref().map(|guide| {
        let norm = layer_norm(&x);
        let h = modulate(&norm.n, m(3), m(4));
        let (out, cache) = attention::forward(p, cross_slots(bs), &ctx.cross_input(&h, guide));
        gated_add(&mut x, m(5), &out);
        CrossTape { norm, h, cache, out }
    });

    let norm3 = layer_norm(&x);
    let h3 = modulate(&norm3.n, m(6), m(7));
    let u = linear(&h3, &p[bs.ff1.range()], Some(&p[bs.ff1_b.range()]), bs.ff1.cols);
    let f = Mat::from_vec(u.rows, u.cols, u.data.iter().map(|&v| gelu(v)).collect());
    let o = linear(&f, &p[bs.ff2.range()], Some(&p[bs.ff2_b.range()]), d);
    gated_add(&mut x, m(8), &o);
    let tape = BlockTape { modv, norm1, h1, attn, a1, cross, norm3, h3, u, f, o };
    (x, tape)
}

#[allow(clippy::too_many_arguments)]
fn block_backward(
    p: &[f64],
    g: &mut [f64],
    bs: &BlockSlots,
    t: &BlockTape,
    ctx: &Context,
    sm: &Mat,
    mut dx: Mat,
    dsm: &mut Mat,
    dguide: &mut Option<Mat>,
) -> Mat {
    let d = dx.cols;
    let m = |i| chunk(&t.modv, i, d);
    let mut dmod = vec![0.0; 9 * d];
    let mut put = |i: usize, v: Vec<f64>| dmod[i * d..(i + 1) * d].copy_from_slice(&v);

    let (d_o, dg3) = gate_backward(&dx, m(8), &t.o);
    put(8, dg3);
    let (w2, b2) = split_weight_bias(g, bs.ff2, bs.ff2_b);
    let mut du = linear_backward(&t.f, &p[bs.ff2.range()], &d_o, w2, Some(b2), true).unwrap();
    for (v, &u) in du.data.iter_mut().zip(&t.u.data) {
        *v *= gelu_grad(u);
    }
    let (w1, b1) = split_weight_bias(g, bs.ff1, bs.ff1_b);
    let dh3 = linear_backward(&t.h3, &p[bs.ff1.range()], &du, w1, Some(b1), true).unwrap();
    let (dn3, dsh3, dsc3) = modulate_backward(&dh3, &t.norm3.n, m(7));
    put(6, dsh3);
    put(7, dsc3);
    dx.add_assign(&layer_norm_backward(&dn3, &t.norm3));

    if let (Some(ct), Some(guide)) = (&t.cross, ctx.guide.as_ref()) {
        let (dc, dg2) = gate_backward(&dx, m(5), &ct.out);
        put(5, dg2);
        let (dh, dg) = attention::backward(p, g, cross_slots(bs), &ctx.cross_input(&ct.h, guide), &ct.cache, &dc);
        match dguide {
            Some(acc) => acc.add_assign(&dg),
            None => *dguide = Some(dg),
        }
        let (dn, dsh2, dsc2) = modulate_backward(&dh, &ct.norm.n, m(4));
        put(3, dsh2);
        put(4, dsc2);
        dx.add_assign(&layer_norm_backward(&dn, &ct.norm));
    }

    let (da, dg1) = gate_backward(&dx, m(2), &t.a1);
    put(2, dg1);
    let (mut dh1, dkv) = attention::backward(p, g, self_slots(bs), &ctx.self_input(&t.h1), &t.attn, &da);
    dh1.add_assign(&dkv);
    let (dn1, dsh1, dsc1) = modulate_backward(&dh1, &t.norm1.n, m(1));
    put(0, dsh1);
    put(1, dsc1);
    dx.add_assign(&layer_norm_backward(&dn1, &t.norm1));

    let dmod = Mat::from_vec(1, 9 * d, dmod);
    let (aw, ab) = split_weight_bias(g, bs.ada_w, bs.ada_b);
    dsm.add_assign(&linear_backward(sm, &p[bs.ada_w.range()], &dmod, aw, Some(ab), true).unwrap());
    dx
}

#[derive(Debug)]
struct Recorded {
    n_vox: usize,
    x_in: Mat,
    pt_feat: Mat,
    pt_gamma: Option<Mat>,
    pt_valid: [bool; MAX_POINTS],
    time: MlpTape,
    task: MlpTape,
    m: Vec<f64>,
    sm: Mat,
    patches: Option<Mat>,
    ctx: Context,
    blocks: Vec<BlockTape>,
    fmod: Vec<f64>,
    norm_f: Norm,
    hf_vox: Mat,
}

/// Activations of one forward pass, consumed by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    inner: Option<Box<Recorded>>,
}

fn cell_coords(c: &[u16; 3]) -> [f64; 3] {
    c.map(f64::from)
}

/// Center of patch `idx` along an image axis of `pixels`, in latent-cell units.
fn patch_center_latent(idx: usize, patch: usize, pixels: u32, voxel_res: u32, stride: u32) -> f64 {
    let x = (idx * patch) as f64 + patch as f64 / 2.0;
    let vox = x * f64::from(voxel_res) / f64::from(pixels);
    vox / f64::from(stride) - 0.5
}

fn cross_ropes(cfg_heads_dim: usize, base: f64, token_coords: &[[f64; 3]], map: &GuidanceMap, y_t: &LatentGrid, patch: usize) -> (Rope, Rope) {
    let da = map.view.depth_axis();
    let (ua, va) = map.view.image_axes();
    let q: Vec<[f64; 3]> = token_coords
        .iter()
        .map(|c| {
            let mut c = *c;
            c[da] = 0.0;
            c
        })
        .collect();
    let (pw, ph) = (map.width as usize / patch, map.height as usize / patch);
    let mut k = Vec::with_capacity(pw * ph);
    for pr in 0..ph {
        for pc in 0..pw {
            let mut c = [0.0; 3];
            c[ua] = patch_center_latent(pc, patch, map.width, y_t.voxel_resolution(), y_t.stride());
            c[va] = patch_center_latent(pr, patch, map.height, y_t.voxel_resolution(), y_t.stride());
            k.push(c);
        }
    }
    (Rope::new(&q, cfg_heads_dim, base), Rope::new(&k, cfg_heads_dim, base))
}

impl ModelParams {
    /// Predicted velocity on the support of `y_t`.
    pub fn forward(&self, y_t: &LatentGrid, z: &LatentGrid, cond: &TaskCondition, t: f64) -> Result<LatentGrid, ModelError> {
        self.forward_recorded(y_t, z, cond, t).map(|(v, _)| v)
    }

    pub fn forward_recorded(
        &self,
        y_t: &LatentGrid,
        z: &LatentGrid,
        cond: &TaskCondition,
        t: f64,
    ) -> Result<(LatentGrid, Tape), ModelError> {
        let cfg = self.config();
        let l = self.layout();
        let p = self.as_slice();
        let d = cfg.d_model;
        for grid in [y_t, z] {
            if grid.dim() != cfg.d_lat {
                return Err(ModelError::DimMismatch { expected: cfg.d_lat, got: grid.dim() });
            }
        }
        if !y_t.same_support(z) {
            return Err(ModelError::CoordMismatch);
        }
        let n = y_t.len();
        let mut x_in = Mat::zeros(n, 2 * cfg.d_lat);
        for i in 0..n {
            let row = x_in.row_mut(i);
            row[..cfg.d_lat].copy_from_slice(z.cell(i));
            row[cfg.d_lat..].copy_from_slice(y_t.cell(i));
        }
        let vox = linear(&x_in, self.get(l.in_w), Some(self.get(l.in_b)), d);

        let empty = PointPrompt::default();
        let prompt = match cond {
            TaskCondition::Interactive(prompt) => prompt,
            _ => &empty,
        };
        let pts = build_point_tokens(prompt, self)?;
        let pt_gamma = (cfg.point_embed == PointEmbed::Explicit).then(|| {
            let mut gm = Mat::zeros(MAX_POINTS, POINT_FREQ_DIM);
            for i in (0..MAX_POINTS).filter(|&i| pts.valid[i]) {
                gm.row_mut(i).copy_from_slice(&point_frequencies(pts.coords[i]));
            }
            gm
        });
        let pt_feat = Mat::from_vec(MAX_POINTS, d, pts.features);
        let x = vox.vstack(&linear(&pt_feat, self.get(l.pt_w), None, d));

        let r_lat = f64::from(y_t.resolution());
        let mut coords: Vec<[f64; 3]> = y_t.coords().iter().map(cell_coords).collect();
        for i in 0..MAX_POINTS {
            coords.push(if pts.valid[i] { pts.coords[i].map(|u| (u * r_lat).floor().min(r_lat - 1.0)) } else { [0.0; 3] });
        }
        let head_dim = cfg.head_dim();

        let time = mlp_forward(self, time_slots(self), time_encoding(self, t));
        let task = mlp_forward(self, task_slots(self), sinusoidal(f64::from(cond.task().index()), cfg.freq_dim));
        let m = super::fuse_modulation(&time.out, &task.out);
        let sm = Mat::from_vec(1, d, m.iter().map(|&v| silu(v)).collect());

        let (patches, guide, rope_xq, rope_xk) = match cond {
            TaskCondition::GuidedFull(map) => {
                let patches = guidance_patches(map, cfg.patch_size)?;
                let tokens = guidance_tokens(self, &patches, map);
                let (rq, rk) = if cfg.cross_rope {
                    let (rq, rk) = cross_ropes(head_dim, cfg.rope_base, &coords, map, y_t, cfg.patch_size);
                    (Some(rq), Some(rk))
                } else {
                    (None, None)
                };
                (Some(patches), Some(tokens), rq, rk)
            }
            _ => (None, None, None, None),
        };
        let key_mask = cfg.mask_padded_points.then(|| {
            let mut mask = vec![true; n];
            mask.extend_from_slice(&pts.valid);
            mask
        });
        let ctx = Context { heads: cfg.heads, rope_self: Rope::new(&coords, head_dim, cfg.rope_base), rope_xq, rope_xk, key_mask, guide };

        let mut x = x;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for bs in &l.blocks {
            let (next, tape) = block_forward(p, bs, x, &sm, &ctx);
            x = next;
            blocks.push(tape);
        }
        if !x.all_finite() {
            return Err(ModelError::NonFiniteActivation("transformer blocks"));
        }
        let fmod = linear(&sm, self.get(l.final_w), Some(self.get(l.final_b)), 2 * d).data;
        let norm_f = layer_norm(&x);
        let hf = modulate(&norm_f.n, &fmod[..d], &fmod[d..]);
        let hf_vox = Mat::from_vec(n, d, hf.data[..n * d].to_vec());
        let out = linear(&hf_vox, self.get(l.out_w), Some(self.get(l.out_b)), cfg.d_lat);
        if !out.all_finite() {
            return Err(ModelError::NonFiniteActivation("output"));
        }
        let velocity = y_t.with_values(out.data);
        let rec = Recorded {
            n_vox: n,
            x_in,
            pt_feat,
            pt_gamma,
            pt_valid: pts.valid,
            time,
            task,
            m,
            sm,
            patches,
            ctx,
            blocks,
            fmod,
            norm_f,
            hf_vox,
        };
        Ok((velocity, Tape { inner: Some(Box::new(rec)) }))
    }
}

impl Tape {
    pub fn is_recorded(&self) -> bool {
        self.inner.is_some()
    }

    /// Parameter gradient of `sum(adjoint * output)`.
    pub fn backward(&self, params: &ModelParams, adjoint: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut grads = vec![0.0; params.count()];
        self.backward_into(params, adjoint, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Tape::backward`] but accumulates into `grads`.
    pub fn backward_into(&self, params: &ModelParams, adjoint: &[f64], grads: &mut [f64]) -> Result<(), ModelError> {
        let rec = self.inner.as_deref().ok_or(ModelError::NoRecordedForward)?;
        let cfg = params.config();
        let l = params.layout();
        let p = params.as_slice();
        let g = grads;
        let d = cfg.d_model;
        let n = rec.n_vox;
        if adjoint.len() != n * cfg.d_lat {
            return Err(ModelError::BadDimensions(format!("adjoint has {} values, output has {}", adjoint.len(), n * cfg.d_lat)));
        }
        if g.len() != params.count() {
            return Err(ModelError::BadDimensions("gradient buffer does not match parameter count".into()));
        }

        let dout = Mat::from_vec(n, cfg.d_lat, adjoint.to_vec());
        let (ow, ob) = split_weight_bias(g, l.out_w, l.out_b);
        let dhf_vox = linear_backward(&rec.hf_vox, params.get(l.out_w), &dout, ow, Some(ob), true).unwrap();
        let mut dhf = Mat::zeros(n + MAX_POINTS, d);
        dhf.data[..n * d].copy_from_slice(&dhf_vox.data);
        let (dn, mut dfmod, dscale) = modulate_backward(&dhf, &rec.norm_f.n, &rec.fmod[d..]);
        dfmod.extend(dscale);
        let mut dx = layer_norm_backward(&dn, &rec.norm_f);
        let mut dsm = Mat::zeros(1, d);
        let (fw, fb) = split_weight_bias(g, l.final_w, l.final_b);
        dsm.add_assign(&linear_backward(&rec.sm, params.get(l.final_w), &Mat::from_vec(1, 2 * d, dfmod), fw, Some(fb), true).unwrap());

        let mut dguide = None;
        for (bs, tape) in l.blocks.iter().zip(&rec.blocks).rev() {
            dx = block_backward(p, g, bs, tape, &rec.ctx, &rec.sm, dx, &mut dsm, &mut dguide);
        }

        let dvox = Mat::from_vec(n, d, dx.data[..n * d].to_vec());
        let (iw, ib) = split_weight_bias(g, l.in_w, l.in_b);
        linear_backward(&rec.x_in, params.get(l.in_w), &dvox, iw, Some(ib), false);
        let dpt = Mat::from_vec(MAX_POINTS, d, dx.data[n * d..].to_vec());
        let dfeat = linear_backward(&rec.pt_feat, params.get(l.pt_w), &dpt, &mut g[l.pt_w.range()], None, true).unwrap();
        for i in (0..MAX_POINTS).filter(|&i| rec.pt_valid[i]) {
            for (a, b) in g[l.e_p.range()].iter_mut().zip(dfeat.row(i)) {
                *a += b;
            }
        }
        if let (Some(gamma), Some(fw)) = (&rec.pt_gamma, l.freq_w) {
            linear_backward(gamma, params.get(fw), &dfeat, &mut g[fw.range()], None, false);
        }

        let dm: Vec<f64> = dsm.data.iter().zip(&rec.m).map(|(a, &m)| a * silu_grad(m)).collect();
        mlp_backward(params, g, time_slots(params), &rec.time, &dm);
        mlp_backward(params, g, task_slots(params), &rec.task, &dm);

        if let (Some(dg), Some(patches)) = (dguide, &rec.patches) {
            let (gw, gb) = split_weight_bias(g, l.guide_w, l.guide_b);
            linear_backward(patches, params.get(l.guide_w), &dg, gw, Some(gb), false);
        }
        Ok(())
    }
}
