use super::params::Slot;
use super::rope::Rope;
use crate::linalg::{gemm, linear, linear_backward, Mat, View};

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnSlots {
    pub q: Slot,
    pub k: Slot,
    pub v: Slot,
    pub o: Slot,
    pub o_b: Slot,
}

/// Activations kept for the backward pass.
#[derive(Debug)]
pub(crate) struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    /// `heads x nq x nk` softmax weights.
    probs: Vec<f64>,
    ctx: Mat,
}

pub(crate) struct AttnInput<'a> {
    pub xq: &'a Mat,
    pub xkv: &'a Mat,
    pub rope_q: Option<&'a Rope>,
    pub rope_k: Option<&'a Rope>,
    /// Keys with `false` receive zero attention weight.
    pub key_mask: Option<&'a [bool]>,
    pub heads: usize,
}

fn head_view(m: &Mat, h: usize, dh: usize) -> View<'_> {
    View { data: &m.data[h * dh..], rs: m.cols, cs: 1 }
}

fn head_view_t(m: &Mat, h: usize, dh: usize) -> View<'_> {
    View { data: &m.data[h * dh..], rs: 1, cs: m.cols }
}

pub(crate) fn forward(p: &[f64], s: AttnSlots, inp: &AttnInput) -> (Mat, AttnCache) {
    let d = s.q.cols;
    let dh = d / inp.heads;
    let (nq, nk) = (inp.xq.rows, inp.xkv.rows);
    let mut q = linear(inp.xq, &p[s.q.range()], None, d);
    let mut k = linear(inp.xkv, &p[s.k.range()], None, d);
    let v = linear(inp.xkv, &p[s.v.range()], None, d);
    if let Some(r) = inp.rope_q {
        r.apply(&mut q, false);
    }
    if let Some(r) = inp.rope_k {
        r.apply(&mut k, false);
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; inp.heads * nq * nk];
    let mut ctx = Mat::zeros(nq, d);
    for h in 0..inp.heads {
        let pr = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        gemm(nq, dh, nk, scale, head_view(&q, h, dh), head_view_t(&k, h, dh), 0.0, pr, nk);
        for row in pr.chunks_exact_mut(nk) {
            softmax_row(row, inp.key_mask);
        }
        gemm(nq, nk, dh, 1.0, View::rowmajor(pr, nk), head_view(&v, h, dh), 0.0, &mut ctx.data[h * dh..], d);
    }
    let out = linear(&ctx, &p[s.o.range()], Some(&p[s.o_b.range()]), d);
    (out, AttnCache { q, k, v, probs, ctx })
}

fn softmax_row(row: &mut [f64], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = row.iter().enumerate().filter(|&(j, _)| keep(j)).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        *v = if keep(j) { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    if sum > 0.0 {
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Accumulates parameter gradients into `g` and returns `(dxq, dxkv)`.
pub(crate) fn backward(p: &[f64], g: &mut [f64], s: AttnSlots, inp: &AttnInput, cache: &AttnCache, dout: &Mat) -> (Mat, Mat) {
    let d = s.q.cols;
    let dh = d / inp.heads;
    let (nq, nk) = (inp.xq.rows, inp.xkv.rows);
    let (o_w, o_b) = split_weight_bias(g, s.o, s.o_b);
    let dctx = linear_backward(&cache.ctx, &p[s.o.range()], dout, o_w, Some(o_b), true).unwrap();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(nq, d);
    let mut dk = Mat::zeros(nk, d);
    let mut dv = Mat::zeros(nk, d);
    let mut ds = vec![0.0; nq * nk];
    for h in 0..inp.heads {
        let pr = &cache.probs[h * nq * nk..(h + 1) * nq * nk];
        gemm(nq, dh, nk, 1.0, head_view(&dctx, h, dh), head_view_t(&cache.v, h, dh), 0.0, &mut ds, nk);
        gemm(nk, nq, dh, 1.0, View::transposed(pr, nk), head_view(&dctx, h, dh), 0.0, &mut dv.data[h * dh..], d);
        for (drow, prow) in ds.chunks_exact_mut(nk).zip(pr.chunks_exact(nk)) {
            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
            for (dv, &pv) in drow.iter_mut().zip(prow) {
                *dv = pv * (*dv - dot);
            }
        }
        gemm(nq, nk, dh, scale, View::rowmajor(&ds, nk), head_view(&cache.k, h, dh), 0.0, &mut dq.data[h * dh..], d);
        gemm(nk, nq, dh, scale, View::transposed(&ds, nk), head_view(&cache.q, h, dh), 0.0, &mut dk.data[h * dh..], d);
    }
    if let Some(r) = inp.rope_q {
        r.apply(&mut dq, true);
    }
    if let Some(r) = inp.rope_k {
        r.apply(&mut dk, true);
    }
    let dxq = linear_backward(inp.xq, &p[s.q.range()], &dq, &mut g[s.q.range()], None, true).unwrap();
    let mut dxkv = linear_backward(inp.xkv, &p[s.k.range()], &dk, &mut g[s.k.range()], None, true).unwrap();
    let dxv = linear_backward(inp.xkv, &p[s.v.range()], &dv, &mut g[s.v.range()], None, true).unwrap();
    dxkv.add_assign(&dxv);
    (dxq, dxkv)
}

/// Disjoint mutable views of a weight and its bias.
pub(crate) fn split_weight_bias(g: &mut [f64], w: Slot, b: Slot) -> (&mut [f64], &mut [f64]) {
    assert_eq!(w.off + w.len(), b.off, "bias must follow its weight");
    let (head, tail) = g[w.off..].split_at_mut(w.len());
    (head, &mut tail[..b.len()])
}
