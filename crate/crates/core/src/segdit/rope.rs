use crate::linalg::Mat;

/// Per-token rotary tables for 3D positions. Each head's leading dimensions are
/// split into three equal groups of rotated pairs, one per axis; dimensions
/// beyond `6 * pairs` stay unrotated.
#[derive(Debug, Clone)]
pub(crate) struct Rope {
    pairs: usize,
    head_dim: usize,
    /// `tokens x 3 * pairs` angle tables.
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rope {
    pub fn new(coords: &[[f64; 3]], head_dim: usize, base: f64) -> Self {
        let pairs = head_dim / 2 / 3;
        let freqs: Vec<f64> = (0..pairs).map(|i| base.powf(-(i as f64) / pairs as f64)).collect();
        let mut cos = Vec::with_capacity(coords.len() * 3 * pairs);
        let mut sin = Vec::with_capacity(coords.len() * 3 * pairs);
        for c in coords {
            for &p in c {
                for &f in &freqs {
                    let (s, co) = (p * f).sin_cos();
                    cos.push(co);
                    sin.push(s);
                }
            }
        }
        Self { pairs, head_dim, cos, sin }
    }

    /// Rotates rows of `m` (`tokens x heads * head_dim`) in place; `inverse`
    /// applies the transpose rotation, which is also the backward map.
    pub fn apply(&self, m: &mut Mat, inverse: bool) {
        let per = 3 * self.pairs;
        debug_assert_eq!(self.cos.len(), m.rows * per);
        let sign = if inverse { -1.0 } else { 1.0 };
        for t in 0..m.rows {
            let cos = &self.cos[t * per..(t + 1) * per];
            let sin = &self.sin[t * per..(t + 1) * per];
            for head in m.row_mut(t).chunks_exact_mut(self.head_dim) {
                for (j, (&c, &s)) in cos.iter().zip(sin).enumerate() {
                    let s = sign * s;
                    let (x0, x1) = (head[2 * j], head[2 * j + 1]);
                    head[2 * j] = x0 * c - x1 * s;
                    head[2 * j + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}
