use ndarray::{s, Array2};
use rand::Rng;

use super::layers::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear};
use super::params::{join, Params};
use super::{softmax_rows_inplace, Mat};

/// Multi-head self-attention over a batch of equal-length sequences stacked
/// row-wise (`n_seq · seq_len` rows).
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Mat,
    qkv: Mat,
    probs: Vec<Mat>,
    merged: Mat,
    seq_len: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize) -> Self {
        Attention {
            qkv: Linear::new(rng, dim, 3 * dim),
            proj: Linear::new(rng, dim, dim),
            heads,
        }
    }

    fn dim(&self) -> usize {
        self.proj.d_out()
    }

    pub fn forward(&self, x: &Mat, seq_len: usize, causal: bool) -> (Mat, AttentionCache) {
        let n = x.nrows();
        debug_assert_eq!(n % seq_len, 0);
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qkv = self.qkv.forward(x);
        let mut merged = Array2::<f32>::zeros((n, d));
        let mut probs = Vec::with_capacity(n / seq_len * self.heads);
        for sq in 0..n / seq_len {
            let (r0, r1) = (sq * seq_len, (sq + 1) * seq_len);
            for h in 0..self.heads {
                let q = qkv.slice(s![r0..r1, h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![r0..r1, d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![r0..r1, 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut p = q.dot(&k.t());
                p.mapv_inplace(|z| z * scale);
                if causal {
                    for i in 0..seq_len {
                        for j in i + 1..seq_len {
                            p[[i, j]] = f32::NEG_INFINITY;
                        }
                    }
                }
                softmax_rows_inplace(&mut p);
                let mut out = merged.slice_mut(s![r0..r1, h * dh..(h + 1) * dh]);
                ndarray::linalg::general_mat_mul(1.0, &p, &v, 0.0, &mut out);
                probs.push(p);
            }
        }
        let y = self.proj.forward(&merged);
        (
            y,
            AttentionCache {
                x: x.clone(),
                qkv,
                probs,
                merged,
                seq_len,
            },
        )
    }

    pub fn backward(&self, cache: &AttentionCache, dy: &Mat, grad: &mut Attention) -> Mat {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let t = cache.seq_len;
        let n = dy.nrows();
        let dmerged = self.proj.backward(&cache.merged, dy, &mut grad.proj);
        let mut dqkv = Array2::<f32>::zeros((n, 3 * d));
        let mut idx = 0;
        for sq in 0..n / t {
            let (r0, r1) = (sq * t, (sq + 1) * t);
            for h in 0..self.heads {
                let p = &cache.probs[idx];
                idx += 1;
                let q = cache.qkv.slice(s![r0..r1, h * dh..(h + 1) * dh]);
                let k = cache.qkv.slice(s![r0..r1, d + h * dh..d + (h + 1) * dh]);
                let v = cache.qkv.slice(s![r0..r1, 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let dout = dmerged.slice(s![r0..r1, h * dh..(h + 1) * dh]);
                {
                    let mut dv = dqkv.slice_mut(s![r0..r1, 2 * d + h * dh..2 * d + (h + 1) * dh]);
                    ndarray::linalg::general_mat_mul(1.0, &p.t(), &dout, 0.0, &mut dv);
                }
                let mut ds = dout.dot(&v.t());
                for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f32 = dsr.iter().zip(pr.iter()).map(|(a, b)| a * b).sum();
                    dsr.zip_mut_with(&pr, |g, &pv| *g = pv * (*g - dot) * scale);
                }
                {
                    let mut dq = dqkv.slice_mut(s![r0..r1, h * dh..(h + 1) * dh]);
                    ndarray::linalg::general_mat_mul(1.0, &ds, &k, 0.0, &mut dq);
                }
                {
                    let mut dk = dqkv.slice_mut(s![r0..r1, d + h * dh..d + (h + 1) * dh]);
                    ndarray::linalg::general_mat_mul(1.0, &ds.t(), &q, 0.0, &mut dk);
                }
            }
        }
        self.qkv.backward(&cache.x, &dqkv, &mut grad.qkv)
    }
}

impl Params for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(rng, dim, hidden),
            fc2: Linear::new(rng, hidden, dim),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, MlpCache) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Mat, grad: &mut Mlp) -> Mat {
        let mut dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        dact.zip_mut_with(&cache.pre, |g, &p| *g *= gelu_grad(p));
        self.fc1.backward(&cache.x, &dact, &mut grad.fc1)
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    n1: LayerNormCache,
    attn: AttentionCache,
    n2: LayerNormCache,
    mlp: MlpCache,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize, mlp_hidden: usize) -> Self {
        Block {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(rng, dim, heads),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, mlp_hidden),
        }
    }

    pub fn forward(&self, x: &Mat, seq_len: usize, causal: bool) -> (Mat, BlockCache) {
        let (h1, n1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(&h1, seq_len, causal);
        let x1 = x + &a;
        let (h2, n2) = self.norm2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&h2);
        (&x1 + &m, BlockCache { n1, attn, n2, mlp })
    }

    pub fn infer(&self, x: &Mat, seq_len: usize, causal: bool) -> Mat {
        self.forward(x, seq_len, causal).0
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Mat, grad: &mut Block) -> Mat {
        let dh2 = self.mlp.backward(&cache.mlp, dy, &mut grad.mlp);
        let dx1 = dy + &self.norm2.backward(&cache.n2, &dh2, &mut grad.norm2);
        let dh1 = self.attn.backward(&cache.attn, &dx1, &mut grad.attn);
        &dx1 + &self.norm1.backward(&cache.n1, &dh1, &mut grad.norm1)
    }
}

impl Params for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::trunc_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_block(causal: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut block = Block::new(&mut rng, 8, 2, 16);
        // larger weights so attention is not uniform
        block.visit_mut("", &mut |name, _, d| {
            if name.ends_with("weight") {
                d.iter_mut().for_each(|v| *v *= 15.0);
            }
        });
        let x = trunc_normal(&mut rng, (6, 8), 1.0);
        let probe = trunc_normal(&mut rng, (6, 8), 1.0);
        let (_, cache) = block.forward(&x, 3, causal);
        let mut g = block.clone();
        g.zero();
        let dx = block.backward(&cache, &probe, &mut g);
        let h = 1e-2f32;
        let mut bad = 0;
        for r in 0..6 {
            for c in 0..8 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fp = (&block.infer(&xp, 3, causal) * &probe).sum();
                let fm = (&block.infer(&xm, 3, causal) * &probe).sum();
                let num = (fp - fm) / (2.0 * h);
                let a = dx[[r, c]];
                if (num - a).abs() > 2e-2 * num.abs().max(a.abs()).max(0.1) {
                    bad += 1;
                }
            }
        }
        assert_eq!(bad, 0);

        // one weight coordinate through the attention path
        let g_an = g.attn.qkv.weight[[2, 3]];
        let mut bp = block.clone();
        bp.attn.qkv.weight[[2, 3]] += h;
        let mut bm = block.clone();
        bm.attn.qkv.weight[[2, 3]] -= h;
        let num = ((&bp.infer(&x, 3, causal) * &probe).sum() - (&bm.infer(&x, 3, causal) * &probe).sum()) / (2.0 * h);
        assert!((num - g_an).abs() < 2e-2 * num.abs().max(0.1), "{num} vs {g_an}");
    }

    #[test]
    fn block_backward_matches_fd() {
        check_block(false);
    }

    #[test]
    fn causal_block_backward_matches_fd() {
        check_block(true);
    }

    #[test]
    fn causal_attention_ignores_future_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = Block::new(&mut rng, 8, 2, 16);
        let x = trunc_normal(&mut rng, (4, 8), 1.0);
        let mut x2 = x.clone();
        x2.row_mut(3).fill(5.0);
        let a = block.infer(&x, 4, true);
        let b = block.infer(&x2, 4, true);
        assert_eq!(a.slice(s![0..3, ..]), b.slice(s![0..3, ..]));
    }
}
