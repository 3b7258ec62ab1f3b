use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{gelu, gelu_grad, join_name, l2_normalize_rows, l2_normalize_rows_backward, trunc_normal, Linear, Mat, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_dims: Vec<usize>,
    pub bottleneck_dim: usize,
    /// Number of prototypes `K`.
    pub n_prototypes: usize,
    pub student_temp: f64,
    /// Teacher temperature at the end of its warmup; the warmup itself is a
    /// training schedule.
    pub teacher_temp: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden_dims: vec![256, 256],
            bottleneck_dim: 64,
            n_prototypes: 1024,
            student_temp: 0.1,
            teacher_temp: 0.07,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_prototypes >= 2, Config, "n_prototypes must be ≥ 2");
        ensure!(self.student_temp > 0.0 && self.teacher_temp > 0.0, Config, "temperatures must be > 0");
        ensure!(self.bottleneck_dim >= 1, Config, "bottleneck_dim must be ≥ 1");
        Ok(())
    }
}

/// MLP → bottleneck → L2 normalize → weight-normalized linear to `K` logits.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub layers: Vec<Linear>,
    /// `bottleneck × K`; columns are normalized on use.
    pub prototypes: Mat,
}

pub struct HeadCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
    z_norm: Mat,
    z_norms: Vec<f32>,
    v_norm: Mat,
    v_norms: Vec<f32>,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_dim: usize, cfg: &HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let mut dims = vec![in_dim];
        dims.extend(&cfg.hidden_dims);
        dims.push(cfg.bottleneck_dim);
        let layers = dims.windows(2).map(|w| Linear::new(rng, w[0], w[1])).collect();
        Ok(ProjectionHead {
            layers,
            prototypes: trunc_normal(rng, (cfg.bottleneck_dim, cfg.n_prototypes), 0.02),
        })
    }

    pub fn n_prototypes(&self) -> usize {
        self.prototypes.ncols()
    }

    fn normalized_prototypes(&self) -> (Mat, Vec<f32>) {
        let (vt, norms) = l2_normalize_rows(self.prototypes.t(), 1e-12);
        (vt.reversed_axes().as_standard_layout().to_owned(), norms)
    }

    pub fn forward(&self, x: &Mat) -> (Mat, HeadCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            let a = l.forward(&h);
            h = if i < last { a.mapv(gelu) } else { a.clone() };
            pre.push(a);
        }
        let (z_norm, z_norms) = l2_normalize_rows(h.view(), 1e-12);
        let (v_norm, v_norms) = self.normalized_prototypes();
        let logits = z_norm.dot(&v_norm);
        (
            logits,
            HeadCache {
                inputs,
                pre,
                z_norm,
                z_norms,
                v_norm,
                v_norms,
            },
        )
    }

    pub fn infer(&self, x: &Mat) -> Mat {
        self.forward(x).0
    }

    pub fn backward(&self, cache: &HeadCache, dlogits: &Mat, grad: &mut ProjectionHead) -> Mat {
        // prototypes
        let dv_norm = cache.z_norm.t().dot(dlogits);
        let vt = cache.v_norm.t().to_owned();
        let dvt = dv_norm.t().to_owned();
        let dv = l2_normalize_rows_backward(&vt, &cache.v_norms, &dvt);
        grad.prototypes += &dv.t();
        // bottleneck normalization
        let dz_norm = dlogits.dot(&cache.v_norm.t());
        let mut dh = l2_normalize_rows_backward(&cache.z_norm, &cache.z_norms, &dz_norm);
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                dh.zip_mut_with(&cache.pre[i], |g, &p| *g *= gelu_grad(p));
            }
            dh = self.layers[i].backward(&cache.inputs[i], &dh, &mut grad.layers[i]);
        }
        dh
    }
}

impl Params for ProjectionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join_name(prefix, &format!("mlp.{i}")), f);
        }
        f(&join_name(prefix, "prototypes"), self.prototypes.shape(), self.prototypes.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join_name(prefix, &format!("mlp.{i}")), f);
        }
        let s = self.prototypes.shape().to_vec();
        f(&join_name(prefix, "prototypes"), &s, self.prototypes.as_slice_mut().unwrap());
    }
}

/// Row-wise `log_softmax(logits / temp)` in f64, max-subtracted.
pub fn log_softmax_rows(logits: &Array2<f64>, temp: f64) -> Array2<f64> {
    let mut out = logits.mapv(|v| v / temp);
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Gradient of a loss w.r.t. `logits` given its gradient w.r.t.
/// `log_softmax(logits / temp)`.
pub fn log_softmax_backward(log_probs: &Array2<f64>, d_log_probs: &Array2<f64>, temp: f64) -> Array2<f64> {
    let mut out = d_log_probs.clone();
    let sums = d_log_probs.sum_axis(Axis(1));
    for ((mut row, lp), s) in out.rows_mut().into_iter().zip(log_probs.rows()).zip(sums.iter()) {
        row.zip_mut_with(&lp, |g, &l| *g = (*g - l.exp() * s) / temp);
    }
    out
}

/// DINO head forward: projection head followed by a temperature-scaled
/// log-softmax over the `K` prototypes.
pub fn dino_head_forward(cls_tokens: &Mat, head: &ProjectionHead, temp: f64) -> Array2<f64> {
    log_softmax_rows(&head.infer(cls_tokens).mapv(f64::from), temp)
}

pub fn to_f64(m: &Mat) -> Array2<f64> {
    m.mapv(f64::from)
}

pub fn to_f32(m: &Array2<f64>) -> Mat {
    m.mapv(|v| v as f32)
}

pub fn zeros_like_head(h: &ProjectionHead) -> ProjectionHead {
    let mut g = h.clone();
    g.zero();
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> HeadConfig {
        HeadConfig {
            hidden_dims: vec![12],
            bottleneck_dim: 6,
            n_prototypes: 5,
            student_temp: 0.1,
            teacher_temp: 0.05,
        }
    }

    #[test]
    fn zero_logits_give_uniform() {
        let lp = log_softmax_rows(&Array2::zeros((2, 4)), 0.1);
        for v in lp.iter() {
            assert!((v - (0.25f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn sharpening_with_lower_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = ProjectionHead::new(&mut rng, 8, &cfg()).unwrap();
        let x = trunc_normal(&mut rng, (3, 8), 1.0);
        let a = dino_head_forward(&x, &head, 0.2);
        let b = dino_head_forward(&x, &head, 0.1);
        for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
            let ma = ra.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mb = rb.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(mb >= ma);
        }
    }

    #[test]
    fn finite_for_large_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = ProjectionHead::new(&mut rng, 8, &cfg()).unwrap();
        let x = trunc_normal(&mut rng, (3, 8), 1.0).mapv(|v| v * 1e3 / 2.0);
        assert!(dino_head_forward(&x, &head, 0.01).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn head_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = ProjectionHead::new(&mut rng, 8, &cfg()).unwrap();
        head.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|v| *v *= 20.0));
        let x = trunc_normal(&mut rng, (3, 8), 1.0);
        let probe = trunc_normal(&mut rng, (3, 5), 1.0);
        let (_, cache) = head.forward(&x);
        let mut g = zeros_like_head(&head);
        let dx = head.backward(&cache, &probe, &mut g);
        let loss = |h: &ProjectionHead, x: &Mat| (&h.infer(x) * &probe).sum();
        let h = 1e-3f32;
        for r in 0..3 {
            for c in 0..8 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let num = (loss(&head, &xp) - loss(&head, &xm)) / (2.0 * h);
                assert!((num - dx[[r, c]]).abs() < 2e-2 * num.abs().max(0.05), "{num} vs {}", dx[[r, c]]);
            }
        }
        for (r, c) in [(0, 0), (3, 2), (5, 4)] {
            let mut hp = head.clone();
            hp.prototypes[[r, c]] += h;
            let mut hm = head.clone();
            hm.prototypes[[r, c]] -= h;
            let num = (loss(&hp, &x) - loss(&hm, &x)) / (2.0 * h);
            let an = g.prototypes[[r, c]];
            assert!((num - an).abs() < 2e-2 * num.abs().max(0.05), "{num} vs {an}");
        }
    }
}
