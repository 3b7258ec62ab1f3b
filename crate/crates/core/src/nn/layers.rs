use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::params::{join, Params};
use super::{trunc_normal, Mat};

/// Low-rank additive adapter: `x ↦ scale · (x A) B`, with `B` zero at init.
#[derive(Debug, Clone)]
pub struct Lora {
    /// `d_in × r`
    pub a: Mat,
    /// `r × d_out`
    pub b: Mat,
    pub scale: f32,
}

impl Lora {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize, rank: usize, alpha: f32) -> Self {
        Lora {
            a: trunc_normal(rng, (d_in, rank), 1.0 / (d_in as f32).sqrt()),
            b: Array2::zeros((rank, d_out)),
            scale: alpha / rank as f32,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }
}

/// Affine map `y = x W + b` with `W` stored `d_in × d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Array1<f32>,
    pub lora: Option<Lora>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: trunc_normal(rng, (d_in, d_out), 0.02),
            bias: Array1::zeros(d_out),
            lora: None,
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        let a = (6.0 / (d_in + d_out) as f32).sqrt();
        Linear {
            weight: Array2::from_shape_fn((d_in, d_out), |_| rng.random_range(-a..a)),
            bias: Array1::zeros(d_out),
            lora: None,
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        if let Some(l) = &self.lora {
            let xa = x.dot(&l.a);
            ndarray::linalg::general_mat_mul(l.scale, &xa, &l.b, 1.0, &mut y);
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dx`.
    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        let mut dx = dy.dot(&self.weight.t());
        if let (Some(l), Some(gl)) = (&self.lora, grad.lora.as_mut()) {
            let xa = x.dot(&l.a);
            ndarray::linalg::general_mat_mul(l.scale, &xa.t(), dy, 1.0, &mut gl.b);
            let dxa = dy.dot(&l.b.t());
            ndarray::linalg::general_mat_mul(l.scale, &x.t(), &dxa, 1.0, &mut gl.a);
            ndarray::linalg::general_mat_mul(l.scale, &dxa, &l.a.t(), 1.0, &mut dx);
        }
        dx
    }

    /// Input gradient only (parameters frozen).
    pub fn backward_input(&self, dy: &Mat) -> Mat {
        dy.dot(&self.weight.t())
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        f(&join(prefix, "weight"), self.weight.shape(), self.weight.as_slice().unwrap());
        f(&join(prefix, "bias"), self.bias.shape(), self.bias.as_slice().unwrap());
        if let Some(l) = &self.lora {
            f(&join(prefix, "lora_a"), l.a.shape(), l.a.as_slice().unwrap());
            f(&join(prefix, "lora_b"), l.b.shape(), l.b.as_slice().unwrap());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        let shape = self.weight.shape().to_vec();
        f(&join(prefix, "weight"), &shape, self.weight.as_slice_mut().unwrap());
        let shape = self.bias.shape().to_vec();
        f(&join(prefix, "bias"), &shape, self.bias.as_slice_mut().unwrap());
        if let Some(l) = &mut self.lora {
            let shape = l.a.shape().to_vec();
            f(&join(prefix, "lora_a"), &shape, l.a.as_slice_mut().unwrap());
            let shape = l.b.shape().to_vec();
            f(&join(prefix, "lora_b"), &shape, l.b.as_slice_mut().unwrap());
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f32>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.ncols() as f32;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
            let is = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn infer(&self, x: &Mat) -> Mat {
        self.forward(x).0
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Mat, grad: &mut LayerNorm) -> Mat {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f32;
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), &is) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
            let mean_d = row.sum() / d;
            let mean_dx: f32 = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f32>() / d;
            row.zip_mut_with(&xh, |g, &h| *g = is * (*g - mean_d - h * mean_dx));
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        f(&join(prefix, "gamma"), self.gamma.shape(), self.gamma.as_slice().unwrap());
        f(&join(prefix, "beta"), self.beta.shape(), self.beta.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        let shape = self.gamma.shape().to_vec();
        f(&join(prefix, "gamma"), &shape, self.gamma.as_slice_mut().unwrap());
        f(&join(prefix, "beta"), &shape, self.beta.as_slice_mut().unwrap());
    }
}

const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check<F: Fn(&Mat) -> f32>(f: F, x: &Mat, analytic: &Mat, tol: f32) {
        let h = 1e-2f32;
        let mut worst = 0.0f32;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic[[r, c]];
            let err = (num - a).abs() / (num.abs().max(a.abs()).max(1e-2));
            worst = worst.max(err);
        }
        assert!(worst < tol, "worst relative error {worst}");
    }

    #[test]
    fn linear_with_lora_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new(&mut rng, 5, 4);
        lin.weight.mapv_inplace(|v| v * 20.0);
        let mut lora = Lora::new(&mut rng, 5, 4, 2, 4.0);
        lora.b = trunc_normal(&mut rng, (2, 4), 0.5);
        lin.lora = Some(lora);
        let x = trunc_normal(&mut rng, (3, 5), 1.0);
        let probe = trunc_normal(&mut rng, (3, 4), 1.0);
        let loss = |l: &Linear, x: &Mat| (&l.forward(x) * &probe).sum();

        let mut g = lin.clone();
        g.zero();
        let dx = lin.backward(&x, &probe, &mut g);
        fd_check(|xx| loss(&lin, xx), &x, &dx, 2e-2);

        let l2 = lin.clone();
        let ga = g.lora.as_ref().unwrap().a.clone();
        fd_check(
            |a| {
                let mut l = l2.clone();
                l.lora.as_mut().unwrap().a = a.clone();
                loss(&l, &x)
            },
            &lin.lora.as_ref().unwrap().a,
            &ga,
            2e-2,
        );
    }

    #[test]
    fn layernorm_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ln = LayerNorm::new(6);
        ln.gamma = Array1::from_iter((0..6).map(|i| 0.5 + i as f32 * 0.1));
        let x = trunc_normal(&mut rng, (4, 6), 1.0);
        let probe = trunc_normal(&mut rng, (4, 6), 1.0);
        let mut g = ln.clone();
        g.zero();
        let (_, cache) = ln.forward(&x);
        let dx = ln.backward(&cache, &probe, &mut g);
        fd_check(|xx| (&ln.infer(xx) * &probe).sum(), &x, &dx, 2e-2);
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for i in -30..30 {
            let x = i as f32 * 0.2;
            let h = 1e-3;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-2, "x={x}");
        }
    }
}
