//! Minimal dense layers with hand-written backward passes.
//!
//! Activations are row-major `Array2<f32>` with one row per token (or sample).
//! Every layer's `forward` returns a cache holding exactly what its `backward`
//! needs; gradients are written into a structure of the same type as the layer,
//! so a model's gradient is just another instance of the model.

mod attention;
mod layers;
pub mod optim;
mod params;

pub use attention::{Attention, AttentionCache, Block, BlockCache, Mlp, MlpCache};
pub use layers::{gelu, gelu_grad, LayerNorm, LayerNormCache, Linear, Lora};
pub use params::{join as join_name, ParameterSnapshot, Params, Tensor};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type Mat = Array2<f32>;

/// Truncated normal init (std, clipped at two standard deviations).
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f32) -> Mat {
    let normal = Normal::new(0.0f32, 1.0).expect("valid normal");
    Array2::from_shape_simple_fn(shape, || loop {
        let z = normal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// Row-wise softmax in place, with max subtraction.
pub fn softmax_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

/// L2-normalize rows; returns the normalized matrix and the row norms used.
pub fn l2_normalize_rows(x: ArrayView2<f32>, eps: f32) -> (Mat, Vec<f32>) {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(eps);
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (out, norms)
}

/// Backward of row L2 normalization: given y = x/|x| and dy, returns dx.
pub fn l2_normalize_rows_backward(y: &Mat, norms: &[f32], dy: &Mat) -> Mat {
    let mut dx = dy.clone();
    for ((mut dxr, yr), &n) in dx.rows_mut().into_iter().zip(y.rows()).zip(norms) {
        let dot: f32 = dxr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
        dxr.zip_mut_with(&yr, |d, &yv| *d = (*d - dot * yv) / n);
    }
    dx
}

pub fn sum_rows(m: &Mat) -> ndarray::Array1<f32> {
    m.sum_axis(Axis(0))
}
