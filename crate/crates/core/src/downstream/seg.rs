use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::prepare;
use crate::backbone::Vit;
use crate::data::SegSample;
use crate::error::{ensure, Error, Result};
use crate::image::{Image, Mask};
use crate::metrics::dice_jac;
use crate::nn::optim::Adam;
use crate::nn::{join_name, Linear, Mat, Params};
use crate::pretrain::cosine_schedule;
use crate::rng::{component_rng, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegHeadKind {
    Linear,
    Upernet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegHeadConfig {
    pub kind: SegHeadKind,
    pub dropout: f64,
    pub pooling_scales: Vec<usize>,
    pub n_classes: usize,
    /// Channels per pyramid-pooling branch.
    pub ppm_dim: usize,
    /// Width of the fused feature maps.
    pub fuse_dim: usize,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        SegHeadConfig {
            kind: SegHeadKind::Linear,
            dropout: 0.1,
            pooling_scales: vec![1, 2, 3, 6],
            n_classes: 2,
            ppm_dim: 32,
            fuse_dim: 64,
        }
    }
}

impl SegHeadConfig {
    pub fn upernet() -> Self {
        SegHeadConfig {
            kind: SegHeadKind::Upernet,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..1.0).contains(&self.dropout), Config, "dropout must lie in [0,1), got {}", self.dropout);
        ensure!(self.n_classes >= 2, Config, "n_classes must be ≥ 2");
        if self.kind == SegHeadKind::Upernet {
            ensure!(!self.pooling_scales.is_empty(), Config, "upernet needs pooling scales");
            ensure!(self.pooling_scales.iter().all(|&s| s >= 1), Config, "pooling scales must be ≥ 1");
            ensure!(self.ppm_dim >= 1 && self.fuse_dim >= 1, Config, "upernet widths must be ≥ 1");
        }
        Ok(())
    }
}

/// Row `o` holds the weights of output position `o` over input positions,
/// bilinear with half-pixel centers and edge clamping.
fn bilinear_1d(n_in: usize, n_out: usize) -> Mat {
    let mut m = Array2::zeros((n_out, n_in));
    let scale = n_in as f32 / n_out as f32;
    for o in 0..n_out {
        let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f32);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let f = src - lo as f32;
        m[[o, lo]] += 1.0 - f;
        m[[o, hi]] += f;
    }
    m
}

/// Adaptive average pooling weights from `n_in` cells to `n_out` bins.
fn avg_pool_1d(n_in: usize, n_out: usize) -> Mat {
    let mut m = Array2::zeros((n_out, n_in));
    for o in 0..n_out {
        let a = o * n_in / n_out;
        let b = ((o + 1) * n_in).div_ceil(n_out);
        for i in a..b {
            m[[o, i]] = 1.0 / (b - a) as f32;
        }
    }
    m
}

/// Separable 2-D operator over row-major square grids.
fn kron(a: &Mat) -> Mat {
    let (o, i) = a.dim();
    let mut m = Array2::zeros((o * o, i * i));
    for oy in 0..o {
        for ox in 0..o {
            for iy in 0..i {
                let wy = a[[oy, iy]];
                if wy == 0.0 {
                    continue;
                }
                for ix in 0..i {
                    m[[oy * o + ox, iy * i + ix]] = wy * a[[ox, ix]];
                }
            }
        }
    }
    m
}

/// Bilinear resize operator from a `g × g` grid to `out × out`.
pub fn upsample_matrix(g: usize, out: usize) -> Mat {
    kron(&bilinear_1d(g, out))
}

/// Applies the per-image spatial operator `op` (`P_out × P_in`) to a stack of
/// `n` images (`(n·P_in) × C` → `(n·P_out) × C`).
fn spatial(op: &Mat, x: &Mat, n: usize) -> Mat {
    let (po, pi) = op.dim();
    let mut y = Array2::zeros((n * po, x.ncols()));
    for i in 0..n {
        let blk = op.dot(&x.slice(s![i * pi..(i + 1) * pi, ..]));
        y.slice_mut(s![i * po..(i + 1) * po, ..]).assign(&blk);
    }
    y
}

fn spatial_t(op: &Mat, dy: &Mat, n: usize) -> Mat {
    let (po, pi) = op.dim();
    let mut dx = Array2::zeros((n * pi, dy.ncols()));
    for i in 0..n {
        let blk = op.t().dot(&dy.slice(s![i * po..(i + 1) * po, ..]));
        dx.slice_mut(s![i * pi..(i + 1) * pi, ..]).assign(&blk);
    }
    dx
}

fn relu(x: &Mat) -> Mat {
    x.mapv(|v| v.max(0.0))
}

fn relu_back(y: &Mat, dy: &Mat) -> Mat {
    let mut d = dy.clone();
    d.zip_mut_with(y, |g, &v| {
        if v <= 0.0 {
            *g = 0.0
        }
    });
    d
}

/// Per-channel normalization over all tokens of the batch, with running
/// statistics for evaluation.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub momentum: f32,
    pub eps: f32,
}

struct BnCache {
    xhat: Mat,
    inv_std: Array1<f32>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn forward_train(&mut self, x: &Mat) -> (Mat, BnCache) {
        let mean = x.mean_axis(Axis(0)).unwrap();
        let var = x.var_axis(Axis(0), 0.0);
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &var * m;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (x - &mean) * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        (y, BnCache { xhat, inv_std })
    }

    fn infer(&self, x: &Mat) -> Mat {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        (x - &self.running_mean) * &inv_std * &self.gamma + &self.beta
    }

    fn backward(&self, c: &BnCache, dy: &Mat, grad: &mut BatchNorm) -> Mat {
        let n = dy.nrows() as f32;
        grad.gamma += &(dy * &c.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let s1 = dxhat.sum_axis(Axis(0));
        let s2 = (&dxhat * &c.xhat).sum_axis(Axis(0));
        let mut dx = &dxhat * n - &s1 - &c.xhat * &s2;
        dx *= &(&c.inv_std / n);
        dx
    }
}

impl Params for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        for (n, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            f(&join_name(prefix, n), t.shape(), t.as_slice().unwrap());
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        for (n, t) in [
            ("gamma", &mut self.gamma),
            ("beta", &mut self.beta),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ] {
            let shape = t.shape().to_vec();
            f(&join_name(prefix, n), &shape, t.as_slice_mut().unwrap());
        }
    }
}

/// Channel dropout: whole channels of an image are zeroed together.
fn spatial_dropout_mask<R: Rng + ?Sized>(rng: &mut R, n: usize, c: usize, p: f64) -> Mat {
    let keep = 1.0 / (1.0 - p) as f32;
    Array2::from_shape_fn((n, c), |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

fn apply_channel_mask(x: &Mat, mask: &Mat, per_image: usize) -> Mat {
    let mut y = x.clone();
    for (r, mut row) in y.rows_mut().into_iter().enumerate() {
        row *= &mask.row(r / per_image);
    }
    y
}

#[derive(Debug, Clone)]
pub struct LinearSegHead {
    pub norm: BatchNorm,
    pub conv: Linear,
}

#[derive(Debug, Clone)]
pub struct UpernetHead {
    pub ppm: Vec<Linear>,
    pub bottleneck: Linear,
    pub lateral: Vec<Linear>,
    pub fuse: Linear,
    pub cls: Linear,
}

#[derive(Debug, Clone)]
pub enum SegHeadParams {
    Linear(LinearSegHead),
    Upernet(UpernetHead),
}

/// A segmentation head bound to a backbone geometry.
#[derive(Debug, Clone)]
pub struct SegHead {
    pub config: SegHeadConfig,
    pub params: SegHeadParams,
    grid: usize,
    image_size: usize,
}

impl Params for SegHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        match &self.params {
            SegHeadParams::Linear(h) => {
                h.norm.visit(&join_name(prefix, "norm"), f);
                h.conv.visit(&join_name(prefix, "conv"), f);
            }
            SegHeadParams::Upernet(h) => {
                for (i, l) in h.ppm.iter().enumerate() {
                    l.visit(&join_name(prefix, &format!("ppm.{i}")), f);
                }
                h.bottleneck.visit(&join_name(prefix, "bottleneck"), f);
                for (i, l) in h.lateral.iter().enumerate() {
                    l.visit(&join_name(prefix, &format!("lateral.{i}")), f);
                }
                h.fuse.visit(&join_name(prefix, "fuse"), f);
                h.cls.visit(&join_name(prefix, "cls"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        match &mut self.params {
            SegHeadParams::Linear(h) => {
                h.norm.visit_mut(&join_name(prefix, "norm"), f);
                h.conv.visit_mut(&join_name(prefix, "conv"), f);
            }
            SegHeadParams::Upernet(h) => {
                for (i, l) in h.ppm.iter_mut().enumerate() {
                    l.visit_mut(&join_name(prefix, &format!("ppm.{i}")), f);
                }
                h.bottleneck.visit_mut(&join_name(prefix, "bottleneck"), f);
                for (i, l) in h.lateral.iter_mut().enumerate() {
                    l.visit_mut(&join_name(prefix, &format!("lateral.{i}")), f);
                }
                h.fuse.visit_mut(&join_name(prefix, "fuse"), f);
                h.cls.visit_mut(&join_name(prefix, "cls"), f);
            }
        }
    }
}

/// Frozen backbone features of a batch of images: one `(n·N_p) × D` matrix
/// per tapped depth, shallowest first.
#[derive(Debug, Clone)]
pub struct SegFeatures {
    pub levels: Vec<Mat>,
    pub n_images: usize,
}

impl SegFeatures {
    fn select(&self, idx: &[usize], np: usize) -> SegFeatures {
        let rows: Vec<usize> = idx.iter().flat_map(|&i| i * np..(i + 1) * np).collect();
        SegFeatures {
            levels: self.levels.iter().map(|l| l.select(Axis(0), &rows)).collect(),
            n_images: idx.len(),
        }
    }
}

/// Block indices tapped by the multi-level head: four evenly spaced depths
/// ending at the last block.
pub fn tapped_layers(depth: usize) -> Vec<usize> {
    (1..=4).map(|i| (i * depth).div_ceil(4).max(1) - 1).collect()
}

const SEG_ENCODE_BATCH: usize = 32;

/// Extracts the features `kind` consumes for `images`.
pub fn extract_seg_features(vit: &Vit, images: &[&Image], kind: SegHeadKind) -> Result<SegFeatures> {
    let layers = match kind {
        SegHeadKind::Linear => vec![vit.blocks.len() - 1],
        SegHeadKind::Upernet => tapped_layers(vit.blocks.len()),
    };
    let mut levels: Vec<Vec<Mat>> = vec![Vec::new(); layers.len()];
    for chunk in images.chunks(SEG_ENCODE_BATCH) {
        let prepped: Vec<Image> = chunk.iter().map(|i| prepare(vit, i)).collect();
        let refs: Vec<&Image> = prepped.iter().collect();
        for (l, m) in vit.intermediate_patch_tokens(&refs, &layers)?.into_iter().enumerate() {
            levels[l].push(m);
        }
    }
    let levels = levels
        .into_iter()
        .map(|parts| {
            let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
        })
        .collect::<Result<Vec<Mat>>>()?;
    Ok(SegFeatures {
        levels,
        n_images: images.len(),
    })
}

enum HeadCache {
    Linear {
        bn: BnCache,
        normed: Mat,
        drop: Option<Mat>,
    },
    Upernet(Box<UperCache>),
}

struct UperCache {
    pooled: Vec<Mat>,
    ppm_out: Vec<Mat>,
    cat: Mat,
    top: Mat,
    lat: Vec<Mat>,
    fused_in: Mat,
    fused: Mat,
    drop: Option<Mat>,
    dropped: Mat,
}

impl SegHead {
    pub fn new(config: SegHeadConfig, vit: &Vit, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = vit.dim();
        let mut rng = component_rng(seed, "seg-head-init");
        let c = config.n_classes;
        let params = match config.kind {
            SegHeadKind::Linear => SegHeadParams::Linear(LinearSegHead {
                norm: BatchNorm::new(d),
                conv: Linear::new(&mut rng, d, c),
            }),
            SegHeadKind::Upernet => {
                let (p, f) = (config.ppm_dim, config.fuse_dim);
                let n_levels = 4;
                SegHeadParams::Upernet(UpernetHead {
                    ppm: config.pooling_scales.iter().map(|_| Linear::new(&mut rng, d, p)).collect(),
                    bottleneck: Linear::new(&mut rng, d + p * config.pooling_scales.len(), f),
                    lateral: (0..n_levels - 1).map(|_| Linear::new(&mut rng, d, f)).collect(),
                    fuse: Linear::new(&mut rng, n_levels * f, f),
                    cls: Linear::new(&mut rng, f, c),
                })
            }
        };
        Ok(SegHead {
            config,
            params,
            grid: vit.config.grid(),
            image_size: vit.config.image_size,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    fn check(&self, f: &SegFeatures) -> Result<()> {
        let want = match self.config.kind {
            SegHeadKind::Linear => 1,
            SegHeadKind::Upernet => 4,
        };
        ensure!(f.levels.len() == want, Shape, "head expects {want} feature levels, got {}", f.levels.len());
        let np = self.grid * self.grid;
        for l in &f.levels {
            ensure!(l.nrows() == f.n_images * np, Shape, "feature rows {} for {} images", l.nrows(), f.n_images);
        }
        Ok(())
    }

    fn pool_ops(&self, s: usize) -> (Mat, Mat) {
        (kron(&avg_pool_1d(self.grid, s)), kron(&bilinear_1d(s, self.grid)))
    }

    /// Grid logits `(n·N_p) × C`. With `train`, batch statistics, running
    /// updates and dropout (mask drawn from `rng`) are used.
    fn grid_forward<R: Rng + ?Sized>(&mut self, f: &SegFeatures, train: Option<&mut R>) -> (Mat, HeadCache) {
        let n = f.n_images;
        let np = self.grid * self.grid;
        let p = self.config.dropout;
        let ops: Vec<(Mat, Mat)> = self.config.pooling_scales.iter().map(|&s| self.pool_ops(s)).collect();
        match &mut self.params {
            SegHeadParams::Linear(h) => {
                let x = &f.levels[0];
                match train {
                    Some(rng) => {
                        let (normed, bn) = h.norm.forward_train(x);
                        let drop = (p > 0.0).then(|| spatial_dropout_mask(rng, n, normed.ncols(), p));
                        let inp = drop.as_ref().map_or_else(|| normed.clone(), |m| apply_channel_mask(&normed, m, np));
                        (h.conv.forward(&inp), HeadCache::Linear { bn, normed, drop })
                    }
                    None => {
                        let normed = h.norm.infer(x);
                        let bn = BnCache {
                            xhat: Array2::zeros((0, 0)),
                            inv_std: Array1::zeros(0),
                        };
                        (h.conv.forward(&normed), HeadCache::Linear { bn, normed, drop: None })
                    }
                }
            }
            SegHeadParams::Upernet(h) => {
                let deep = &f.levels[3];
                let mut pooled = Vec::new();
                let mut ppm_out = Vec::new();
                let mut parts = vec![deep.clone()];
                for (lin, (pool, up)) in h.ppm.iter().zip(&ops) {
                    let pl = spatial(pool, deep, n);
                    let y = relu(&lin.forward(&pl));
                    parts.push(spatial(up, &y, n));
                    pooled.push(pl);
                    ppm_out.push(y);
                }
                let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
                let cat = ndarray::concatenate(Axis(1), &views).unwrap();
                let top = relu(&h.bottleneck.forward(&cat));
                // top-down: level i receives the sum of every deeper level
                let lat: Vec<Mat> = h.lateral.iter().zip(&f.levels).map(|(l, x)| relu(&l.forward(x))).collect();
                let mut acc = top.clone();
                let mut pyramid = vec![Array2::zeros((0, 0)); 4];
                pyramid[3] = top.clone();
                for i in (0..3).rev() {
                    acc = &acc + &lat[i];
                    pyramid[i] = acc.clone();
                }
                let views: Vec<_> = pyramid.iter().map(|m| m.view()).collect();
                let fused_in = ndarray::concatenate(Axis(1), &views).unwrap();
                let fused = relu(&h.fuse.forward(&fused_in));
                let drop = match train {
                    Some(rng) if p > 0.0 => Some(spatial_dropout_mask(rng, n, fused.ncols(), p)),
                    _ => None,
                };
                let dropped = drop.as_ref().map_or_else(|| fused.clone(), |m| apply_channel_mask(&fused, m, np));
                let logits = h.cls.forward(&dropped);
                (
                    logits,
                    HeadCache::Upernet(Box::new(UperCache {
                        pooled,
                        ppm_out,
                        cat,
                        top,
                        lat,
                        fused_in,
                        fused,
                        drop,
                        dropped,
                    })),
                )
            }
        }
    }

    fn grid_backward(&self, f: &SegFeatures, cache: &HeadCache, dlogits: &Mat, grad: &mut SegHead) {
        let n = f.n_images;
        let np = self.grid * self.grid;
        match (&self.params, &mut grad.params, cache) {
            (SegHeadParams::Linear(h), SegHeadParams::Linear(g), HeadCache::Linear { bn, normed, drop }) => {
                let inp = drop.as_ref().map_or_else(|| normed.clone(), |m| apply_channel_mask(normed, m, np));
                let mut d = h.conv.backward(&inp, dlogits, &mut g.conv);
                if let Some(m) = drop {
                    d = apply_channel_mask(&d, m, np);
                }
                h.norm.backward(bn, &d, &mut g.norm);
            }
            (SegHeadParams::Upernet(h), SegHeadParams::Upernet(g), HeadCache::Upernet(c)) => {
                let ops: Vec<(Mat, Mat)> = self.config.pooling_scales.iter().map(|&s| self.pool_ops(s)).collect();
                let mut d = h.cls.backward(&c.dropped, dlogits, &mut g.cls);
                if let Some(m) = &c.drop {
                    d = apply_channel_mask(&d, m, np);
                }
                let d = relu_back(&c.fused, &d);
                let d_in = h.fuse.backward(&c.fused_in, &d, &mut g.fuse);
                let fd = self.config.fuse_dim;
                let dp: Vec<Mat> = (0..4).map(|i| d_in.slice(s![.., i * fd..(i + 1) * fd]).to_owned()).collect();
                // pyramid[i] = top + Σ_{j≥i} lat[j]  ⇒  d lat[j] = Σ_{i≤j} d pyramid[i]
                let mut run = Array2::<f32>::zeros(dp[0].dim());
                for (j, l) in h.lateral.iter().enumerate() {
                    run = &run + &dp[j];
                    let dl = relu_back(&c.lat[j], &run);
                    l.backward(&f.levels[j], &dl, &mut g.lateral[j]);
                }
                let dtop = &run + &dp[3];
                let dtop = relu_back(&c.top, &dtop);
                let dcat = h.bottleneck.backward(&c.cat, &dtop, &mut g.bottleneck);
                let dim = f.levels[3].ncols();
                let pd = self.config.ppm_dim;
                for (k, (lin, (_, up))) in h.ppm.iter().zip(&ops).enumerate() {
                    let dz = dcat.slice(s![.., dim + k * pd..dim + (k + 1) * pd]).to_owned();
                    let dy = relu_back(&c.ppm_out[k], &spatial_t(up, &dz, n));
                    lin.backward(&c.pooled[k], &dy, &mut g.ppm[k]);
                }
            }
            _ => unreachable!("head kind and cache always agree"),
        }
    }

    /// Full-resolution logits, `n` blocks of `(H·W) × C`, evaluation mode.
    pub fn forward(&self, f: &SegFeatures) -> Result<Mat> {
        self.check(f)?;
        let mut me = self.clone();
        let (g, _) = me.grid_forward::<rand_chacha::ChaCha8Rng>(f, None);
        Ok(spatial(&upsample_matrix(self.grid, self.image_size), &g, f.n_images))
    }

    /// Predicted label maps (argmax over classes), one per image.
    pub fn predict(&self, f: &SegFeatures) -> Result<Vec<Mask>> {
        let logits = self.forward(f)?;
        let hw = self.image_size * self.image_size;
        Ok((0..f.n_images)
            .map(|i| {
                let blk = logits.slice(s![i * hw..(i + 1) * hw, ..]);
                Mask {
                    height: self.image_size,
                    width: self.image_size,
                    data: blk
                        .rows()
                        .into_iter()
                        .map(|r| {
                            r.iter()
                                .enumerate()
                                .fold((0usize, f32::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
                                .0 as u8
                        })
                        .collect(),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub head: SegHeadConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            head: SegHeadConfig::default(),
            epochs: 20,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

/// Ground-truth label maps at the head's output size.
pub fn seg_targets(samples: &[&SegSample], size: usize) -> Vec<Mask> {
    samples
        .iter()
        .map(|s| {
            if s.mask.height == size && s.mask.width == size {
                s.mask.clone()
            } else {
                s.mask.resize(size, size)
            }
        })
        .collect()
}

/// Trains a fresh head on frozen features of `samples[indices]` with Adam,
/// per-step cosine decay to zero and pixelwise cross-entropy. Returns the
/// head and the mean loss of each epoch.
pub fn train_seg(vit: &Vit, samples: &[SegSample], indices: &[usize], cfg: &SegTrainConfig) -> Result<(SegHead, Vec<f64>)> {
    ensure!(!indices.is_empty(), Data, "segmentation training set is empty");
    ensure!(cfg.batch_size >= 1, Config, "batch_size must be ≥ 1");
    let mut head = SegHead::new(cfg.head.clone(), vit, cfg.seed)?;
    let chosen: Vec<&SegSample> = indices.iter().map(|&i| &samples[i]).collect();
    let images: Vec<&Image> = chosen.iter().map(|s| &s.image).collect();
    let feats = extract_seg_features(vit, &images, cfg.head.kind)?;
    let targets = seg_targets(&chosen, head.image_size);
    for t in &targets {
        ensure!(t.data.iter().all(|&v| (v as usize) < cfg.head.n_classes), Data, "mask value ≥ n_classes");
    }
    let np = head.grid * head.grid;
    let up = upsample_matrix(head.grid, head.image_size);
    let n = indices.len();
    let total = (cfg.epochs * n.div_ceil(cfg.batch_size)) as u64;
    let mut opt = Adam::adam();
    let mut grad = head.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream_rng(cfg.seed, "seg-order", epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let fb = feats.select(chunk, np);
            let mut rng = stream_rng(cfg.seed, "seg-dropout", step);
            let (glog, cache) = head.grid_forward(&fb, Some(&mut rng));
            let full = spatial(&up, &glog, chunk.len());
            let labels: Vec<usize> = chunk.iter().flat_map(|&i| targets[i].data.iter().map(|&v| v as usize)).collect();
            let (loss, dfull) = super::probe::cross_entropy_grad(&full, &labels);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite segmentation loss at step {step}")));
            }
            epoch_loss += loss * chunk.len() as f64;
            let dgrid = spatial_t(&up, &dfull, chunk.len());
            grad.zero();
            head.grid_backward(&fb, &cache, &dgrid, &mut grad);
            let lr_t = cosine_schedule(step, total, cfg.lr, 0.0) as f32;
            opt.update(&mut head, &grad.snapshot(), lr_t, &|k| !is_running_stat(k), &|_| false);
            step += 1;
        }
        history.push(epoch_loss / n as f64);
    }
    Ok((head, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegPrediction {
    pub sample_id: String,
    pub dice: f64,
    pub jaccard: f64,
}

/// Foreground (class 1) DICE/Jaccard per sample, with the predicted masks.
pub fn evaluate_seg(vit: &Vit, head: &SegHead, samples: &[SegSample], indices: &[usize]) -> Result<(Vec<SegPrediction>, Vec<Mask>)> {
    let chosen: Vec<&SegSample> = indices.iter().map(|&i| &samples[i]).collect();
    let images: Vec<&Image> = chosen.iter().map(|s| &s.image).collect();
    let feats = extract_seg_features(vit, &images, head.config.kind)?;
    let preds = head.predict(&feats)?;
    let truth = seg_targets(&chosen, head.image_size);
    let fg = |m: &Mask| Mask {
        height: m.height,
        width: m.width,
        data: m.data.iter().map(|&v| (v == 1) as u8).collect(),
    };
    let mut out = Vec::with_capacity(chosen.len());
    for ((s, p), t) in chosen.iter().zip(&preds).zip(&truth) {
        let (dice, jaccard) = dice_jac(&fg(p), &fg(t))?;
        out.push(SegPrediction {
            sample_id: s.sample_id.clone(),
            dice,
            jaccard,
        });
    }
    Ok((out, preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_rows_sum_to_one() {
        for (a, b) in [(8, 64), (1, 8), (3, 8), (6, 8)] {
            let m = upsample_matrix(a, b);
            for r in m.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-5);
            }
        }
        for s in [1, 2, 3, 6] {
            for r in kron(&avg_pool_1d(8, s)).rows() {
                assert!((r.sum() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn constant_grid_upsamples_to_constant() {
        let x = Array2::from_elem((64, 2), 0.7f32);
        let y = spatial(&upsample_matrix(8, 64), &x, 1);
        assert!(y.iter().all(|v| (v - 0.7).abs() < 1e-5));
    }

    #[test]
    fn tapped_layers_end_at_last_block() {
        assert_eq!(tapped_layers(4), vec![0, 1, 2, 3]);
        assert_eq!(tapped_layers(12), vec![2, 5, 8, 11]);
        assert_eq!(tapped_layers(6), vec![1, 2, 4, 5]);
    }

    fn fd_check(cfg: SegHeadConfig) {
        let vit = Vit::new(crate::backbone::ViTConfig::tiny(), &mut component_rng(1, "t")).unwrap();
        let head = SegHead::new(cfg, &vit, 3).unwrap();
        let n = 2;
        let np = 64;
        let n_levels = if head.config.kind == SegHeadKind::Linear { 1 } else { 4 };
        let mut rng = component_rng(5, "feat");
        let f = SegFeatures {
            levels: (0..n_levels)
                .map(|_| Array2::from_shape_fn((n * np, 64), |_| rng.random_range(-1.0f32..1.0)))
                .collect(),
            n_images: n,
        };
        let labels: Vec<usize> = (0..n * np).map(|i| (i * 7 % 5 == 0) as usize).collect();
        let loss_of = |h: &SegHead| -> f64 {
            let mut h = h.clone();
            let mut r = component_rng(0, "d");
            let (g, _) = h.grid_forward(&f, Some(&mut r));
            super::super::probe::cross_entropy_grad(&g, &labels).0
        };
        let mut r = component_rng(0, "d");
        let (g, cache) = head.clone().grid_forward(&f, Some(&mut r));
        let (_, dg) = super::super::probe::cross_entropy_grad(&g, &labels);
        let mut grad = head.clone();
        grad.zero();
        head.grid_backward(&f, &cache, &dg, &mut grad);
        let gs = grad.snapshot();
        let mut checked = 0;
        let mut bad = 0;
        for (name, t) in head.snapshot().0 {
            if is_running_stat(&name) {
                continue;
            }
            for i in (0..t.data.len()).step_by(t.data.len() / 5 + 1) {
                let eps = 1e-2f32;
                let mut hp = head.clone();
                let mut hm = head.clone();
                hp.visit_mut("", &mut |k, _, d| if k == name { d[i] += eps });
                hm.visit_mut("", &mut |k, _, d| if k == name { d[i] -= eps });
                let num = (loss_of(&hp) - loss_of(&hm)) / (2.0 * eps as f64);
                let ana = gs.get(&name).unwrap().data[i] as f64;
                checked += 1;
                if (num - ana).abs() > 2e-3 + 2e-2 * num.abs().max(ana.abs()) {
                    bad += 1;
                    eprintln!("{name}[{i}] num {num} ana {ana}");
                }
            }
        }
        assert!(checked > 10);
        assert!(bad * 50 <= checked, "{bad}/{checked} mismatches");
    }

    #[test]
    fn linear_head_gradients() {
        fd_check(SegHeadConfig {
            dropout: 0.0,
            ..SegHeadConfig::default()
        });
    }

    #[test]
    fn upernet_head_gradients() {
        fd_check(SegHeadConfig {
            dropout: 0.3,
            ppm_dim: 4,
            fuse_dim: 6,
            ..SegHeadConfig::upernet()
        });
    }
}
