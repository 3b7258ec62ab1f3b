//! Small vision transformer producing class-token and patch-token outputs.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::nn::{trunc_normal, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Mat, ParameterSnapshot, Params};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            dim: 192,
            depth: 6,
            heads: 3,
            mlp_ratio: 4.0,
        }
    }
}

impl ViTConfig {
    /// Single-core preset used by the desk-scale experiments.
    pub fn tiny() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.patch_size > 0 && self.image_size.is_multiple_of(self.patch_size), Config,
            "image_size {} not divisible by patch_size {}", self.image_size, self.patch_size);
        ensure!(self.heads > 0 && self.dim.is_multiple_of(self.heads), Config,
            "dim {} not divisible by heads {}", self.dim, self.heads);
        ensure!(self.depth >= 1, Config, "depth must be ≥ 1");
        ensure!(self.mlp_ratio > 0.0, Config, "mlp_ratio must be > 0");
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    fn mlp_hidden(&self) -> usize {
        ((self.dim as f32) * self.mlp_ratio).round() as usize
    }
}

/// Backbone outputs for a batch of equally sized crops.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `n_crops × D`
    pub cls: Mat,
    /// `(n_crops · N_p) × D`, crop-major.
    pub patches: Mat,
    /// Per-crop masks, present iff masking was requested.
    pub mask_applied: Option<Vec<Vec<bool>>>,
    pub n_patches: usize,
}

impl EncoderOutput {
    pub fn crop_patches(&self, crop: usize) -> ndarray::ArrayView2<'_, f32> {
        self.patches.slice(s![crop * self.n_patches..(crop + 1) * self.n_patches, ..])
    }
}

#[derive(Debug, Clone)]
pub struct Vit {
    pub config: ViTConfig,
    pub patch_embed: Linear,
    /// `1 × D`
    pub cls_token: Mat,
    /// `1 × D`, substituted for masked patch embeddings.
    pub mask_token: Mat,
    /// `(1 + N_p) × D` at the configured image size.
    pub pos_embed: Mat,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

/// Forward state needed by [`Vit::backward`].
pub struct VitCache {
    patches_in: Mat,
    masked: Vec<bool>,
    n_crops: usize,
    grid: usize,
    interp: Option<Mat>,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

impl Vit {
    pub fn new<R: Rng + ?Sized>(config: ViTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let p = config.patch_size;
        let mut patch_embed = Linear::new(rng, 3 * p * p, d);
        patch_embed.weight = trunc_normal(rng, (3 * p * p, d), 1.0 / ((3 * p * p) as f32).sqrt());
        let blocks = (0..config.depth)
            .map(|_| {
                let mut b = Block::new(rng, d, config.heads, config.mlp_hidden());
                for l in [&mut b.attn.qkv, &mut b.attn.proj, &mut b.mlp.fc1, &mut b.mlp.fc2] {
                    *l = Linear::xavier(rng, l.d_in(), l.d_out());
                }
                b
            })
            .collect();
        Ok(Vit {
            patch_embed,
            cls_token: trunc_normal(rng, (1, d), 1e-6),
            mask_token: Array2::zeros((1, d)),
            pos_embed: trunc_normal(rng, (1 + config.n_patches(), d), 0.02),
            blocks,
            norm: LayerNorm::new(d),
            config,
        })
    }

    /// Rebuilds a backbone from a parameter snapshot.
    pub fn from_snapshot(config: ViTConfig, snap: &ParameterSnapshot) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut v = Vit::new(config, &mut rng)?;
        v.load_snapshot(snap)?;
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn patchify(&self, crops: &[&Image]) -> Result<(Mat, usize)> {
        ensure!(!crops.is_empty(), Param, "no crops given");
        let p = self.config.patch_size;
        let size = crops[0].height;
        for c in crops {
            ensure!(c.height == size && c.width == size, Shape,
                "crops must be square and equal-sized, got {}×{} vs {size}", c.height, c.width);
        }
        ensure!(size.is_multiple_of(p), Shape, "crop size {size} not divisible by patch size {p}");
        let g = size / p;
        let mut out = Array2::<f32>::zeros((crops.len() * g * g, 3 * p * p));
        for (ci, img) in crops.iter().enumerate() {
            for gy in 0..g {
                for gx in 0..g {
                    let mut row = out.row_mut(ci * g * g + gy * g + gx);
                    let row = row.as_slice_mut().unwrap();
                    let mut k = 0;
                    for dy in 0..p {
                        let base = ((gy * p + dy) * size + gx * p) * 3;
                        for (o, &v) in row[k..k + 3 * p].iter_mut().zip(&img.data[base..base + 3 * p]) {
                            *o = (v - 0.5) * 4.0;
                        }
                        k += 3 * p;
                    }
                }
            }
        }
        Ok((out, g))
    }

    /// Bilinear map from the native position grid to a `g × g` grid.
    fn pos_interp(&self, g: usize) -> Option<Mat> {
        let big = self.config.grid();
        if g == big {
            return None;
        }
        let mut m = Array2::<f32>::zeros((g * g, big * big));
        let scale = big as f32 / g as f32;
        let coord = |i: usize| -> (usize, usize, f32) {
            let c = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (big - 1) as f32);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(big - 1);
            (i0, i1, c - i0 as f32)
        };
        for y in 0..g {
            let (y0, y1, wy) = coord(y);
            for x in 0..g {
                let (x0, x1, wx) = coord(x);
                let r = y * g + x;
                m[[r, y0 * big + x0]] += (1.0 - wy) * (1.0 - wx);
                m[[r, y0 * big + x1]] += (1.0 - wy) * wx;
                m[[r, y1 * big + x0]] += wy * (1.0 - wx);
                m[[r, y1 * big + x1]] += wy * wx;
            }
        }
        Some(m)
    }

    fn embed(&self, crops: &[&Image], masks: Option<&[Vec<bool>]>) -> Result<(Mat, Mat, Vec<bool>, usize, Option<Mat>)> {
        let (patches_in, g) = self.patchify(crops)?;
        let np = g * g;
        let n = crops.len();
        let mut masked = vec![false; n * np];
        if let Some(ms) = masks {
            ensure!(ms.len() == n, Shape, "{} masks for {n} crops", ms.len());
            for (ci, m) in ms.iter().enumerate() {
                ensure!(m.len() == np, Shape, "mask length {} but crop has {np} patches", m.len());
                masked[ci * np..(ci + 1) * np].copy_from_slice(m);
            }
        }
        let emb = self.patch_embed.forward(&patches_in);
        let interp = self.pos_interp(g);
        let pos_patch = match &interp {
            None => self.pos_embed.slice(s![1.., ..]).to_owned(),
            Some(m) => m.dot(&self.pos_embed.slice(s![1.., ..])),
        };
        let t = np + 1;
        let d = self.dim();
        let mut tokens = Array2::<f32>::zeros((n * t, d));
        for ci in 0..n {
            let mut cls = tokens.row_mut(ci * t);
            cls.assign(&self.cls_token.row(0));
            cls += &self.pos_embed.row(0);
            for j in 0..np {
                let mut row = tokens.row_mut(ci * t + 1 + j);
                if masked[ci * np + j] {
                    row.assign(&self.mask_token.row(0));
                } else {
                    row.assign(&emb.row(ci * np + j));
                }
                row += &pos_patch.row(j);
            }
        }
        Ok((tokens, patches_in, masked, g, interp))
    }

    fn split_output(out: &Mat, n: usize, np: usize, masks: Option<&[Vec<bool>]>) -> EncoderOutput {
        let t = np + 1;
        let d = out.ncols();
        let mut cls = Array2::<f32>::zeros((n, d));
        let mut patches = Array2::<f32>::zeros((n * np, d));
        for ci in 0..n {
            cls.row_mut(ci).assign(&out.row(ci * t));
            patches
                .slice_mut(s![ci * np..(ci + 1) * np, ..])
                .assign(&out.slice(s![ci * t + 1..(ci + 1) * t, ..]));
        }
        EncoderOutput {
            cls,
            patches,
            mask_applied: masks.map(|m| m.to_vec()),
            n_patches: np,
        }
    }

    /// Inference forward pass.
    pub fn encode(&self, crops: &[&Image], masks: Option<&[Vec<bool>]>) -> Result<EncoderOutput> {
        let (mut x, _, _, g, _) = self.embed(crops, masks)?;
        let t = g * g + 1;
        for b in &self.blocks {
            x = b.infer(&x, t, false);
        }
        let out = self.norm.infer(&x);
        Ok(Self::split_output(&out, crops.len(), g * g, masks))
    }

    /// Forward pass keeping the activations for [`Vit::backward`].
    pub fn forward_train(&self, crops: &[&Image], masks: Option<&[Vec<bool>]>) -> Result<(EncoderOutput, VitCache)> {
        let (mut x, patches_in, masked, g, interp) = self.embed(crops, masks)?;
        let t = g * g + 1;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, t, false);
            caches.push(c);
            x = y;
        }
        let (out, norm) = self.norm.forward(&x);
        Ok((
            Self::split_output(&out, crops.len(), g * g, masks),
            VitCache {
                patches_in,
                masked,
                n_crops: crops.len(),
                grid: g,
                interp,
                blocks: caches,
                norm,
            },
        ))
    }

    /// Normalized patch tokens after each block listed in `layers`
    /// (0-based block indices), one `(n·N_p) × D` matrix per entry.
    pub fn intermediate_patch_tokens(&self, crops: &[&Image], layers: &[usize]) -> Result<Vec<Mat>> {
        for &l in layers {
            ensure!(l < self.blocks.len(), Param, "layer {l} ≥ depth {}", self.blocks.len());
        }
        let (mut x, _, _, g, _) = self.embed(crops, None)?;
        let t = g * g + 1;
        let np = g * g;
        let mut outs = Vec::with_capacity(layers.len());
        for (i, b) in self.blocks.iter().enumerate() {
            x = b.infer(&x, t, false);
            if layers.contains(&i) {
                let o = self.norm.infer(&x);
                outs.push((i, Self::split_output(&o, crops.len(), np, None).patches));
            }
        }
        Ok(layers
            .iter()
            .map(|l| outs.iter().find(|(i, _)| i == l).map(|(_, m)| m.clone()).unwrap())
            .collect())
    }

    /// Backpropagates `d_cls` (`n × D`) and optional `d_patches`
    /// (`(n·N_p) × D`) into `grad`.
    pub fn backward(&self, cache: &VitCache, d_cls: &Mat, d_patches: Option<&Mat>, grad: &mut Vit) {
        let n = cache.n_crops;
        let np = cache.grid * cache.grid;
        let t = np + 1;
        let d = self.dim();
        let mut dout = Array2::<f32>::zeros((n * t, d));
        for ci in 0..n {
            dout.row_mut(ci * t).assign(&d_cls.row(ci));
            if let Some(dp) = d_patches {
                dout.slice_mut(s![ci * t + 1..(ci + 1) * t, ..])
                    .assign(&dp.slice(s![ci * np..(ci + 1) * np, ..]));
            }
        }
        let mut dx = self.norm.backward(&cache.norm, &dout, &mut grad.norm);
        for (b, (bc, gb)) in self.blocks.iter().zip(cache.blocks.iter().zip(grad.blocks.iter_mut())).rev() {
            dx = b.backward(bc, &dx, gb);
        }
        let mut d_emb = Array2::<f32>::zeros((n * np, d));
        let mut d_pos_patch = Array2::<f32>::zeros((np, d));
        for ci in 0..n {
            let row = dx.row(ci * t);
            {
                let mut g = grad.cls_token.row_mut(0);
                g += &row;
            }
            {
                let mut g = grad.pos_embed.row_mut(0);
                g += &row;
            }
            for j in 0..np {
                let r = dx.row(ci * t + 1 + j);
                {
                    let mut g = d_pos_patch.row_mut(j);
                    g += &r;
                }
                if cache.masked[ci * np + j] {
                    let mut g = grad.mask_token.row_mut(0);
                    g += &r;
                } else {
                    d_emb.row_mut(ci * np + j).assign(&r);
                }
            }
        }
        {
            let mut gpos = grad.pos_embed.slice_mut(s![1.., ..]);
            match &cache.interp {
                None => gpos += &d_pos_patch,
                Some(m) => ndarray::linalg::general_mat_mul(1.0, &m.t(), &d_pos_patch, 1.0, &mut gpos),
            }
        }
        ndarray::linalg::general_mat_mul(1.0, &cache.patches_in.t(), &d_emb, 1.0, &mut grad.patch_embed.weight);
        grad.patch_embed.bias += &d_emb.sum_axis(Axis(0));
    }
}

impl Params for Vit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        let j = |n: &str| crate::nn::join_name(prefix, n);
        self.patch_embed.visit(&j("patch_embed"), f);
        f(&j("cls_token"), self.cls_token.shape(), self.cls_token.as_slice().unwrap());
        f(&j("mask_token"), self.mask_token.shape(), self.mask_token.as_slice().unwrap());
        f(&j("pos_embed"), self.pos_embed.shape(), self.pos_embed.as_slice().unwrap());
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&j(&format!("blocks.{i}")), f);
        }
        self.norm.visit(&j("norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        let j = |n: &str| crate::nn::join_name(prefix, n);
        self.patch_embed.visit_mut(&j("patch_embed"), f);
        let s = self.cls_token.shape().to_vec();
        f(&j("cls_token"), &s, self.cls_token.as_slice_mut().unwrap());
        let s = self.mask_token.shape().to_vec();
        f(&j("mask_token"), &s, self.mask_token.as_slice_mut().unwrap());
        let s = self.pos_embed.shape().to_vec();
        f(&j("pos_embed"), &s, self.pos_embed.as_slice_mut().unwrap());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&j(&format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&j("norm"), f);
    }
}

/// Stateless form of the forward pass: builds the backbone described by
/// `config` from `params` and encodes a single crop.
pub fn encode(config: &ViTConfig, params: &ParameterSnapshot, crop: &Image, mask: Option<&[bool]>) -> Result<EncoderOutput> {
    let vit = Vit::from_snapshot(config.clone(), params)?;
    let masks = mask.map(|m| vec![m.to_vec()]);
    vit.encode(&[crop], masks.as_deref())
}

/// `momentum · teacher + (1 − momentum) · student`, elementwise, every key.
pub fn ema_update(teacher: &ParameterSnapshot, student: &ParameterSnapshot, momentum: f32) -> Result<ParameterSnapshot> {
    ensure!((0.0..=1.0).contains(&momentum), Param, "momentum {momentum} outside [0,1]");
    teacher.check_compatible(student)?;
    let mut out = teacher.clone();
    for (k, t) in out.0.iter_mut() {
        let s = &student.0[k];
        ema_slice(&mut t.data, &s.data, momentum);
    }
    Ok(out)
}

#[inline]
fn ema_slice(t: &mut [f32], s: &[f32], m: f32) {
    if m == 1.0 {
        return;
    }
    if m == 0.0 {
        t.copy_from_slice(s);
        return;
    }
    for (a, b) in t.iter_mut().zip(s) {
        *a = m * *a + (1.0 - m) * *b;
    }
}

/// In-place EMA of a live module toward `student`.
pub fn ema_update_params<P: Params + ?Sized>(teacher: &mut P, student: &ParameterSnapshot, momentum: f32) -> Result<()> {
    ensure!((0.0..=1.0).contains(&momentum), Param, "momentum {momentum} outside [0,1]");
    let mut err: Option<Error> = None;
    let mut seen = 0;
    teacher.visit_mut("", &mut |name, shape, data| match student.get(name) {
        Some(Tensor { shape: s, data: sd }) if s.as_slice() == shape => {
            ema_slice(data, sd, momentum);
            seen += 1;
        }
        _ => {
            err.get_or_insert_with(|| Error::Shape(format!("student lacks a matching `{name}`")));
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    ensure!(seen == student.len(), Shape, "student has {} tensors, teacher {seen}", student.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
        Image::from_fn(size, size, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vit = Vit::new(ViTConfig::tiny(), &mut rng).unwrap();
        let img = random_image(&mut rng, 64);
        let out = vit.encode(&[&img], None).unwrap();
        assert_eq!(out.patches.nrows(), 64);
        assert_eq!(out.cls.shape(), &[1, 64]);
        assert!(out.mask_applied.is_none());
    }

    #[test]
    fn zero_mask_is_identity_and_masking_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vit = Vit::new(small(), &mut rng).unwrap();
        vit.mask_token = trunc_normal(&mut rng, (1, 8), 1.0);
        let img = random_image(&mut rng, 16);
        let plain = vit.encode(&[&img], None).unwrap();
        let zero = vit.encode(&[&img], Some(&[vec![false; 16]])).unwrap();
        assert_eq!(plain.cls, zero.cls);
        assert_eq!(plain.patches, zero.patches);
        assert!(zero.mask_applied.is_some());
        let mut m = vec![false; 16];
        m[5] = true;
        let one = vit.encode(&[&img], Some(&[m])).unwrap();
        assert_ne!(one.patches.row(5), plain.patches.row(5));
        assert_ne!(one.cls, plain.cls);
    }

    #[test]
    fn mask_length_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vit = Vit::new(small(), &mut rng).unwrap();
        let img = random_image(&mut rng, 16);
        assert!(vit.encode(&[&img], Some(&[vec![false; 3]])).is_err());
        let wrong = random_image(&mut rng, 10);
        assert!(vit.encode(&[&wrong], None).is_err());
    }

    #[test]
    fn positional_encoding_is_live() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vit = Vit::new(small(), &mut rng).unwrap();
        let img = random_image(&mut rng, 16);
        // swap two 4×4 patches
        let mut swapped = img.clone();
        for dy in 0..4 {
            for dx in 0..4 {
                let a = img.get(dy, dx);
                let b = img.get(dy, 12 + dx);
                swapped.set(dy, dx, b);
                swapped.set(dy, 12 + dx, a);
            }
        }
        let o1 = vit.encode(&[&img], None).unwrap();
        let o2 = vit.encode(&[&swapped], None).unwrap();
        assert_ne!(o1.cls, o2.cls);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut vit = Vit::new(small(), &mut rng).unwrap();
        vit.visit_mut("", &mut |name, _, d| {
            if name.contains("weight") || name.contains("token") {
                d.iter_mut().for_each(|v| *v *= 4.0);
            }
        });
        // keep token rows away from the high-curvature regime of LayerNorm
        vit.cls_token = trunc_normal(&mut rng, (1, 8), 1.0);
        vit.mask_token = trunc_normal(&mut rng, (1, 8), 1.0);
        let a = random_image(&mut rng, 16);
        let b = random_image(&mut rng, 8);
        let mut m = vec![false; 16];
        m[3] = true;
        m[7] = true;
        let probe_c = trunc_normal(&mut rng, (1, 8), 1.0);
        let probe_p = trunc_normal(&mut rng, (16, 8), 1.0);
        let probe_l = trunc_normal(&mut rng, (1, 8), 1.0);
        let loss = |v: &Vit| -> f32 {
            let o = v.encode(&[&a], Some(&[m.clone()])).unwrap();
            let l = v.encode(&[&b], None).unwrap();
            (&o.cls * &probe_c).sum() + (&o.patches * &probe_p).sum() + (&l.cls * &probe_l).sum()
        };
        let mut grad = vit.clone();
        grad.zero();
        let (_, cache) = vit.forward_train(&[&a], Some(&[m.clone()])).unwrap();
        vit.backward(&cache, &probe_c, Some(&probe_p), &mut grad);
        let (_, cache_l) = vit.forward_train(&[&b], None).unwrap();
        let zero_p = Array2::zeros((4, 8));
        vit.backward(&cache_l, &probe_l, Some(&zero_p), &mut grad);

        let analytic = grad.snapshot();
        let h = 4e-3f32;
        let mut checked = 0;
        let mut bad = Vec::new();
        for key in ["mask_token", "pos_embed", "cls_token", "patch_embed.weight", "blocks.0.attn.qkv.weight", "norm.gamma"] {
            let t = &analytic.0[key];
            for idx in (0..t.data.len()).step_by((t.data.len() / 6).max(1)) {
                let bump = |delta: f32| {
                    let mut v = vit.clone();
                    v.visit_mut("", &mut |n, _, d| {
                        if n == key {
                            d[idx] += delta;
                        }
                    });
                    loss(&v)
                };
                let num = (bump(h) - bump(-h)) / (2.0 * h);
                let an = t.data[idx];
                checked += 1;
                if (num - an).abs() > 3e-2 * num.abs().max(an.abs()).max(0.05) {
                    bad.push((key, idx, num, an));
                }
            }
        }
        assert!(checked > 20);
        assert!(bad.is_empty(), "{bad:?}");
    }

    #[test]
    fn ema_endpoints_and_linearity() {
        let t = ParameterSnapshot([("w".to_string(), Tensor::new(vec![2], vec![1.0, -3.0]))].into());
        let s = ParameterSnapshot([("w".to_string(), Tensor::new(vec![2], vec![0.0, 5.0]))].into());
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        let m = ema_update(&t, &s, 0.9).unwrap();
        assert!((m.0["w"].data[0] - 0.9).abs() < 1e-7);
        let bad = ParameterSnapshot([("v".to_string(), Tensor::new(vec![2], vec![0.0, 5.0]))].into());
        assert!(ema_update(&t, &bad, 0.5).is_err());
    }
}
