use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitter {
    pub probability: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Hue rotation, as a fraction of a full turn.
    pub hue: f32,
}

impl Default for ColorJitter {
    fn default() -> Self {
        ColorJitter {
            probability: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub global_size: usize,
    pub local_size: usize,
    pub global_scale: (f32, f32),
    pub local_scale: (f32, f32),
    pub flip_probability: f32,
    pub jitter: ColorJitter,
    pub grayscale_probability: f32,
    pub blur_probability: f32,
    pub blur_sigma: (f32, f32),
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            n_global: 2,
            n_local: 8,
            global_size: 64,
            local_size: 24,
            global_scale: (0.32, 1.0),
            local_scale: (0.05, 0.32),
            flip_probability: 0.5,
            jitter: ColorJitter::default(),
            grayscale_probability: 0.2,
            blur_probability: 0.5,
            blur_sigma: (0.1, 1.0),
        }
    }
}

impl CropConfig {
    /// No photometric or geometric randomness beyond the crop scale.
    pub fn plain(self) -> Self {
        CropConfig {
            flip_probability: 0.0,
            jitter: ColorJitter {
                probability: 0.0,
                ..self.jitter
            },
            grayscale_probability: 0.0,
            blur_probability: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_global >= 1, Config, "n_global must be ≥ 1");
        ensure!(
            self.local_size < self.global_size,
            Config,
            "local_size {} must be < global_size {}",
            self.local_size,
            self.global_size
        );
        for (name, (lo, hi)) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            ensure!(lo > 0.0 && lo <= hi && hi <= 1.0, Config, "{name} ({lo}, {hi}) must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub mask_probability: f32,
    pub ratio_range: (f32, f32),
    pub block_min: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            mask_probability: 0.5,
            ratio_range: (0.1, 0.5),
            block_min: 1,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.ratio_range;
        ensure!(lo >= 0.0 && lo <= hi && hi < 1.0, Config, "ratio_range ({lo}, {hi}) must lie in [0, 1)");
        ensure!(
            (0.0..=1.0).contains(&self.mask_probability),
            Config,
            "mask_probability must lie in [0, 1]"
        );
        ensure!(self.block_min >= 1, Config, "block_min must be ≥ 1");
        Ok(())
    }
}

/// Random-resized crop box `(top, left, h, w)`; falls back to the whole image
/// when ten draws do not fit.
fn crop_box<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, scale: (f32, f32)) -> (f32, f32, f32, f32) {
    let area = (h * w) as f32;
    let (lr0, lr1) = ((3.0f32 / 4.0).ln(), (4.0f32 / 3.0).ln());
    for _ in 0..10 {
        let s = if scale.0 < scale.1 { rng.random_range(scale.0..=scale.1) } else { scale.0 };
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (s * area * ratio).sqrt();
        let ch = (s * area / ratio).sqrt();
        if cw <= w as f32 && ch <= h as f32 {
            let top = rng.random_range(0.0..=(h as f32 - ch));
            let left = rng.random_range(0.0..=(w as f32 - cw));
            return (top, left, ch, cw);
        }
    }
    (0.0, 0.0, h as f32, w as f32)
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, img: &mut Image, cfg: &ColorJitter) {
    let factor = |rng: &mut R, a: f32| if a > 0.0 { rng.random_range(1.0 - a..=1.0 + a) } else { 1.0 };
    let b = factor(rng, cfg.brightness);
    let c = factor(rng, cfg.contrast);
    let s = factor(rng, cfg.saturation);
    let hue = if cfg.hue > 0.0 { rng.random_range(-cfg.hue..=cfg.hue) } else { 0.0 };
    let n = (img.height * img.width) as f32;
    for v in img.data.iter_mut() {
        *v = (*v * b).clamp(0.0, 1.0);
    }
    let mean = img.data.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f32>() / n;
    for v in img.data.iter_mut() {
        *v = (mean + (*v - mean) * c).clamp(0.0, 1.0);
    }
    let (ch, sh) = ((hue * std::f32::consts::TAU).cos(), (hue * std::f32::consts::TAU).sin());
    for p in img.data.chunks_exact_mut(3) {
        let l = luma([p[0], p[1], p[2]]);
        for v in p.iter_mut() {
            *v = l + (*v - l) * s;
        }
        // rotate chroma in YIQ space
        let y = l;
        let i = 0.596 * p[0] - 0.274 * p[1] - 0.322 * p[2];
        let q = 0.211 * p[0] - 0.523 * p[1] + 0.312 * p[2];
        let (i, q) = (i * ch - q * sh, i * sh + q * ch);
        p[0] = (y + 0.956 * i + 0.621 * q).clamp(0.0, 1.0);
        p[1] = (y - 0.272 * i - 0.647 * q).clamp(0.0, 1.0);
        p[2] = (y - 1.106 * i + 1.703 * q).clamp(0.0, 1.0);
    }
}

fn grayscale(img: &mut Image) {
    for p in img.data.chunks_exact_mut(3) {
        let l = luma([p[0], p[1], p[2]]);
        p.fill(l);
    }
}

pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f32 = k.iter().sum();
    let k: Vec<f32> = k.iter().map(|v| v / ks).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::new(src.height, src.width);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (ki, kv) in k.iter().enumerate() {
                    let o = ki as isize - r;
                    let (yy, xx) = if horizontal {
                        (y, (x + o).clamp(0, w - 1))
                    } else {
                        ((y + o).clamp(0, h - 1), x)
                    };
                    let p = src.get(yy as usize, xx as usize);
                    for c in 0..3 {
                        acc[c] += kv * p[c];
                    }
                }
                out.set(y as usize, x as usize, acc);
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn augment_one<R: Rng + ?Sized>(rng: &mut R, image: &Image, size: usize, scale: (f32, f32), cfg: &CropConfig) -> Image {
    let (top, left, ch, cw) = crop_box(rng, image.height, image.width, scale);
    let mut out = image.crop_resize(top, left, ch, cw, size, size);
    if rng.random::<f32>() < cfg.flip_probability {
        out = out.flip_horizontal();
    }
    if rng.random::<f32>() < cfg.jitter.probability {
        jitter(rng, &mut out, &cfg.jitter);
    }
    if rng.random::<f32>() < cfg.grayscale_probability {
        grayscale(&mut out);
    }
    if rng.random::<f32>() < cfg.blur_probability {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        out = gaussian_blur(&out, sigma);
    }
    out
}

/// `N_g` global and `N_l` local augmented views of `image`.
pub fn multi_crop<R: Rng + ?Sized>(image: &Image, cfg: &CropConfig, rng: &mut R) -> (Vec<Image>, Vec<Image>) {
    let globals = (0..cfg.n_global)
        .map(|_| augment_one(rng, image, cfg.global_size, cfg.global_scale, cfg))
        .collect();
    let locals = (0..cfg.n_local)
        .map(|_| augment_one(rng, image, cfg.local_size, cfg.local_scale, cfg))
        .collect();
    (globals, locals)
}

/// Union of random rectangles covering `⌊ratio · n_p⌋` cells, emitted with
/// probability `mask_probability`; otherwise all false.
pub fn block_mask<R: Rng + ?Sized>(n_p: usize, grid_side: usize, cfg: &MaskConfig, rng: &mut R) -> Result<Vec<bool>> {
    ensure!(grid_side * grid_side == n_p, Param, "grid {grid_side}² ≠ {n_p} patches");
    let mut mask = vec![false; n_p];
    if rng.random::<f32>() >= cfg.mask_probability {
        return Ok(mask);
    }
    let (lo, hi) = cfg.ratio_range;
    let ratio = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let target = (ratio * n_p as f32).floor() as usize;
    let (la, lb) = (0.3f32.ln(), (1.0f32 / 0.3).ln());
    let mut count = 0usize;
    while count < target {
        let budget = target - count;
        let mut added = 0;
        for _ in 0..10 {
            let lo_area = cfg.block_min.min(budget);
            let area = rng.random_range(lo_area..=budget) as f32;
            let aspect = rng.random_range(la..=lb).exp();
            let bh = ((area * aspect).sqrt().round() as usize).max(1);
            let bw = ((area / aspect).sqrt().round() as usize).max(1);
            if bh > grid_side || bw > grid_side {
                continue;
            }
            let top = rng.random_range(0..=grid_side - bh);
            let left = rng.random_range(0..=grid_side - bw);
            let fresh = (top..top + bh)
                .flat_map(|y| (left..left + bw).map(move |x| y * grid_side + x))
                .filter(|&i| !mask[i])
                .count();
            if fresh > 0 && fresh <= budget {
                for y in top..top + bh {
                    for x in left..left + bw {
                        mask[y * grid_side + x] = true;
                    }
                }
                added = fresh;
                break;
            }
        }
        if added == 0 {
            break;
        }
        count += added;
    }
    Ok(mask)
}
