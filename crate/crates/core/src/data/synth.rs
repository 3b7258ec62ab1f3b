use std::collections::{BTreeMap, BTreeSet};
use std::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CaptionSample, Corpus, CorpusItems, CorpusManifest, ImageSample, SegSample, Task};
use crate::error::{ensure, Result};
use crate::image::{Image, Mask};

const FAMILY_NAMES: [&str; 8] = [
    "nevus",
    "melanoma",
    "seborrheic keratosis",
    "basal cell carcinoma",
    "dermatofibroma",
    "vascular lesion",
    "actinic keratosis",
    "lentigo",
];

/// Canonical class names for `n` synthetic lesion families.
pub fn lesion_family_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match FAMILY_NAMES.get(i) {
            Some(s) => s.to_string(),
            None => format!("lesion type {i}"),
        })
        .collect()
}

/// Knobs of the lesion renderer. Defaults make texture and outline the
/// class-bearing cues while skin tone, lighting, lesion color and placement
/// vary freely across classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    /// Lesion semi-major axis range as a fraction of the image side.
    pub radius: (f32, f32),
    /// Peak-to-peak texture modulation inside the lesion.
    pub texture_amplitude: f32,
    /// Width of each family's hue band; bands are spaced narrower than this so
    /// they overlap.
    pub hue_band: f32,
    pub hue_spacing: f32,
    pub pixel_noise: f32,
    pub lighting: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            radius: (0.36, 0.48),
            texture_amplitude: 1.0,
            hue_band: 0.10,
            hue_spacing: 0.02,
            pixel_noise: 0.03,
            lighting: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Texture {
    Smooth,
    Dots,
    Streaks,
}

/// Parametric description of one lesion family.
#[derive(Debug, Clone, Copy)]
struct Family {
    texture: Texture,
    /// Texture period in pixels at 64 px.
    period: f32,
    /// Axis ratio range (minor / major).
    axis_ratio: (f32, f32),
    hue: f32,
    irregularity: f32,
}

fn family(c: usize, p: &SynthParams) -> Family {
    let texture = match c % 3 {
        0 => Texture::Smooth,
        1 => Texture::Dots,
        _ => Texture::Streaks,
    };
    let variant = (c / 3) as f32;
    let axis_ratio = match c % 3 {
        0 => (0.75, 1.0),
        1 => (0.6, 0.95),
        _ => (0.45, 0.8),
    };
    Family {
        texture,
        period: 6.0 + 2.0 * variant,
        axis_ratio,
        hue: 0.04 + p.hue_spacing * c as f32,
        irregularity: 0.04 + 0.05 * (c % 2) as f32,
    }
}

fn sample_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index + 1);
    rng
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const SKIN_TONES: [[f32; 3]; 3] = [[0.92, 0.78, 0.68], [0.78, 0.58, 0.45], [0.50, 0.36, 0.27]];

/// Skin background with a linear lighting gradient; returns the image and the
/// tone bucket used.
fn skin_background(rng: &mut ChaCha8Rng, size: usize, p: &SynthParams) -> (Image, usize) {
    let tone = rng.random_range(0..SKIN_TONES.len());
    let mut base = SKIN_TONES[tone];
    let shift: f32 = rng.random_range(-0.06..0.06);
    for (k, b) in base.iter_mut().enumerate() {
        *b += shift + rng.random_range(-0.03..0.03) * (k as f32 - 1.0);
    }
    let angle = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.0..p.lighting);
    let (ca, sa) = (angle.cos(), angle.sin());
    let s = size as f32;
    let img = Image::from_fn(size, size, |y, x| {
        let u = ((x as f32 + 0.5) / s - 0.5) * ca + ((y as f32 + 0.5) / s - 0.5) * sa;
        let g = 1.0 + amp * u * 2.0;
        [base[0] * g, base[1] * g, base[2] * g]
    });
    (img, tone)
}

struct LesionGeom {
    cy: f32,
    cx: f32,
    major: f32,
    minor: f32,
    theta: f32,
    irregularity: f32,
    lobes: f32,
    phase: f32,
}

impl LesionGeom {
    /// Normalized radial coordinate: < 1 inside the lesion.
    fn rho(&self, y: f32, x: f32) -> f32 {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let r = ((u / self.major).powi(2) + (v / self.minor).powi(2)).sqrt();
        let phi = v.atan2(u);
        r / (1.0 + self.irregularity * (self.lobes * phi + self.phase).sin())
    }
}

/// Paints one lesion of family `fam` over `img`; returns its exact support.
fn paint_lesion(
    rng: &mut ChaCha8Rng,
    img: &mut Image,
    fam: &Family,
    geom: &LesionGeom,
    p: &SynthParams,
    value: f32,
) -> Mask {
    let size = img.height;
    let scale = size as f32 / 64.0;
    let hue = fam.hue + rng.random_range(-p.hue_band / 2.0..p.hue_band / 2.0);
    let sat = rng.random_range(0.35..0.7);
    let color = hsv_to_rgb(hue, sat, value);
    let period = fam.period * scale;
    let stripe_angle = rng.random_range(0.0..PI);
    let (sc, ss) = (stripe_angle.cos(), stripe_angle.sin());
    let phase_y: f32 = rng.random_range(0.0..period);
    let phase_x: f32 = rng.random_range(0.0..period);
    let amp = p.texture_amplitude * rng.random_range(0.8..1.2);
    let mut mask = Mask::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            if geom.rho(fy, fx) >= 1.0 {
                continue;
            }
            mask.data[y * size + x] = 1;
            let t = match fam.texture {
                Texture::Smooth => 0.0,
                Texture::Dots => {
                    let gy = ((fy + phase_y) / period).fract() - 0.5;
                    let gx = ((fx + phase_x) / period).fract() - 0.5;
                    let d2 = gy * gy + gx * gx;
                    if d2 < 0.09 {
                        -1.0
                    } else {
                        0.35
                    }
                }
                Texture::Streaks => (2.0 * PI * ((fx * sc + fy * ss) + phase_x) / period).sin(),
            };
            let m = 1.0 + amp * t * 0.5;
            img.set(y, x, [color[0] * m, color[1] * m, color[2] * m]);
        }
    }
    mask
}

fn finish(rng: &mut ChaCha8Rng, img: &mut Image, noise: f32) {
    let normal = Normal::new(0.0f32, noise.max(1e-9)).expect("valid noise");
    for v in &mut img.data {
        *v += normal.sample(rng);
    }
    img.quantize();
}

fn random_geom(rng: &mut ChaCha8Rng, size: usize, fam: &Family, radius: (f32, f32)) -> LesionGeom {
    let s = size as f32;
    let major = rng.random_range(radius.0..radius.1) * s;
    let ratio = rng.random_range(fam.axis_ratio.0..fam.axis_ratio.1);
    LesionGeom {
        cy: rng.random_range(0.38..0.62) * s,
        cx: rng.random_range(0.38..0.62) * s,
        major,
        minor: major * ratio,
        theta: rng.random_range(0.0..PI),
        irregularity: fam.irregularity,
        lobes: rng.random_range(3..7) as f32,
        phase: rng.random_range(0.0..2.0 * PI),
    }
}

/// Renders one classification image of class `class`.
fn render_class_image(rng: &mut ChaCha8Rng, size: usize, class: usize, p: &SynthParams) -> (Image, usize) {
    let fam = family(class, p);
    let (mut img, tone) = skin_background(rng, size, p);
    let geom = random_geom(rng, size, &fam, p.radius);
    let value = rng.random_range(0.25..0.6);
    paint_lesion(rng, &mut img, &fam, &geom, p, value);
    finish(rng, &mut img, p.pixel_noise);
    (img, tone)
}

/// Seeded classification corpus: `n_per_class · n_classes` images, a
/// stratified 50/50 train/test split and exactly `⌊labeled_fraction · n⌋`
/// samples carrying supervision labels.
pub fn generate_classification_corpus(
    n_per_class: usize,
    n_classes: usize,
    image_size: usize,
    labeled_fraction: f64,
    seed: u64,
) -> Result<Corpus> {
    generate_classification_corpus_with(n_per_class, n_classes, image_size, labeled_fraction, seed, &SynthParams::default())
}

pub fn generate_classification_corpus_with(
    n_per_class: usize,
    n_classes: usize,
    image_size: usize,
    labeled_fraction: f64,
    seed: u64,
    params: &SynthParams,
) -> Result<Corpus> {
    ensure!(n_classes >= 2, Param, "n_classes must be ≥ 2, got {n_classes}");
    ensure!(image_size >= 16, Param, "image_size must be ≥ 16, got {image_size}");
    ensure!(n_per_class >= 1, Param, "n_per_class must be ≥ 1");
    ensure!(
        (0.0..=1.0).contains(&labeled_fraction),
        Param,
        "labeled_fraction must lie in [0,1], got {labeled_fraction}"
    );
    let n = n_per_class * n_classes;
    let mut corpus_rng = sample_rng(seed, 1, 0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut corpus_rng);
    let n_labeled = (labeled_fraction * n as f64).floor() as usize;
    let labeled: BTreeSet<usize> = order[..n_labeled].iter().copied().collect();

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % n_classes;
        let mut rng = sample_rng(seed, 2, i as u64);
        let (image, tone) = render_class_image(&mut rng, image_size, class, params);
        samples.push(ImageSample {
            sample_id: format!("cls-{i:05}"),
            image,
            label_ids: if labeled.contains(&i) { BTreeSet::from([class]) } else { BTreeSet::new() },
            target: Some(class),
            subgroup: Some(format!("tone-{}", tone + 1)),
        });
    }

    let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..n).filter(|i| i % n_classes == c).collect();
        members.shuffle(&mut corpus_rng);
        let half = members.len() / 2;
        let (tr, te) = members.split_at(half);
        splits.entry("train".into()).or_default().extend(tr.iter().map(|&i| samples[i].sample_id.clone()));
        splits.entry("test".into()).or_default().extend(te.iter().map(|&i| samples[i].sample_id.clone()));
    }
    for ids in splits.values_mut() {
        ids.sort();
    }

    Ok(Corpus {
        manifest: CorpusManifest {
            name: format!("synthetic-classification-{n_classes}c-s{seed}"),
            task: Task::Classification,
            label_names: lesion_family_names(n_classes),
            splits,
            seed,
        },
        items: CorpusItems::Classification(samples),
    })
}

/// Seeded segmentation corpus: one lesion blob per image, mask equal to the
/// painted support. Split 50/50.
pub fn generate_segmentation_corpus(n: usize, image_size: usize, seed: u64) -> Result<Corpus> {
    ensure!(n > 0, Param, "n must be > 0");
    ensure!(image_size >= 16, Param, "image_size must be ≥ 16, got {image_size}");
    let p = SynthParams::default();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(seed, 3, i as u64);
        let fam = family(rng.random_range(0..3), &p);
        let (mut img, _) = skin_background(&mut rng, image_size, &p);
        let geom = random_geom(&mut rng, image_size, &fam, (0.22, 0.34));
        let value = rng.random_range(0.25..0.6);
        let mask = paint_lesion(&mut rng, &mut img, &fam, &geom, &p, value);
        finish(&mut rng, &mut img, p.pixel_noise);
        samples.push(SegSample {
            sample_id: format!("seg-{i:05}"),
            image: img,
            mask,
        });
    }
    let ids: Vec<String> = samples.iter().map(|s| s.sample_id.clone()).collect();
    let half = n / 2;
    let splits = BTreeMap::from([
        ("train".to_string(), ids[..half.max(1).min(n)].to_vec()),
        ("test".to_string(), ids[half.max(1).min(n)..].to_vec()),
    ]);
    Ok(Corpus {
        manifest: CorpusManifest {
            name: format!("synthetic-segmentation-s{seed}"),
            task: Task::Segmentation,
            label_names: vec!["background".into(), "lesion".into()],
            splits,
            seed,
        },
        items: CorpusItems::Segmentation(samples),
    })
}

/// Seeded caption corpus. Captions read
/// `<size> <tone> <shape> lesion <vertical> <horizontal>`, each attribute
/// rendered into the pixels.
pub fn generate_caption_corpus(n: usize, image_size: usize, seed: u64) -> Result<Corpus> {
    ensure!(n > 0, Param, "n must be > 0");
    ensure!(image_size >= 16, Param, "image_size must be ≥ 16, got {image_size}");
    let p = SynthParams {
        texture_amplitude: 0.0,
        ..SynthParams::default()
    };
    let s = image_size as f32;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(seed, 4, i as u64);
        let large = rng.random_bool(0.5);
        let dark = rng.random_bool(0.5);
        let oval = rng.random_bool(0.5);
        let upper = rng.random_bool(0.5);
        let left = rng.random_bool(0.5);
        let fam = family(0, &p);
        let (mut img, _) = skin_background(&mut rng, image_size, &p);
        let major = if large { rng.random_range(0.2..0.26) } else { rng.random_range(0.09..0.13) } * s;
        let ratio = if oval { rng.random_range(0.45..0.6) } else { rng.random_range(0.9..1.0) };
        let geom = LesionGeom {
            cy: (if upper { 0.3 } else { 0.7 } + rng.random_range(-0.04..0.04)) * s,
            cx: (if left { 0.3 } else { 0.7 } + rng.random_range(-0.04..0.04)) * s,
            major,
            minor: major * ratio,
            theta: if oval { rng.random_range(-0.3..0.3) } else { 0.0 },
            irregularity: 0.02,
            lobes: 5.0,
            phase: 0.0,
        };
        let value = if dark { rng.random_range(0.15..0.28) } else { rng.random_range(0.5..0.62) };
        paint_lesion(&mut rng, &mut img, &fam, &geom, &p, value);
        finish(&mut rng, &mut img, p.pixel_noise);
        let caption = [
            if large { "large" } else { "small" },
            if dark { "dark" } else { "light" },
            if oval { "oval" } else { "round" },
            "lesion",
            if upper { "upper" } else { "lower" },
            if left { "left" } else { "right" },
        ]
        .iter()
        .map(|w| w.to_string())
        .collect();
        samples.push(CaptionSample {
            sample_id: format!("cap-{i:05}"),
            image: img,
            caption,
        });
    }
    let mut vocab: Vec<String> = [
        "large", "small", "dark", "light", "oval", "round", "lesion", "upper", "lower", "left", "right",
    ]
    .iter()
    .map(|w| w.to_string())
    .collect();
    vocab.sort();
    let ids: Vec<String> = samples.iter().map(|s| s.sample_id.clone()).collect();
    let half = (n / 2).max(1).min(n);
    Ok(Corpus {
        manifest: CorpusManifest {
            name: format!("synthetic-caption-s{seed}"),
            task: Task::Caption,
            label_names: vocab,
            splits: BTreeMap::from([
                ("train".to_string(), ids[..half].to_vec()),
                ("test".to_string(), ids[half..].to_vec()),
            ]),
            seed,
        },
        items: CorpusItems::Caption(samples),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_counts_and_determinism() {
        let a = generate_classification_corpus(10, 3, 32, 1.0, 7).unwrap();
        let b = generate_classification_corpus(10, 3, 32, 1.0, 7).unwrap();
        let s = a.classification().unwrap();
        assert_eq!(s.len(), 30);
        assert_eq!(s.iter().filter(|x| !x.label_ids.is_empty()).count(), 30);
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn zero_fraction_leaves_everything_unlabeled() {
        let a = generate_classification_corpus(5, 2, 16, 0.0, 1).unwrap();
        assert!(a.classification().unwrap().iter().all(|s| s.label_ids.is_empty()));
    }

    #[test]
    fn labeled_count_is_floor_of_fraction() {
        let a = generate_classification_corpus(50, 2, 16, 0.5, 3).unwrap();
        let independent = a.classification().unwrap().iter().filter(|s| !s.label_ids.is_empty()).count();
        assert_eq!(independent, 50);
        let c = generate_classification_corpus(11, 3, 16, 0.3, 3).unwrap();
        let k = c.classification().unwrap().iter().filter(|s| !s.label_ids.is_empty()).count();
        assert_eq!(k, (0.3f64 * 33.0).floor() as usize);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(generate_classification_corpus(5, 1, 32, 0.5, 0).is_err());
        assert!(generate_classification_corpus(5, 3, 8, 0.5, 0).is_err());
        assert!(generate_classification_corpus(5, 3, 32, 1.5, 0).is_err());
        assert!(generate_classification_corpus(5, 3, 32, -0.1, 0).is_err());
        assert!(generate_segmentation_corpus(0, 32, 0).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_balanced() {
        let a = generate_classification_corpus(10, 3, 16, 0.2, 9).unwrap();
        let train: BTreeSet<_> = a.manifest.splits["train"].iter().collect();
        let test: BTreeSet<_> = a.manifest.splits["test"].iter().collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len(), 15);
        assert_eq!(test.len(), 15);
    }

    #[test]
    fn segmentation_masks_match_painted_blob() {
        let c = generate_segmentation_corpus(4, 32, 1).unwrap();
        for s in c.segmentation().unwrap() {
            let f = s.mask.foreground_fraction();
            assert!(f > 0.0 && f < 1.0);
        }
        let d = generate_segmentation_corpus(4, 32, 2).unwrap();
        assert_ne!(c.segmentation().unwrap()[0].image.data, d.segmentation().unwrap()[0].image.data);
    }

    #[test]
    fn caption_tokens_in_vocabulary() {
        let c = generate_caption_corpus(12, 32, 5).unwrap();
        c.validate().unwrap();
        assert!(c.captions().unwrap().iter().all(|s| s.caption.len() == 6));
    }
}
