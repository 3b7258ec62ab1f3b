use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::features::prepare;
use super::probe::cross_entropy_grad;
use crate::backbone::Vit;
use crate::data::CaptionSample;
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::nn::optim::Adam;
use crate::nn::{join_name, trunc_normal, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Lora, Mat, Params};
use crate::pretrain::cosine_schedule;
use crate::rng::{component_rng, stream_rng};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
}

impl Vocab {
    /// Special tokens followed by `words` in sorted, deduplicated order.
    pub fn new(words: &[String]) -> Self {
        let mut w: Vec<String> = words.to_vec();
        w.sort();
        w.dedup();
        w.retain(|x| !SPECIALS.contains(&x.as_str()));
        Vocab {
            tokens: SPECIALS.iter().map(|s| s.to_string()).chain(w).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words
            .iter()
            .map(|w| self.tokens.iter().position(|t| t == w).unwrap_or(UNK))
            .collect()
    }

    /// Words of `ids`, stopping at the first end token and skipping specials.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= SPECIALS.len())
            .map(|&i| self.tokens[i].clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoraTarget {
    AttentionProjections,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub target: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            target: vec![LoraTarget::AttentionProjections],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.rank >= 1, Config, "LoRA rank must be ≥ 1");
        ensure!(!self.target.is_empty(), Config, "LoRA needs at least one target");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
    /// Longest text sequence, including the start and end tokens.
    pub max_len: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            width: 128,
            depth: 2,
            heads: 4,
            mlp_ratio: 2.0,
            max_len: 16,
            pretrain_epochs: 20,
            pretrain_lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Small causal transformer language model.
#[derive(Debug, Clone)]
pub struct CaptionDecoder {
    pub config: DecoderConfig,
    pub vocab: Vocab,
    /// `V × W`
    pub tok_embed: Mat,
    /// `max_len × W`, text positions only.
    pub pos_embed: Mat,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub lm_head: Linear,
}

impl Params for CaptionDecoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        f(&join_name(prefix, "tok_embed"), self.tok_embed.shape(), self.tok_embed.as_slice().unwrap());
        f(&join_name(prefix, "pos_embed"), self.pos_embed.shape(), self.pos_embed.as_slice().unwrap());
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join_name(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join_name(prefix, "norm"), f);
        self.lm_head.visit(&join_name(prefix, "lm_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        let sh = self.tok_embed.shape().to_vec();
        f(&join_name(prefix, "tok_embed"), &sh, self.tok_embed.as_slice_mut().unwrap());
        let sh = self.pos_embed.shape().to_vec();
        f(&join_name(prefix, "pos_embed"), &sh, self.pos_embed.as_slice_mut().unwrap());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join_name(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join_name(prefix, "norm"), f);
        self.lm_head.visit_mut(&join_name(prefix, "lm_head"), f);
    }
}

struct DecoderCache {
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
    normed: Mat,
    tokens: Vec<Vec<usize>>,
    n_prefix: usize,
}

/// `BOS w₁ … wₙ` inputs and `w₁ … wₙ EOS` targets, padded to a common length.
fn teacher_forcing(seqs: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let l = seqs.iter().map(|s| s.len() + 1).max().unwrap_or(1);
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut i = vec![BOS];
        i.extend(s);
        let mut t = s.clone();
        t.push(EOS);
        i.resize(l, PAD);
        t.resize(l, PAD);
        inputs.push(i);
        targets.push(t);
    }
    (inputs, targets)
}

/// Cross-entropy over non-padding targets of text rows, with the logit
/// gradient spread back to all rows.
fn masked_text_loss(logits: &Mat, targets: &[Vec<usize>], n_prefix: usize) -> (f64, Mat) {
    let l = targets[0].len();
    let t = n_prefix + l;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, tg) in targets.iter().enumerate() {
        for (j, &y) in tg.iter().enumerate() {
            if y != PAD {
                rows.push(i * t + n_prefix + j);
                labels.push(y);
            }
        }
    }
    let sel = logits.select(Axis(0), &rows);
    let (loss, d) = cross_entropy_grad(&sel, &labels);
    let mut full = Array2::zeros(logits.dim());
    for (k, &r) in rows.iter().enumerate() {
        full.row_mut(r).assign(&d.row(k));
    }
    (loss, full)
}

impl CaptionDecoder {
    pub fn new(config: DecoderConfig, vocab: Vocab) -> Result<Self> {
        ensure!(config.width.is_multiple_of(config.heads), Config, "decoder width must divide by heads");
        ensure!(config.max_len >= 2, Config, "max_len must be ≥ 2");
        let mut rng = component_rng(config.seed, "decoder-init");
        let w = config.width;
        let hidden = (w as f32 * config.mlp_ratio).round() as usize;
        Ok(CaptionDecoder {
            tok_embed: trunc_normal(&mut rng, (vocab.len(), w), 0.02),
            pos_embed: trunc_normal(&mut rng, (config.max_len, w), 0.02),
            blocks: (0..config.depth).map(|_| Block::new(&mut rng, w, config.heads, hidden)).collect(),
            norm: LayerNorm::new(w),
            lm_head: Linear::new(&mut rng, w, vocab.len()),
            vocab,
            config,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// Logits for `n` sequences, each `n_prefix` embedding rows from
    /// `prefix` followed by the text `tokens` (equal lengths).
    fn forward(&self, prefix: Option<&Mat>, n_prefix: usize, tokens: &[Vec<usize>]) -> Result<(Mat, DecoderCache)> {
        let n = tokens.len();
        let l = tokens.first().map_or(0, |t| t.len());
        ensure!(tokens.iter().all(|t| t.len() == l), Shape, "ragged token batch");
        ensure!(l <= self.config.max_len, Param, "sequence length {l} exceeds max_len {}", self.config.max_len);
        if let Some(p) = prefix {
            ensure!(p.nrows() == n * n_prefix, Shape, "prefix rows {} for {n}×{n_prefix}", p.nrows());
        }
        let t = n_prefix + l;
        let mut x = Array2::<f32>::zeros((n * t, self.width()));
        for (i, toks) in tokens.iter().enumerate() {
            if let Some(p) = prefix {
                x.slice_mut(s![i * t..i * t + n_prefix, ..])
                    .assign(&p.slice(s![i * n_prefix..(i + 1) * n_prefix, ..]));
            }
            for (j, &tok) in toks.iter().enumerate() {
                ensure!(tok < self.vocab.len(), Param, "token id {tok} outside the vocabulary");
                let mut row = x.row_mut(i * t + n_prefix + j);
                row += &self.tok_embed.row(tok);
                row += &self.pos_embed.row(j);
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, t, true);
            caches.push(c);
            x = y;
        }
        let (normed, norm) = self.norm.forward(&x);
        let logits = self.lm_head.forward(&normed);
        Ok((
            logits,
            DecoderCache {
                blocks: caches,
                norm,
                normed,
                tokens: tokens.to_vec(),
                n_prefix,
            },
        ))
    }

    /// Gradient with respect to the input rows; parameter gradients go to
    /// `grad`.
    fn backward(&self, cache: &DecoderCache, dlogits: &Mat, grad: &mut CaptionDecoder) -> Mat {
        let dn = self.lm_head.backward(&cache.normed, dlogits, &mut grad.lm_head);
        let mut dx = self.norm.backward(&cache.norm, &dn, &mut grad.norm);
        for ((b, c), g) in self.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
            dx = b.backward(c, &dx, g);
        }
        let t = cache.n_prefix + cache.tokens.first().map_or(0, |x| x.len());
        for (i, toks) in cache.tokens.iter().enumerate() {
            for (j, &tok) in toks.iter().enumerate() {
                let r = dx.row(i * t + cache.n_prefix + j);
                let mut e = grad.tok_embed.row_mut(tok);
                e += &r;
                let mut p = grad.pos_embed.row_mut(j);
                p += &r;
            }
        }
        dx
    }

    /// Attaches zero-initialized adapters to the configured linear layers.
    pub fn attach_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        let mut rng = component_rng(seed, "lora-init");
        for b in &mut self.blocks {
            let mut wrap = |l: &mut Linear| {
                l.lora = Some(Lora::new(&mut rng, l.d_in(), l.d_out(), cfg.rank, cfg.alpha));
            };
            if cfg.target.contains(&LoraTarget::AttentionProjections) {
                wrap(&mut b.attn.qkv);
                wrap(&mut b.attn.proj);
            }
            if cfg.target.contains(&LoraTarget::Mlp) {
                wrap(&mut b.mlp.fc1);
                wrap(&mut b.mlp.fc2);
            }
        }
        Ok(())
    }

    /// Mean next-token loss of `captions` without any visual prefix.
    pub fn lm_loss(&self, captions: &[Vec<String>]) -> Result<f64> {
        let seqs: Vec<Vec<usize>> = captions.iter().map(|c| self.vocab.encode(c)).collect();
        let (inp, tgt) = teacher_forcing(&seqs);
        let (logits, _) = self.forward(None, 0, &inp)?;
        Ok(masked_text_loss(&logits, &tgt, 0).0)
    }
}

fn check_captions(captions: &[&Vec<String>], max_len: usize) -> Result<()> {
    ensure!(!captions.is_empty(), Data, "no captions");
    for c in captions {
        ensure!(!c.is_empty(), Data, "empty caption");
        ensure!(c.len() < max_len, Data, "caption of {} words exceeds max_len {max_len}", c.len());
    }
    Ok(())
}

/// Language-model pretraining of a fresh decoder on caption text alone.
pub fn pretrain_decoder(captions: &[Vec<String>], vocab: Vocab, cfg: &DecoderConfig) -> Result<(CaptionDecoder, Vec<f64>)> {
    check_captions(&captions.iter().collect::<Vec<_>>(), cfg.max_len)?;
    let mut dec = CaptionDecoder::new(cfg.clone(), vocab)?;
    let seqs: Vec<Vec<usize>> = captions.iter().map(|c| dec.vocab.encode(c)).collect();
    let n = seqs.len();
    let total = (cfg.pretrain_epochs * n.div_ceil(cfg.batch_size)) as u64;
    let mut opt = Adam::adam();
    let mut grad = dec.clone();
    let mut step = 0u64;
    let mut hist = Vec::new();
    for epoch in 0..cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream_rng(cfg.seed, "decoder-order", epoch as u64));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let (inp, tgt) = teacher_forcing(&batch);
            let (logits, cache) = dec.forward(None, 0, &inp)?;
            let (loss, d) = masked_text_loss(&logits, &tgt, 0);
            ensure!(loss.is_finite(), Numerical, "non-finite decoder loss at step {step}");
            sum += loss * chunk.len() as f64;
            grad.zero();
            dec.backward(&cache, &d, &mut grad);
            let lr = cosine_schedule(step, total, cfg.pretrain_lr, 0.0) as f32;
            opt.update(&mut dec, &grad.snapshot(), lr, &|_| true, &|_| false);
            step += 1;
        }
        hist.push(sum / n as f64);
    }
    Ok((dec, hist))
}

/// Maps frozen visual tokens (class token then patch tokens) into the
/// decoder embedding space.
#[derive(Debug, Clone)]
pub struct CaptionProjection {
    pub linear: Linear,
    /// `n_prefix × W` position code of the visual tokens.
    pub pos: Mat,
}

impl Params for CaptionProjection {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.linear.visit(&join_name(prefix, "linear"), f);
        f(&join_name(prefix, "pos"), self.pos.shape(), self.pos.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.linear.visit_mut(&join_name(prefix, "linear"), f);
        let sh = self.pos.shape().to_vec();
        f(&join_name(prefix, "pos"), &sh, self.pos.as_slice_mut().unwrap());
    }
}

impl CaptionProjection {
    fn forward(&self, visual: &Mat) -> Mat {
        let mut y = self.linear.forward(visual);
        let p = self.pos.nrows();
        for (r, mut row) in y.rows_mut().into_iter().enumerate() {
            row += &self.pos.row(r % p);
        }
        y
    }

    fn backward(&self, visual: &Mat, dy: &Mat, grad: &mut CaptionProjection) {
        self.linear.backward(visual, dy, &mut grad.linear);
        let p = self.pos.nrows();
        for (r, row) in dy.rows().into_iter().enumerate() {
            let mut g = grad.pos.row_mut(r % p);
            g += &row;
        }
    }
}

/// Projection plus LoRA-adapted decoder.
#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub projection: CaptionProjection,
    pub decoder: CaptionDecoder,
}

impl Params for CaptionModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.projection.visit(&join_name(prefix, "projection"), f);
        self.decoder.visit(&join_name(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.projection.visit_mut(&join_name(prefix, "projection"), f);
        self.decoder.visit_mut(&join_name(prefix, "decoder"), f);
    }
}

pub fn is_lora_param(name: &str) -> bool {
    name.ends_with("lora_a") || name.ends_with("lora_b")
}

/// Visual tokens per image: `(1 + N_p) × D` blocks stacked row-wise.
pub fn visual_tokens(vit: &Vit, images: &[&Image]) -> Result<Mat> {
    let np = vit.config.n_patches() + 1;
    let d = vit.dim();
    let mut out = Array2::zeros((images.len() * np, d));
    for (ci, chunk) in images.chunks(32).enumerate() {
        let prepped: Vec<Image> = chunk.iter().map(|i| prepare(vit, i)).collect();
        let refs: Vec<&Image> = prepped.iter().collect();
        let enc = vit.encode(&refs, None)?;
        for k in 0..chunk.len() {
            let r0 = (ci * 32 + k) * np;
            out.row_mut(r0).assign(&enc.cls.row(k));
            out.slice_mut(s![r0 + 1..r0 + np, ..]).assign(&enc.crop_patches(k));
        }
    }
    Ok(out)
}

impl CaptionModel {
    /// Fresh projection in front of `decoder` with zero-initialized LoRA.
    pub fn new(vit: &Vit, mut decoder: CaptionDecoder, lora: &LoraConfig, seed: u64) -> Result<Self> {
        decoder.attach_lora(lora, seed)?;
        let mut rng = component_rng(seed, "caption-projection-init");
        let np = vit.config.n_patches() + 1;
        Ok(CaptionModel {
            projection: CaptionProjection {
                linear: Linear::new(&mut rng, vit.dim(), decoder.width()),
                pos: trunc_normal(&mut rng, (np, decoder.width()), 0.02),
            },
            decoder,
        })
    }

    pub fn n_prefix(&self) -> usize {
        self.projection.pos.nrows()
    }

    /// Next-token logits of every position for `tokens` conditioned on the
    /// visual tokens of the same images.
    pub fn logits(&self, visual: &Mat, tokens: &[Vec<usize>]) -> Result<Mat> {
        let prefix = self.projection.forward(visual);
        Ok(self.decoder.forward(Some(&prefix), self.n_prefix(), tokens)?.0)
    }

    /// Greedy decoding from visual tokens of one image (`(1+N_p) × D`) until
    /// the end token or `max_len` words.
    pub fn generate_from_tokens(&self, visual: &Mat, max_len: usize) -> Result<Vec<String>> {
        let prefix = self.projection.forward(visual);
        let np = self.n_prefix();
        let limit = max_len.min(self.decoder.config.max_len - 1);
        let mut seq = vec![BOS];
        let mut out = Vec::new();
        while out.len() < limit {
            let (logits, _) = self.decoder.forward(Some(&prefix), np, std::slice::from_ref(&seq))?;
            let last = logits.row(logits.nrows() - 1);
            let next = last
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != PAD && *i != BOS)
                .fold((EOS, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(self.decoder.vocab.decode(&out))
    }

    pub fn generate(&self, vit: &Vit, image: &Image, max_len: usize) -> Result<Vec<String>> {
        self.generate_from_tokens(&visual_tokens(vit, &[image])?, max_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionTrainConfig {
    pub proj_lr: f64,
    pub lora_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub lora: LoraConfig,
    pub seed: u64,
}

impl Default for CaptionTrainConfig {
    fn default() -> Self {
        CaptionTrainConfig {
            proj_lr: 4e-4,
            lora_lr: 8e-5,
            epochs: 2,
            batch_size: 4,
            weight_decay: 0.01,
            lora: LoraConfig::default(),
            seed: 0,
        }
    }
}

/// Trains the projection and LoRA factors with AdamW and teacher-forced
/// cross-entropy while the backbone and base decoder stay frozen. Returns
/// the model and the mean loss of each epoch.
pub fn caption_train(
    vit: &Vit,
    samples: &[CaptionSample],
    indices: &[usize],
    decoder: &CaptionDecoder,
    cfg: &CaptionTrainConfig,
) -> Result<(CaptionModel, Vec<f64>)> {
    ensure!(!indices.is_empty(), Data, "caption training set is empty");
    ensure!(cfg.batch_size >= 1, Config, "batch_size must be ≥ 1");
    let chosen: Vec<&CaptionSample> = indices.iter().map(|&i| &samples[i]).collect();
    check_captions(&chosen.iter().map(|s| &s.caption).collect::<Vec<_>>(), decoder.config.max_len)?;
    let mut model = CaptionModel::new(vit, decoder.clone(), &cfg.lora, cfg.seed)?;
    let images: Vec<&Image> = chosen.iter().map(|s| &s.image).collect();
    let visual = visual_tokens(vit, &images)?;
    let np = model.n_prefix();
    let seqs: Vec<Vec<usize>> = chosen.iter().map(|s| model.decoder.vocab.encode(&s.caption)).collect();
    let n = seqs.len();
    let total = (cfg.epochs * n.div_ceil(cfg.batch_size)) as u64;
    let mut proj_opt = Adam::adamw(cfg.weight_decay);
    let mut lora_opt = Adam::adamw(cfg.weight_decay);
    let mut grad = model.clone();
    let mut step = 0u64;
    let mut hist = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream_rng(cfg.seed, "caption-order", epoch as u64));
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<usize> = chunk.iter().flat_map(|&i| i * np..(i + 1) * np).collect();
            let vis = visual.select(Axis(0), &rows);
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let (inp, tgt) = teacher_forcing(&batch);
            let prefix = model.projection.forward(&vis);
            let (logits, cache) = model.decoder.forward(Some(&prefix), np, &inp)?;
            let (loss, d) = masked_text_loss(&logits, &tgt, np);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite caption loss at step {step}")));
            }
            sum += loss * chunk.len() as f64;
            grad.zero();
            let dx = model.decoder.backward(&cache, &d, &mut grad.decoder);
            let t = np + inp[0].len();
            let prefix_rows: Vec<usize> = (0..chunk.len()).flat_map(|i| i * t..i * t + np).collect();
            let dprefix = dx.select(Axis(0), &prefix_rows);
            model.projection.backward(&vis, &dprefix, &mut grad.projection);
            let snap = grad.snapshot();
            let scale = cosine_schedule(step, total, 1.0, 0.0);
            let decays = |k: &str| k.ends_with("weight") || is_lora_param(k);
            proj_opt.update(&mut model, &snap, (cfg.proj_lr * scale) as f32, &|k| k.starts_with("projection."), &decays);
            lora_opt.update(&mut model, &snap, (cfg.lora_lr * scale) as f32, &|k| is_lora_param(k), &decays);
            step += 1;
        }
        hist.push(sum / n as f64);
    }
    Ok((model, hist))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPrediction {
    pub sample_id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
}

pub fn caption_predictions(
    vit: &Vit,
    model: &CaptionModel,
    samples: &[CaptionSample],
    indices: &[usize],
    max_len: usize,
) -> Result<Vec<CaptionPrediction>> {
    let chosen: Vec<&CaptionSample> = indices.iter().map(|&i| &samples[i]).collect();
    let images: Vec<&Image> = chosen.iter().map(|s| &s.image).collect();
    let visual = visual_tokens(vit, &images)?;
    let np = model.n_prefix();
    chosen
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let v = visual.slice(s![i * np..(i + 1) * np, ..]).to_owned();
            Ok(CaptionPrediction {
                sample_id: s.sample_id.clone(),
                reference: s.caption.clone(),
                hypothesis: model.generate_from_tokens(&v, max_len)?,
            })
        })
        .collect()
}

/// Names and shapes of the LoRA factors attached to `decoder`.
pub fn lora_factor_shapes(decoder: &CaptionDecoder) -> BTreeMap<String, Vec<usize>> {
    let mut m = BTreeMap::new();
    decoder.visit("", &mut |k, shape, _| {
        if is_lora_param(k) {
            m.insert(k.to_string(), shape.to_vec());
        }
    });
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::new(&words("b a c a"));
        assert_eq!(v.len(), 7);
        let ids = v.encode(&words("a c z"));
        assert_eq!(ids[2], UNK);
        assert_eq!(v.decode(&[ids[0], ids[1], EOS, ids[0]]), words("a c"));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let vocab = Vocab::new(&words("x y z"));
        let cfg = DecoderConfig {
            width: 8,
            heads: 2,
            max_len: 6,
            ..DecoderConfig::default()
        };
        let dec = CaptionDecoder::new(cfg, vocab).unwrap();
        let seqs = vec![vec![4, 5, 6], vec![6, 4]];
        let (inp, tgt) = teacher_forcing(&seqs);
        let mut rng = component_rng(2, "p");
        let prefix = trunc_normal(&mut rng, (4, 8), 0.5);
        let loss = |d: &CaptionDecoder, p: &Mat| masked_text_loss(&d.forward(Some(p), 2, &inp).unwrap().0, &tgt, 2).0;
        let (logits, cache) = dec.forward(Some(&prefix), 2, &inp).unwrap();
        let (_, dl) = masked_text_loss(&logits, &tgt, 2);
        let mut g = dec.clone();
        g.zero();
        let dx = dec.backward(&cache, &dl, &mut g);
        let eps = 1e-2f32;
        let t = 2 + inp[0].len();
        for (i, r) in [(0usize, 0usize), (1, 1), (1, 0)] {
            for c in [0usize, 3, 7] {
                let mut pp = prefix.clone();
                let mut pm = prefix.clone();
                pp[[i * 2 + r, c]] += eps;
                pm[[i * 2 + r, c]] -= eps;
                let num = (loss(&dec, &pp) - loss(&dec, &pm)) / (2.0 * eps as f64);
                let ana = dx[[i * t + r, c]] as f64;
                assert!((num - ana).abs() < 1e-3 + 2e-2 * num.abs(), "prefix {i},{r},{c}: {num} vs {ana}");
            }
        }
        let gs = g.snapshot();
        for name in ["tok_embed", "blocks.1.attn.qkv.weight", "lm_head.bias"] {
            let base = dec.snapshot();
            let n = base.get(name).unwrap().data.len();
            for idx in [0, n / 2, n - 1] {
                let mut dp = dec.clone();
                let mut dm = dec.clone();
                dp.visit_mut("", &mut |k, _, d| if k == name { d[idx] += eps });
                dm.visit_mut("", &mut |k, _, d| if k == name { d[idx] -= eps });
                let num = (loss(&dp, &prefix) - loss(&dm, &prefix)) / (2.0 * eps as f64);
                let ana = gs.get(name).unwrap().data[idx] as f64;
                assert!((num - ana).abs() < 1e-3 + 2e-2 * num.abs(), "{name}[{idx}]: {num} vs {ana}");
            }
        }
    }
}
