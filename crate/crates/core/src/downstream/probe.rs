use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::error::{ensure, Error, Result};
use crate::nn::optim::Adam;
use crate::nn::{Linear, Mat, Params};
use crate::pretrain::cosine_schedule;
use crate::rng::{component_rng, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            lr: 5e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "probe batch_size must be ≥ 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "probe lr must be positive");
        Ok(())
    }
}

/// Row-wise softmax of `logits` in f64.
pub fn softmax_f64(logits: &Mat) -> Array2<f64> {
    let mut p = logits.mapv(|v| v as f64);
    for mut r in p.rows_mut() {
        let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        r.mapv_inplace(|v| (v - m).exp());
        let z = r.sum();
        r.mapv_inplace(|v| v / z);
    }
    p
}

/// Mean cross-entropy of `logits` against `labels` and its gradient with
/// respect to the logits.
pub fn cross_entropy_grad(logits: &Mat, labels: &[usize]) -> (f64, Mat) {
    let n = logits.nrows();
    let p = softmax_f64(logits);
    let mut loss = 0.0;
    let mut d = p.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= p[[i, y]].max(1e-300).ln();
        d[[i, y]] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    (loss * inv, d.mapv(|v| (v * inv) as f32))
}

/// Softmax classifier on frozen features.
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub linear: Linear,
}

impl Params for LinearClassifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.linear.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.linear.visit_mut(prefix, f)
    }
}

impl LinearClassifier {
    pub fn new(dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = component_rng(seed, "linear-head-init");
        LinearClassifier {
            linear: Linear::new(&mut rng, dim, n_classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.linear.d_out()
    }

    pub fn logits(&self, x: &Mat) -> Mat {
        self.linear.forward(x)
    }

    pub fn predict_proba(&self, x: &Mat) -> Array2<f64> {
        softmax_f64(&self.logits(x))
    }

    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        self.predict_proba(x)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect()
    }

    pub fn loss(&self, x: &Mat, labels: &[usize]) -> f64 {
        cross_entropy_grad(&self.logits(x), labels).0
    }
}

/// Trains `head` with Adam and per-step cosine annealing to zero over
/// `epochs` passes. Mini-batch order comes from stream `order_stream`.
/// Returns the mean training loss of each epoch.
pub fn train_linear_head(
    head: &mut LinearClassifier,
    x: &Mat,
    labels: &[usize],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    order_stream: &str,
) -> Result<Vec<f64>> {
    ensure!(x.nrows() == labels.len(), Shape, "{} rows for {} labels", x.nrows(), labels.len());
    ensure!(!labels.is_empty(), Data, "no training samples");
    ensure!(batch_size >= 1, Config, "batch_size must be ≥ 1");
    ensure!(x.ncols() == head.linear.d_in(), Shape, "feature dim {} vs head {}", x.ncols(), head.linear.d_in());
    let c = head.n_classes();
    ensure!(labels.iter().all(|&l| l < c), Param, "label outside {c} classes");
    let n = labels.len();
    let steps_per_epoch = n.div_ceil(batch_size);
    let total = (epochs * steps_per_epoch) as u64;
    let mut opt = Adam::adam();
    let mut grad = head.clone();
    let mut history = Vec::with_capacity(epochs);
    let mut step = 0u64;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, order_stream, epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let xb = x.select(ndarray::Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, dlogits) = cross_entropy_grad(&head.logits(&xb), &yb);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite probe loss at step {step}")));
            }
            epoch_loss += loss * chunk.len() as f64;
            grad.zero();
            head.linear.backward(&xb, &dlogits, &mut grad.linear);
            let lr_t = cosine_schedule(step, total, lr, 0.0) as f32;
            opt.update(head, &grad.snapshot(), lr_t, &|_| true, &|_| false);
            step += 1;
        }
        history.push(epoch_loss / n as f64);
    }
    Ok(history)
}

/// Linear probe on a labeled feature set.
pub fn train_linear_probe(train: &FeatureSet, n_classes: usize, cfg: &ProbeConfig) -> Result<(LinearClassifier, Vec<f64>)> {
    cfg.validate()?;
    train.validate()?;
    let labels = train
        .labels
        .as_deref()
        .ok_or_else(|| Error::Param("linear probe needs labeled features".into()))?;
    let mut head = LinearClassifier::new(train.dim(), n_classes, cfg.seed);
    let hist = train_linear_head(&mut head, &train.x, labels, cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed, "probe-order")?;
    Ok((head, hist))
}

/// `(predictions, N × C probabilities)` of `head` on `set`.
pub fn probe_predict(head: &LinearClassifier, set: &FeatureSet) -> (Vec<usize>, Array2<f64>) {
    let p = head.predict_proba(&set.x);
    let preds = head.predict(&set.x);
    (preds, p)
}
