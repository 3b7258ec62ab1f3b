use ndarray::Array2;

use crate::error::{ensure, Error, Result};
use crate::image::Mask;

/// One-vs-rest AUROC of `scores` for the positives in `is_pos`, with ties
/// resolved by midranks. `None` when either class is empty.
pub fn binary_auroc(is_pos: &[bool], scores: &[f64]) -> Option<f64> {
    let n = scores.len();
    let n_pos = is_pos.iter().filter(|p| **p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if is_pos[o] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Mean over classes present in `labels` of the one-vs-rest AUROC of the
/// matching score column.
pub fn macro_auroc(labels: &[usize], scores: &Array2<f64>) -> Result<f64> {
    let (n, c) = scores.dim();
    ensure!(labels.len() == n, Shape, "{} labels for {n} score rows", labels.len());
    ensure!(labels.iter().all(|&l| l < c), Param, "label outside the {c} score columns");
    let mut total = 0.0;
    let mut used = 0usize;
    for k in 0..c {
        let is_pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let col: Vec<f64> = scores.column(k).to_vec();
        if let Some(a) = binary_auroc(&is_pos, &col) {
            total += a;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Param("AUROC undefined: labels contain a single class".into()));
    }
    Ok(total / used as f64)
}

pub fn confusion_matrix(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    ensure!(labels.len() == predictions.len(), Shape, "labels and predictions differ in length");
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&l, &p) in labels.iter().zip(predictions) {
        ensure!(l < n_classes && p < n_classes, Param, "class index out of range for {n_classes} classes");
        m[l][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1; a class never predicted and never present
/// scores 0.
pub fn macro_f1(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<f64> {
    ensure!(n_classes >= 1, Param, "n_classes must be ≥ 1");
    ensure!(labels.len() == predictions.len(), Shape, "labels and predictions differ in length");
    let mut tp = vec![0u64; n_classes];
    let mut fp = vec![0u64; n_classes];
    let mut fn_ = vec![0u64; n_classes];
    for (&l, &p) in labels.iter().zip(predictions) {
        ensure!(l < n_classes && p < n_classes, Param, "class index out of range for {n_classes} classes");
        if l == p {
            tp[l] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let f1: f64 = (0..n_classes)
        .map(|k| {
            let denom = 2 * tp[k] + fp[k] + fn_[k];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .sum();
    Ok(f1 / n_classes as f64)
}

pub fn accuracy(labels: &[usize], predictions: &[usize]) -> Result<f64> {
    ensure!(labels.len() == predictions.len(), Shape, "labels and predictions differ in length");
    ensure!(!labels.is_empty(), Param, "accuracy of an empty set");
    let hits = labels.iter().zip(predictions).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `(dice, jaccard)` of two binary masks; both empty gives `(1, 1)`, exactly
/// one empty gives `(0, 0)`.
pub fn dice_jac(pred: &Mask, truth: &Mask) -> Result<(f64, f64)> {
    ensure!(
        pred.height == truth.height && pred.width == truth.width,
        Shape,
        "mask shapes {}×{} vs {}×{}",
        pred.height,
        pred.width,
        truth.height,
        truth.width
    );
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&truth.data) {
        let (a, b) = (a != 0, b != 0);
        p += a as usize;
        t += b as usize;
        inter += (a && b) as usize;
    }
    if p == 0 && t == 0 {
        return Ok((1.0, 1.0));
    }
    if p == 0 || t == 0 {
        return Ok((0.0, 0.0));
    }
    let union = p + t - inter;
    Ok((2.0 * inter as f64 / (p + t) as f64, inter as f64 / union as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn auroc_examples() {
        let s = array![[1.0, 0.1], [1.0, 0.4], [1.0, 0.35], [1.0, 0.8], [1.0, 0.7]];
        let labels = [0, 0, 1, 1, 1];
        let is_pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let col: Vec<f64> = s.column(1).to_vec();
        assert!((binary_auroc(&is_pos, &col).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        let flat = Array2::from_elem((4, 2), 0.3);
        assert_eq!(macro_auroc(&[0, 1, 0, 1], &flat).unwrap(), 0.5);
        let sep = array![[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]];
        assert_eq!(macro_auroc(&[0, 0, 1], &sep).unwrap(), 1.0);
        assert!(macro_auroc(&[1, 1, 1], &sep).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let f = macro_f1(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dice_examples() {
        let mk = |bits: &[u8]| Mask {
            height: 1,
            width: bits.len(),
            data: bits.to_vec(),
        };
        assert_eq!(dice_jac(&mk(&[1, 1, 0]), &mk(&[1, 1, 0])).unwrap(), (1.0, 1.0));
        assert_eq!(dice_jac(&mk(&[1, 0, 0]), &mk(&[0, 1, 0])).unwrap(), (0.0, 0.0));
        assert_eq!(dice_jac(&mk(&[0, 0]), &mk(&[0, 0])).unwrap(), (1.0, 1.0));
        assert_eq!(dice_jac(&mk(&[1, 0]), &mk(&[0, 0])).unwrap(), (0.0, 0.0));
        let (d, j) = dice_jac(&mk(&[1, 1, 1, 1, 0, 0]), &mk(&[0, 0, 1, 1, 1, 1])).unwrap();
        assert_eq!(d, 0.5);
        assert!((j - 1.0 / 3.0).abs() < 1e-15);
    }
}
