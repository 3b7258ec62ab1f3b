use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::error::{ensure, Error, Result};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub predicted: usize,
    pub neighbor_ids: Vec<String>,
    /// Per-class fraction of the `k` votes.
    pub scores: Vec<f64>,
}

/// Cosine-similarity index over a labeled gallery.
pub struct KnnIndex<'a> {
    gallery: &'a FeatureSet,
    labels: &'a [usize],
    normed: Array2<f32>,
    n_classes: usize,
}

fn normalize(v: ArrayView1<f32>) -> Vec<f32> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

impl<'a> KnnIndex<'a> {
    pub fn new(gallery: &'a FeatureSet, n_classes: usize) -> Result<Self> {
        gallery.validate()?;
        let labels = gallery
            .labels
            .as_deref()
            .ok_or_else(|| Error::Param("kNN gallery has no labels".into()))?;
        ensure!(!labels.is_empty(), Param, "kNN gallery is empty");
        ensure!(labels.iter().all(|&l| l < n_classes), Param, "gallery label ≥ n_classes {n_classes}");
        let mut normed = gallery.x.clone();
        for mut r in normed.rows_mut() {
            let v = normalize(r.view());
            r.iter_mut().zip(v).for_each(|(a, b)| *a = b);
        }
        Ok(KnnIndex {
            gallery,
            labels,
            normed,
            n_classes,
        })
    }

    /// Majority vote over the `k` most similar gallery items; among classes
    /// tied on votes, the one holding the nearest neighbour wins. Equal
    /// similarities rank by gallery position.
    pub fn query(&self, q: ArrayView1<f32>, k: usize) -> Result<KnnResult> {
        ensure!(k >= 1, Param, "k must be ≥ 1");
        ensure!(q.len() == self.normed.ncols(), Shape, "query dim {} vs gallery {}", q.len(), self.normed.ncols());
        let qn = ndarray::Array1::from(normalize(q));
        let sims = self.normed.dot(&qn);
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        order.truncate(k.min(order.len()));
        let mut votes = vec![0usize; self.n_classes];
        for &i in &order {
            votes[self.labels[i]] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let predicted = order
            .iter()
            .map(|&i| self.labels[i])
            .find(|&l| votes[l] == top)
            .expect("some neighbour holds the top vote");
        let kk = order.len() as f64;
        Ok(KnnResult {
            predicted,
            neighbor_ids: order.iter().map(|&i| self.gallery.ids[i].clone()).collect(),
            scores: votes.iter().map(|&v| v as f64 / kk).collect(),
        })
    }
}

pub fn knn_retrieve(query: ArrayView1<f32>, gallery: &FeatureSet, k: usize, n_classes: usize) -> Result<KnnResult> {
    KnnIndex::new(gallery, n_classes)?.query(query, k)
}

/// Predictions and `N × C` vote-fraction scores for every query row.
pub fn knn_classify(queries: &FeatureSet, gallery: &FeatureSet, k: usize, n_classes: usize) -> Result<(Vec<usize>, Array2<f64>)> {
    let index = KnnIndex::new(gallery, n_classes)?;
    let mut preds = Vec::with_capacity(queries.len());
    let mut scores = Array2::zeros((queries.len(), n_classes));
    for (i, q) in queries.x.rows().into_iter().enumerate() {
        let r = index.query(q, k)?;
        preds.push(r.predicted);
        scores.row_mut(i).assign(&ndarray::Array1::from(r.scores));
    }
    Ok((preds, scores))
}
