use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::Vit;
use crate::data::{Corpus, ImageSample};
use crate::error::{ensure, Result};
use crate::image::Image;
use crate::pretrain::{load_pretrained, EvalBackbone};

const ENCODE_BATCH: usize = 64;

/// Frozen class-token embeddings of a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    /// `N × D`
    pub x: Array2<f32>,
    pub labels: Option<Vec<usize>>,
    pub subgroups: Option<Vec<String>>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.x.nrows() == self.ids.len(), Shape, "{} rows for {} ids", self.x.nrows(), self.ids.len());
        if let Some(l) = &self.labels {
            ensure!(l.len() == self.ids.len(), Shape, "{} labels for {} ids", l.len(), self.ids.len());
        }
        if let Some(s) = &self.subgroups {
            ensure!(s.len() == self.ids.len(), Shape, "{} subgroups for {} ids", s.len(), self.ids.len());
        }
        ensure!(self.x.iter().all(|v| v.is_finite()), Numerical, "non-finite embedding");
        Ok(())
    }
}

/// Images resized to the backbone input size.
pub fn prepare(vit: &Vit, img: &Image) -> Image {
    let s = vit.config.image_size;
    if img.height == s && img.width == s {
        img.clone()
    } else {
        img.resize(s, s)
    }
}

/// Class-token embeddings of `images`, encoded in fixed-size batches.
pub fn encode_images(vit: &Vit, images: &[&Image]) -> Result<Array2<f32>> {
    let mut x = Array2::<f32>::zeros((images.len(), vit.dim()));
    for (bi, chunk) in images.chunks(ENCODE_BATCH).enumerate() {
        let prepped: Vec<Image> = chunk.iter().map(|i| prepare(vit, i)).collect();
        let refs: Vec<&Image> = prepped.iter().collect();
        let out = vit.encode(&refs, None)?;
        let start = bi * ENCODE_BATCH;
        x.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&out.cls);
    }
    Ok(x)
}

/// Features of `samples[indices]`; labels are the samples' `target` classes.
pub fn extract_sample_features(vit: &Vit, samples: &[ImageSample], indices: &[usize]) -> Result<FeatureSet> {
    let chosen: Vec<&ImageSample> = indices.iter().map(|&i| &samples[i]).collect();
    let images: Vec<&Image> = chosen.iter().map(|s| &s.image).collect();
    let x = encode_images(vit, &images)?;
    let labels: Option<Vec<usize>> = chosen.iter().map(|s| s.target).collect();
    let subgroups: Option<Vec<String>> = chosen.iter().map(|s| s.subgroup.clone()).collect();
    let fs = FeatureSet {
        ids: chosen.iter().map(|s| s.sample_id.clone()).collect(),
        x,
        labels,
        subgroups,
    };
    fs.validate()?;
    Ok(fs)
}

/// Features of one split of a classification corpus under the `which`
/// backbone stored in `checkpoint_dir`.
pub fn extract_features(checkpoint_dir: &Path, which: EvalBackbone, corpus: &Corpus, split: &str) -> Result<FeatureSet> {
    let (_, vit) = load_pretrained(checkpoint_dir, which)?;
    extract_sample_features(&vit, corpus.classification()?, &corpus.split_indices(split)?)
}
