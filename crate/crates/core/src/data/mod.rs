//! Corpus types, seeded synthetic lesion generators and the on-disk manifest.

mod manifest;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

pub use manifest::{load_manifest, save_manifest, ManifestEntry, ManifestFile};
pub use synth::{
    generate_caption_corpus, generate_classification_corpus, generate_classification_corpus_with, generate_segmentation_corpus, lesion_family_names,
    SynthParams,
};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Segmentation,
    Caption,
}

/// One classification corpus item.
///
/// `label_ids` is the pretraining supervision (empty ⇒ unlabeled); `target`
/// is the ground-truth class used only by downstream evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub sample_id: String,
    pub image: Image,
    pub label_ids: BTreeSet<usize>,
    pub target: Option<usize>,
    pub subgroup: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub sample_id: String,
    pub image: Image,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSample {
    pub sample_id: String,
    pub image: Image,
    pub caption: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub name: String,
    pub task: Task,
    /// Class names for classification; the token vocabulary for captions.
    pub label_names: Vec<String>,
    pub splits: BTreeMap<String, Vec<String>>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusItems {
    Classification(Vec<ImageSample>),
    Segmentation(Vec<SegSample>),
    Caption(Vec<CaptionSample>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub items: CorpusItems,
}

impl CorpusItems {
    pub fn len(&self) -> usize {
        match self {
            CorpusItems::Classification(v) => v.len(),
            CorpusItems::Segmentation(v) => v.len(),
            CorpusItems::Caption(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<&str> {
        match self {
            CorpusItems::Classification(v) => v.iter().map(|s| s.sample_id.as_str()).collect(),
            CorpusItems::Segmentation(v) => v.iter().map(|s| s.sample_id.as_str()).collect(),
            CorpusItems::Caption(v) => v.iter().map(|s| s.sample_id.as_str()).collect(),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            CorpusItems::Classification(_) => Task::Classification,
            CorpusItems::Segmentation(_) => Task::Segmentation,
            CorpusItems::Caption(_) => Task::Caption,
        }
    }
}

impl Corpus {
    pub fn classification(&self) -> Result<&[ImageSample]> {
        match &self.items {
            CorpusItems::Classification(v) => Ok(v),
            _ => Err(Error::Data(format!("corpus `{}` is not a classification corpus", self.manifest.name))),
        }
    }

    pub fn segmentation(&self) -> Result<&[SegSample]> {
        match &self.items {
            CorpusItems::Segmentation(v) => Ok(v),
            _ => Err(Error::Data(format!("corpus `{}` is not a segmentation corpus", self.manifest.name))),
        }
    }

    pub fn captions(&self) -> Result<&[CaptionSample]> {
        match &self.items {
            CorpusItems::Caption(v) => Ok(v),
            _ => Err(Error::Data(format!("corpus `{}` is not a caption corpus", self.manifest.name))),
        }
    }

    /// Sample indices belonging to `split`, in manifest order.
    pub fn split_indices(&self, split: &str) -> Result<Vec<usize>> {
        let ids = self
            .manifest
            .splits
            .get(split)
            .ok_or_else(|| Error::Data(format!("corpus `{}` has no split `{split}`", self.manifest.name)))?;
        let pos: BTreeMap<&str, usize> = self.items.ids().into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        ids.iter()
            .map(|id| {
                pos.get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("split `{split}` references unknown sample `{id}`")))
            })
            .collect()
    }

    /// Checks every manifest invariant: unique ids, disjoint splits, split
    /// references exist, labels in range, pixel ranges, mask shapes, caption
    /// tokens in vocabulary.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if self.items.task() != m.task {
            return Err(Error::Data("manifest task does not match items".into()));
        }
        let ids = self.items.ids();
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(*id) {
                return Err(Error::Data(format!("duplicate sample_id `{id}`")));
            }
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, members) in &m.splits {
            for id in members {
                if !seen.contains(id.as_str()) {
                    return Err(Error::Data(format!("split `{split}` references unknown sample `{id}`")));
                }
                if let Some(prev) = owner.insert(id.as_str(), split.as_str()) {
                    return Err(Error::Data(format!(
                        "sample `{id}` appears in overlapping splits `{prev}` and `{split}`"
                    )));
                }
            }
        }
        let n_labels = m.label_names.len();
        match &self.items {
            CorpusItems::Classification(v) => {
                for s in v {
                    if let Some(bad) = s.label_ids.iter().find(|&&l| l >= n_labels) {
                        return Err(Error::Data(format!("sample `{}` has label {bad} ≥ {n_labels}", s.sample_id)));
                    }
                    if s.target.is_some_and(|t| t >= n_labels) {
                        return Err(Error::Data(format!("sample `{}` has out-of-range target", s.sample_id)));
                    }
                    if !s.image.is_valid() {
                        return Err(Error::Data(format!("sample `{}` has pixels outside [0,1]", s.sample_id)));
                    }
                }
            }
            CorpusItems::Segmentation(v) => {
                for s in v {
                    if s.mask.height != s.image.height || s.mask.width != s.image.width {
                        return Err(Error::Data(format!("sample `{}`: mask/image shape differ", s.sample_id)));
                    }
                    if s.mask.data.iter().any(|&b| b > 1) {
                        return Err(Error::Data(format!("sample `{}`: mask not binary", s.sample_id)));
                    }
                }
            }
            CorpusItems::Caption(v) => {
                let vocab: HashSet<&str> = m.label_names.iter().map(String::as_str).collect();
                for s in v {
                    if s.caption.is_empty() {
                        return Err(Error::Data(format!("sample `{}` has an empty caption", s.sample_id)));
                    }
                    if let Some(t) = s.caption.iter().find(|t| !vocab.contains(t.as_str())) {
                        return Err(Error::Data(format!("sample `{}`: token `{t}` not in vocabulary", s.sample_id)));
                    }
                }
            }
        }
        Ok(())
    }
}
