use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CaptionSample, Corpus, CorpusItems, CorpusManifest, ImageSample, SegSample, Task};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// One `samples[]` record in the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub relative_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

/// The manifest document as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub name: String,
    pub task: Task,
    pub label_names: Vec<String>,
    pub seed: u64,
    pub splits: BTreeMap<String, Vec<String>>,
    pub samples: Vec<ManifestEntry>,
}

/// Writes `corpus` under the manifest's directory: `images/<id>.png`,
/// `masks/<id>.png` for segmentation, and the JSON manifest at `path`.
pub fn save_manifest(corpus: &Corpus, path: &Path) -> Result<()> {
    corpus.validate()?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut entries = Vec::with_capacity(corpus.items.len());
    match &corpus.items {
        CorpusItems::Classification(v) => {
            for s in v {
                let rel = format!("images/{}.png", s.sample_id);
                s.image.save_png(&root.join(&rel))?;
                entries.push(ManifestEntry {
                    sample_id: s.sample_id.clone(),
                    relative_path: rel,
                    label_ids: Some(s.label_ids.iter().copied().collect()),
                    target: s.target,
                    subgroup: s.subgroup.clone(),
                    mask_path: None,
                    caption: None,
                });
            }
        }
        CorpusItems::Segmentation(v) => {
            let masks_dir = root.join("masks");
            fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
            for s in v {
                let rel = format!("images/{}.png", s.sample_id);
                let mrel = format!("masks/{}.png", s.sample_id);
                s.image.save_png(&root.join(&rel))?;
                s.mask.save_png(&root.join(&mrel))?;
                entries.push(ManifestEntry {
                    sample_id: s.sample_id.clone(),
                    relative_path: rel,
                    label_ids: None,
                    target: None,
                    subgroup: None,
                    mask_path: Some(mrel),
                    caption: None,
                });
            }
        }
        CorpusItems::Caption(v) => {
            for s in v {
                let rel = format!("images/{}.png", s.sample_id);
                s.image.save_png(&root.join(&rel))?;
                entries.push(ManifestEntry {
                    sample_id: s.sample_id.clone(),
                    relative_path: rel,
                    label_ids: None,
                    target: None,
                    subgroup: None,
                    mask_path: None,
                    caption: Some(s.caption.join(" ")),
                });
            }
        }
    }
    let m = &corpus.manifest;
    let doc = ManifestFile {
        name: m.name.clone(),
        task: m.task,
        label_names: m.label_names.clone(),
        seed: m.seed,
        splits: m.splits.clone(),
        samples: entries,
    };
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a manifest and every referenced payload, then validates the corpus.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestFile = serde_json::from_str(&text)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let load_image = |e: &ManifestEntry| -> Result<Image> {
        let p = root.join(&e.relative_path);
        if !p.exists() {
            return Err(Error::Data(format!(
                "sample `{}`: image file {} is missing",
                e.sample_id,
                p.display()
            )));
        }
        Image::load_png(&p)
    };
    let items = match doc.task {
        Task::Classification => CorpusItems::Classification(
            doc.samples
                .iter()
                .map(|e| {
                    Ok(ImageSample {
                        sample_id: e.sample_id.clone(),
                        image: load_image(e)?,
                        label_ids: e.label_ids.clone().unwrap_or_default().into_iter().collect::<BTreeSet<_>>(),
                        target: e.target,
                        subgroup: e.subgroup.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        Task::Segmentation => CorpusItems::Segmentation(
            doc.samples
                .iter()
                .map(|e| {
                    let mrel = e
                        .mask_path
                        .as_ref()
                        .ok_or_else(|| Error::Data(format!("sample `{}` has no mask_path", e.sample_id)))?;
                    let mp = root.join(mrel);
                    if !mp.exists() {
                        return Err(Error::Data(format!(
                            "sample `{}`: mask file {} is missing",
                            e.sample_id,
                            mp.display()
                        )));
                    }
                    Ok(SegSample {
                        sample_id: e.sample_id.clone(),
                        image: load_image(e)?,
                        mask: Mask::load_png(&mp)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        Task::Caption => CorpusItems::Caption(
            doc.samples
                .iter()
                .map(|e| {
                    let cap = e
                        .caption
                        .as_ref()
                        .ok_or_else(|| Error::Data(format!("sample `{}` has no caption", e.sample_id)))?;
                    Ok(CaptionSample {
                        sample_id: e.sample_id.clone(),
                        image: load_image(e)?,
                        caption: cap.split_whitespace().map(str::to_string).collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let corpus = Corpus {
        manifest: CorpusManifest {
            name: doc.name,
            task: doc.task,
            label_names: doc.label_names,
            splits: doc.splits,
            seed: doc.seed,
        },
        items,
    };
    corpus.validate()?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_caption_corpus, generate_classification_corpus, generate_segmentation_corpus};

    #[test]
    fn round_trip_all_tasks() {
        let dir = tempfile::tempdir().unwrap();
        for (i, c) in [
            generate_classification_corpus(4, 3, 16, 0.5, 1).unwrap(),
            generate_segmentation_corpus(4, 16, 1).unwrap(),
            generate_caption_corpus(4, 16, 1).unwrap(),
        ]
        .into_iter()
        .enumerate()
        {
            let p = dir.path().join(format!("c{i}")).join("manifest.json");
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            save_manifest(&c, &p).unwrap();
            assert_eq!(load_manifest(&p).unwrap(), c);
        }
    }

    #[test]
    fn missing_sample_file_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_classification_corpus(2, 2, 16, 0.5, 1).unwrap();
        let p = dir.path().join("manifest.json");
        save_manifest(&c, &p).unwrap();
        fs::remove_file(dir.path().join("images/cls-00001.png")).unwrap();
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("cls-00001"), "{err}");
    }

    #[test]
    fn overlapping_splits_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = generate_classification_corpus(2, 2, 16, 0.5, 1).unwrap();
        let first = c.manifest.splits["train"][0].clone();
        c.manifest.splits.get_mut("test").unwrap().push(first);
        assert!(c.validate().is_err());
        // also when the file itself is edited
        let good = generate_classification_corpus(2, 2, 16, 0.5, 1).unwrap();
        let p = dir.path().join("manifest.json");
        save_manifest(&good, &p).unwrap();
        let mut doc: ManifestFile = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        let id = doc.splits["train"][0].clone();
        doc.splits.get_mut("test").unwrap().push(id);
        fs::write(&p, serde_json::to_string(&doc).unwrap()).unwrap();
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("overlapping"), "{err}");
    }
}
