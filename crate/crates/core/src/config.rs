//! One declarative experiment config covering every module, loaded as
//! defaults ← file ← `key=value` overrides.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    generate_caption_corpus, generate_classification_corpus_with, generate_segmentation_corpus, Corpus, SynthParams,
};
use crate::downstream::{CaptionTrainConfig, DecoderConfig, ProbeConfig, SegTrainConfig, DEFAULT_K};
use crate::error::{ensure, Error, Result};
use crate::fedsim::FederatedConfig;
use crate::metrics::BootstrapOptions;
use crate::pretrain::PretrainConfig;
use crate::rng::component_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_per_class: usize,
    pub n_classes: usize,
    pub image_size: usize,
    pub labeled_fraction: f64,
    pub synth: SynthParams,
    pub seg_samples: usize,
    pub caption_samples: usize,
    pub fed_clients: usize,
    pub fed_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_per_class: 400,
            n_classes: 3,
            image_size: 64,
            labeled_fraction: 0.25,
            synth: SynthParams::default(),
            seg_samples: 400,
            caption_samples: 400,
            fed_clients: 3,
            fed_per_class: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every component seed below is derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub knn_k: usize,
    pub probe: ProbeConfig,
    pub seg: SegTrainConfig,
    pub caption: CaptionTrainConfig,
    pub decoder: DecoderConfig,
    pub caption_max_len: usize,
    pub federated: FederatedConfig,
    pub bootstrap: BootstrapOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            knn_k: DEFAULT_K,
            probe: ProbeConfig::default(),
            seg: SegTrainConfig::default(),
            caption: CaptionTrainConfig::default(),
            decoder: DecoderConfig::default(),
            caption_max_len: 12,
            federated: FederatedConfig::default(),
            bootstrap: BootstrapOptions::default(),
        }
    }
}

/// Merges `patch` into `base`; every key of `patch` must already exist.
fn merge_strict(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| Error::Config(format!("unknown config key `{sub}`")))?;
                if slot.is_object() && v.is_object() {
                    merge_strict(slot, v, &sub)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        _ => Err(Error::Config(format!("`{path}` must be an object"))),
    }
}

/// Applies one `a.b.c=value` override; the value is read as JSON and falls
/// back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    ensure!(!key.is_empty(), Config, "override `{assignment}` has an empty key");
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

fn from_value(v: Value) -> Result<ExperimentConfig> {
    serde_json::from_value(v).map_err(|e| Error::Config(format!("config does not match schema: {e}")))
}

impl ExperimentConfig {
    /// Defaults, then `file` (if any), then the root `seed` (or the file's)
    /// copied into every component, then `overrides` in order.
    pub fn load(file: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(ExperimentConfig::default())?;
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let patch: Value = serde_json::from_str(&text)?;
            merge_strict(&mut v, &patch, "")?;
        }
        let base = from_value(v)?;
        let mut v = serde_json::to_value(base.with_seed(seed.unwrap_or(base.seed)))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg = from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.probe.validate()?;
        self.federated.validate()?;
        ensure!(self.knn_k >= 1, Config, "knn_k must be ≥ 1");
        ensure!(
            self.data.image_size == self.pretrain.model.image_size,
            Config,
            "data.image_size {} differs from the model's {}",
            self.data.image_size,
            self.pretrain.model.image_size
        );
        Ok(())
    }

    /// Copy with `seed` as root and every component seed set from it.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.pretrain.train.seed = seed;
        c.probe.seed = seed;
        c.seg.seed = seed;
        c.caption.seed = seed;
        c.decoder.seed = seed;
        c.federated.seed = seed;
        c.bootstrap.seed = seed;
        c
    }

    pub fn classification_corpus(&self) -> Result<Corpus> {
        let d = &self.data;
        generate_classification_corpus_with(d.n_per_class, d.n_classes, d.image_size, d.labeled_fraction, self.seed, &d.synth)
    }

    pub fn segmentation_corpus(&self) -> Result<Corpus> {
        generate_segmentation_corpus(self.data.seg_samples, self.data.image_size, self.seed)
    }

    pub fn caption_corpus(&self) -> Result<Corpus> {
        generate_caption_corpus(self.data.caption_samples, self.data.image_size, self.seed)
    }

    /// Binary corpora for the federated clients; each draws its own seed and
    /// lighting range so that the clients differ in distribution.
    pub fn federated_corpora(&self) -> Result<Vec<Corpus>> {
        let d = &self.data;
        (0..d.fed_clients)
            .map(|i| {
                let seed: u64 = component_rng(self.seed, &format!("fed-client-{i}")).random();
                let params = SynthParams {
                    lighting: d.synth.lighting * (1.0 + i as f32),
                    ..d.synth.clone()
                };
                generate_classification_corpus_with(d.fed_per_class, 2, d.image_size, 1.0, seed, &params)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_validate_against_schema() {
        let c = ExperimentConfig::load(None, None, &["pretrain.train.epochs=3".into(), "knn_k=7".into()]).unwrap();
        assert_eq!(c.pretrain.train.epochs, 3);
        assert_eq!(c.knn_k, 7);
        let e = ExperimentConfig::load(None, None, &["pretrain.train.epochz=3".into()]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = ExperimentConfig::load(None, None, &["knn_k=many".into()]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let c = ExperimentConfig::load(None, None, &["federated.aggregation=fedavg_uniform".into()]).unwrap();
        assert_eq!(c.federated.aggregation, crate::fedsim::Aggregation::FedavgUniform);
    }

    #[test]
    fn root_seed_propagates_and_overrides_win() {
        let c = ExperimentConfig::load(None, Some(7), &["pretrain.train.seed=8".into()]).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.probe.seed, 7);
        assert_eq!(c.pretrain.train.seed, 8);
    }

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        let v = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&v).unwrap(), c);
    }
}
