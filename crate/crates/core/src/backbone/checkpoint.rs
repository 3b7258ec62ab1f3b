//! Directory checkpoints: `header.json` plus one little-endian f32 blob per
//! tensor under `tensors/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::optim::Adam;
use crate::nn::{ParameterSnapshot, Tensor};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub key: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub step: u64,
    /// Whatever configuration produced the parameters.
    pub config: serde_json::Value,
    pub rng: Option<ChaCha8Rng>,
    pub optimizer: Option<OptimizerHeader>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: serde_json::Value,
    pub rng: Option<ChaCha8Rng>,
    pub params: ParameterSnapshot,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    /// Fails naming the first config key whose value differs from `expected`.
    pub fn check_config(&self, pointer: &str, expected: &serde_json::Value) -> Result<()> {
        let found = self
            .config
            .pointer(pointer)
            .ok_or_else(|| Error::Config(format!("checkpoint config lacks `{pointer}`")))?;
        if let (Some(a), Some(b)) = (found.as_object(), expected.as_object()) {
            for (k, v) in b {
                if a.get(k) != Some(v) {
                    return Err(Error::Config(format!(
                        "checkpoint config mismatch at `{pointer}/{k}`: checkpoint has {}, expected {v}",
                        a.get(k).map(|x| x.to_string()).unwrap_or_else(|| "nothing".into())
                    )));
                }
            }
            Ok(())
        } else if found != expected {
            Err(Error::Config(format!("checkpoint config mismatch at `{pointer}`")))
        } else {
            Ok(())
        }
    }
}

fn tensor_file(key: &str) -> String {
    format!("tensors/{key}.bin")
}

fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.data.len() * 4);
    for v in &t.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_tensor(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Shape(format!(
            "{}: {} bytes but shape {shape:?} needs {}",
            path.display(),
            bytes.len(),
            n * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(shape.to_vec(), data))
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut all: BTreeMap<String, &Tensor> = ckpt.params.0.iter().map(|(k, v)| (format!("param.{k}"), v)).collect();
    if let Some(opt) = &ckpt.optimizer {
        all.extend(opt.m.iter().map(|(k, v)| (format!("adam_m.{k}"), v)));
        all.extend(opt.v.iter().map(|(k, v)| (format!("adam_v.{k}"), v)));
    }
    let mut entries = Vec::with_capacity(all.len());
    for (key, t) in &all {
        let file = tensor_file(key);
        write_tensor(&dir.join(&file), t)?;
        entries.push(TensorEntry {
            key: key.clone(),
            shape: t.shape.clone(),
            file,
        });
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        step: ckpt.step,
        config: ckpt.config.clone(),
        rng: ckpt.rng.clone(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            step: o.step,
        }),
        tensors: entries,
    };
    let path = dir.join("header.json");
    fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("header.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {}", header.format_version)));
    }
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for e in &header.tensors {
        let t = read_tensor(&dir.join(&e.file), &e.shape)?;
        if let Some(k) = e.key.strip_prefix("param.") {
            params.insert(k.to_string(), t);
        } else if let Some(k) = e.key.strip_prefix("adam_m.") {
            m.insert(k.to_string(), t);
        } else if let Some(k) = e.key.strip_prefix("adam_v.") {
            v.insert(k.to_string(), t);
        } else {
            return Err(Error::Config(format!("unknown tensor key `{}`", e.key)));
        }
    }
    let optimizer = header.optimizer.map(|o| Adam {
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        weight_decay: o.weight_decay,
        step: o.step,
        m,
        v,
    });
    Ok(Checkpoint {
        step: header.step,
        config: header.config,
        rng: header.rng,
        params: ParameterSnapshot(params),
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ViTConfig, Vit};
    use crate::nn::Params;
    use rand::SeedableRng;

    fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        for sub in ["", "tensors"] {
            for e in fs::read_dir(dir.join(sub)).unwrap() {
                let e = e.unwrap();
                if e.file_type().unwrap().is_file() {
                    out.insert(format!("{sub}/{}", e.file_name().to_string_lossy()), fs::read(e.path()).unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vit = Vit::new(ViTConfig::tiny(), &mut rng).unwrap();
        let mut opt = Adam::adamw(0.04);
        let mut v2 = vit.clone();
        let mut g = vit.clone();
        g.visit_mut("", &mut |_, _, d| d.fill(0.01));
        opt.update(&mut v2, &g.snapshot(), 1e-3, &|_| true, &|_| true);
        let ckpt = Checkpoint {
            step: 17,
            config: serde_json::to_value(ViTConfig::tiny()).unwrap(),
            rng: Some(rng),
            params: v2.snapshot(),
            optimizer: Some(opt),
        };
        let d = tempfile::tempdir().unwrap();
        let a = d.path().join("a");
        let b = d.path().join("b");
        save_checkpoint(&ckpt, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(dir_bytes(&a), dir_bytes(&b));
    }

    #[test]
    fn mismatched_config_names_offending_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vit = Vit::new(ViTConfig::tiny(), &mut rng).unwrap();
        let ckpt = Checkpoint {
            step: 0,
            config: serde_json::json!({ "model": ViTConfig::tiny() }),
            rng: None,
            params: vit.snapshot(),
            optimizer: None,
        };
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt, d.path()).unwrap();
        let loaded = load_checkpoint(d.path()).unwrap();
        let mut other = ViTConfig::tiny();
        other.dim = 32;
        other.heads = 2;
        let err = loaded
            .check_config("/model", &serde_json::to_value(&other).unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("dim"), "{err}");
        let mut wrong = Vit::new(other, &mut rng).unwrap();
        let err = wrong.load_snapshot(&loaded.params).unwrap_err().to_string();
        assert!(err.contains("patch_embed.weight") || err.contains("cls_token"), "{err}");
    }
}
