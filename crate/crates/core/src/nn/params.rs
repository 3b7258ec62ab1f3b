use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named flat tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Enumerates the trainable tensors of a module by stable dotted names.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32]));

    fn snapshot(&self) -> ParameterSnapshot {
        let mut map = BTreeMap::new();
        self.visit("", &mut |name, shape, data| {
            map.insert(name.to_string(), Tensor::new(shape.to_vec(), data.to_vec()));
        });
        ParameterSnapshot(map)
    }

    /// Overwrites every parameter from `snap`, failing on a missing key or a
    /// shape mismatch.
    fn load_snapshot(&mut self, snap: &ParameterSnapshot) -> Result<()> {
        let mut err = None;
        let mut seen = 0usize;
        self.visit_mut("", &mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            match snap.0.get(name) {
                None => err = Some(Error::Shape(format!("missing parameter `{name}`"))),
                Some(t) if t.shape != shape => {
                    err = Some(Error::Shape(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        t.shape, shape
                    )))
                }
                Some(t) => {
                    data.copy_from_slice(&t.data);
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != snap.0.len() {
            let mine = self.snapshot();
            let extra: Vec<_> = snap.0.keys().filter(|k| !mine.0.contains_key(*k)).cloned().collect();
            return Err(Error::Shape(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, _, d| d.fill(0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    /// Content hash of all parameters (names, shapes and raw bits).
    fn param_hash(&self) -> String {
        self.snapshot().content_hash()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Ordered name → tensor map; the unit of EMA, checkpointing and aggregation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSnapshot(pub BTreeMap<String, Tensor>);

impl ParameterSnapshot {
    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.0.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks that both snapshots have identical key sets and shapes.
    pub fn check_compatible(&self, other: &ParameterSnapshot) -> Result<()> {
        for (k, t) in &self.0 {
            match other.0.get(k) {
                None => return Err(Error::Shape(format!("key `{k}` missing from other snapshot"))),
                Some(o) if o.shape != t.shape => {
                    return Err(Error::Shape(format!(
                        "key `{k}`: shape {:?} vs {:?}",
                        t.shape, o.shape
                    )))
                }
                _ => {}
            }
        }
        if let Some(k) = other.0.keys().find(|k| !self.0.contains_key(*k)) {
            return Err(Error::Shape(format!("key `{k}` missing from this snapshot")));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian bits.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, t) in &self.0 {
            h.update(k.as_bytes());
            for s in &t.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Restricts the snapshot to keys starting with `prefix.` and strips it.
    pub fn sub(&self, prefix: &str) -> ParameterSnapshot {
        let p = format!("{prefix}.");
        ParameterSnapshot(
            self.0
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        )
    }

    pub fn with_prefix(&self, prefix: &str) -> ParameterSnapshot {
        ParameterSnapshot(self.0.iter().map(|(k, v)| (join(prefix, k), v.clone())).collect())
    }

    pub fn merge(&mut self, other: ParameterSnapshot) {
        self.0.extend(other.0);
    }
}
