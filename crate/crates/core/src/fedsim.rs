//! In-process federated averaging of linear heads on frozen features.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::{probe_predict, train_linear_head, FeatureSet, LinearClassifier};
use crate::error::{ensure, Error, Result};
use crate::metrics::{bootstrap_ci, macro_auroc, macro_f1, BootstrapOptions, MetricReport};
use crate::nn::{ParameterSnapshot, Params, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    FedavgWeighted,
    FedavgUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedConfig {
    pub local_epochs: usize,
    pub global_rounds: usize,
    pub lr: f64,
    pub aggregation: Aggregation,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        FederatedConfig {
            local_epochs: 2,
            global_rounds: 2,
            lr: 2e-4,
            aggregation: Aggregation::FedavgWeighted,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl FederatedConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.global_rounds >= 1, Config, "global_rounds must be ≥ 1");
        ensure!(self.batch_size >= 1, Config, "batch_size must be ≥ 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "lr must be positive");
        Ok(())
    }
}

/// One participant: its private training features and its current head.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: String,
    pub dataset: FeatureSet,
    pub head_params: ParameterSnapshot,
    pub n_samples: usize,
}

impl ClientState {
    /// Client with a freshly initialized `n_classes` head.
    pub fn new(client_id: &str, dataset: FeatureSet, n_classes: usize, seed: u64) -> Result<Self> {
        dataset.validate()?;
        ensure!(!dataset.is_empty(), Data, "client `{client_id}` has no samples");
        let labels = dataset
            .labels
            .as_deref()
            .ok_or_else(|| Error::Data(format!("client `{client_id}` has unlabeled features")))?;
        ensure!(labels.iter().all(|&l| l < n_classes), Data, "client `{client_id}` label ≥ {n_classes}");
        let head = LinearClassifier::new(dataset.dim(), n_classes, seed);
        Ok(ClientState {
            client_id: client_id.to_string(),
            n_samples: dataset.len(),
            head_params: head.snapshot(),
            dataset,
        })
    }
}

/// Server → client message.
#[derive(Debug, Clone)]
pub struct Broadcast {
    pub round: usize,
    pub params: ParameterSnapshot,
}

/// Client → server message.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: String,
    pub n_samples: usize,
    pub params: ParameterSnapshot,
}

fn head_from(params: &ParameterSnapshot) -> Result<LinearClassifier> {
    let w = params
        .get("weight")
        .ok_or_else(|| Error::Config("head parameters lack `weight`".into()))?;
    ensure!(w.shape.len() == 2, Config, "head weight must be 2-D");
    let mut head = LinearClassifier::new(w.shape[0], w.shape[1], 0);
    head.load_snapshot(params)?;
    Ok(head)
}

/// Mini-batch order stream used by `client_id` in `round`.
pub fn client_order_stream(client_id: &str, round: usize) -> String {
    format!("fed-order/{client_id}/{round}")
}

/// Starts from `global`, trains the client's head for `local_epochs` with a
/// fresh cosine schedule and returns the new parameters.
pub fn local_train(client: &ClientState, global: &Broadcast, cfg: &FederatedConfig) -> Result<ClientUpdate> {
    let mut head = head_from(&global.params)?;
    if cfg.local_epochs > 0 {
        let labels = client.dataset.labels.as_deref().expect("validated at construction");
        train_linear_head(
            &mut head,
            &client.dataset.x,
            labels,
            cfg.local_epochs,
            cfg.lr,
            cfg.batch_size,
            cfg.seed,
            &client_order_stream(&client.client_id, global.round),
        )?;
    }
    Ok(ClientUpdate {
        client_id: client.client_id.clone(),
        n_samples: client.n_samples,
        params: head.snapshot(),
    })
}

/// Weighted (by sample count) or uniform elementwise mean of the updates.
pub fn fedavg_aggregate(updates: &[(ParameterSnapshot, usize)], mode: Aggregation) -> Result<ParameterSnapshot> {
    ensure!(!updates.is_empty(), Param, "nothing to aggregate");
    let first = &updates[0].0;
    for (p, n) in updates {
        first.check_compatible(p).map_err(|e| Error::Config(format!("incompatible client heads: {e}")))?;
        ensure!(*n > 0, Param, "client update with zero samples");
    }
    let total: usize = updates.iter().map(|u| u.1).sum();
    let weights: Vec<f64> = match mode {
        Aggregation::FedavgWeighted => updates.iter().map(|u| u.1 as f64 / total as f64).collect(),
        Aggregation::FedavgUniform => vec![1.0 / updates.len() as f64; updates.len()],
    };
    let mut out = BTreeMap::new();
    for (k, t) in &first.0 {
        let mut acc = vec![0.0f64; t.data.len()];
        for ((p, _), w) in updates.iter().zip(&weights) {
            for (a, &v) in acc.iter_mut().zip(&p.0[k].data) {
                *a += w * v as f64;
            }
        }
        out.insert(k.clone(), Tensor::new(t.shape.clone(), acc.into_iter().map(|v| v as f32).collect()));
    }
    Ok(ParameterSnapshot(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLog {
    pub client_id: String,
    pub n_samples: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub auroc: MetricReport,
    pub f1: MetricReport,
}

/// One line of the round log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientLog>,
    pub global_checksum: String,
    pub metrics: BTreeMap<String, ClientEval>,
}

#[derive(Debug, Clone)]
pub struct FederatedOutput {
    pub rounds: Vec<RoundRecord>,
    pub head: LinearClassifier,
}

impl FederatedOutput {
    /// Evaluation of the final aggregated head on each client's test split.
    pub fn final_metrics(&self) -> &BTreeMap<String, ClientEval> {
        &self.rounds.last().expect("at least one round").metrics
    }

    pub fn write_round_log(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.rounds {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// AUROC and macro-F1 reports of `head` on a labeled feature set.
pub fn evaluate_head(head: &LinearClassifier, test: &FeatureSet, boot: &BootstrapOptions) -> Result<ClientEval> {
    test.validate()?;
    let labels = test
        .labels
        .as_deref()
        .ok_or_else(|| Error::Data("evaluation split is unlabeled".into()))?;
    let c = head.n_classes();
    let (preds, probs) = probe_predict(head, test);
    let auroc = bootstrap_ci(
        "auroc",
        labels.len(),
        |idx| {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            macro_auroc(&y, &probs.select(ndarray::Axis(0), idx)).unwrap_or(f64::NAN)
        },
        boot,
    )?;
    let f1 = bootstrap_ci(
        "macro_f1",
        labels.len(),
        |idx| {
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let p: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
            macro_f1(&y, &p, c).unwrap_or(f64::NAN)
        },
        boot,
    )?;
    Ok(ClientEval { auroc, f1 })
}

/// Broadcast, local training on every client, aggregation; the aggregated
/// head is evaluated on every client's test split after each round.
/// `clients` and `tests` are paired by position.
pub fn run_federated(
    clients: &mut [ClientState],
    tests: &[FeatureSet],
    cfg: &FederatedConfig,
    boot: &BootstrapOptions,
) -> Result<FederatedOutput> {
    cfg.validate()?;
    ensure!(!clients.is_empty(), Param, "no clients");
    ensure!(clients.len() == tests.len(), Param, "{} clients but {} test splits", clients.len(), tests.len());
    let reference = &clients[0].head_params;
    for c in clients.iter() {
        reference
            .check_compatible(&c.head_params)
            .map_err(|e| Error::Config(format!("client `{}` head incompatible: {e}", c.client_id)))?;
    }
    let mut global = reference.clone();
    let mut rounds = Vec::with_capacity(cfg.global_rounds);
    for round in 0..cfg.global_rounds {
        let msg = Broadcast {
            round,
            params: global.clone(),
        };
        let updates: Vec<Result<ClientUpdate>> = std::thread::scope(|s| {
            let handles: Vec<_> = clients.iter().map(|c| s.spawn(|| local_train(c, &msg, cfg))).collect();
            handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect()
        });
        let updates = updates.into_iter().collect::<Result<Vec<_>>>()?;
        let mut log = Vec::with_capacity(updates.len());
        for (c, u) in clients.iter_mut().zip(&updates) {
            c.head_params = u.params.clone();
            log.push(ClientLog {
                client_id: u.client_id.clone(),
                n_samples: u.n_samples,
                checksum: u.params.content_hash(),
            });
        }
        let pairs: Vec<(ParameterSnapshot, usize)> = updates.into_iter().map(|u| (u.params, u.n_samples)).collect();
        global = fedavg_aggregate(&pairs, cfg.aggregation)?;
        let head = head_from(&global)?;
        let mut metrics = BTreeMap::new();
        for (c, t) in clients.iter().zip(tests) {
            metrics.insert(c.client_id.clone(), evaluate_head(&head, t, boot)?);
        }
        rounds.push(RoundRecord {
            round,
            clients: log,
            global_checksum: global.content_hash(),
            metrics,
        });
    }
    Ok(FederatedOutput {
        rounds,
        head: head_from(&global)?,
    })
}

/// The centralized counterpart of a single-client federation: the same
/// per-round restarts and order streams without any aggregation.
pub fn centralized_reference(client: &ClientState, cfg: &FederatedConfig) -> Result<LinearClassifier> {
    cfg.validate()?;
    let mut head = head_from(&client.head_params)?;
    let labels = client.dataset.labels.as_deref().expect("validated at construction");
    for round in 0..cfg.global_rounds {
        if cfg.local_epochs > 0 {
            train_linear_head(
                &mut head,
                &client.dataset.x,
                labels,
                cfg.local_epochs,
                cfg.lr,
                cfg.batch_size,
                cfg.seed,
                &client_order_stream(&client.client_id, round),
            )?;
        }
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn snap(v: f32) -> ParameterSnapshot {
        ParameterSnapshot(BTreeMap::from([("w".to_string(), Tensor::scalar(v))]))
    }

    fn scalar(p: &ParameterSnapshot) -> f32 {
        p.get("w").unwrap().data[0]
    }

    fn blobs(n: usize, seed: u64) -> FeatureSet {
        use rand::Rng;
        let mut rng = crate::rng::component_rng(seed, "blobs");
        let mut x = Array2::zeros((n, 4));
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            for j in 0..4 {
                x[[i, j]] = rng.random_range(-0.5..0.5) + if j == y { 2.0 } else { 0.0 };
            }
            labels.push(y);
        }
        FeatureSet {
            ids: (0..n).map(|i| format!("s{i}")).collect(),
            x,
            labels: Some(labels),
            subgroups: None,
        }
    }

    #[test]
    fn mean_and_weighted_mean() {
        let u = fedavg_aggregate(&[(snap(0.0), 5), (snap(2.0), 5)], Aggregation::FedavgWeighted).unwrap();
        assert_eq!(scalar(&u), 1.0);
        let w = fedavg_aggregate(&[(snap(3.0), 1), (snap(0.0), 2), (snap(1.0), 3)], Aggregation::FedavgWeighted).unwrap();
        assert_eq!(scalar(&w), 1.0);
        let m = fedavg_aggregate(&[(snap(3.0), 1), (snap(0.0), 2), (snap(1.0), 3)], Aggregation::FedavgUniform).unwrap();
        assert!((scalar(&m) - 4.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn zero_local_epochs_is_identity() {
        let c = ClientState::new("a", blobs(20, 1), 2, 0).unwrap();
        let cfg = FederatedConfig {
            local_epochs: 0,
            ..Default::default()
        };
        let b = Broadcast {
            round: 0,
            params: c.head_params.clone(),
        };
        assert_eq!(local_train(&c, &b, &cfg).unwrap().params, c.head_params);
    }

    #[test]
    fn mismatched_heads_are_a_config_error() {
        let mut cs = vec![
            ClientState::new("a", blobs(20, 1), 2, 0).unwrap(),
            ClientState::new("b", blobs(20, 2), 3, 0).unwrap(),
        ];
        let tests = vec![blobs(10, 3), blobs(10, 4)];
        let err = run_federated(&mut cs, &tests, &FederatedConfig::default(), &BootstrapOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
