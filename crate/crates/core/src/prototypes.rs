//! Label normalization, embedding-based label merging and the prototype bank.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::nn::{join_name, Mat, Params};

pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.95;

/// Lowercases, maps whitespace, `_` and `-` to single spaces, drops any other
/// non-alphanumeric character and trims.
pub fn normalize_label(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() || c == '_' || c == '-' {
            pending_space = true;
        } else if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, label: &str) -> Result<Vec<f32>>;
}

/// Sum of seeded Gaussian vectors, one per character trigram of the padded
/// label. Deterministic across platforms.
#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    pub dim: usize,
    pub seed: u64,
    pub n: usize,
}

impl HashedNgramEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashedNgramEmbedder { dim, seed, n: 3 }
    }

    fn gram_vector(&self, gram: &str) -> Vec<f32> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(gram.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
    }
}

impl TextEmbedder for HashedNgramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, label: &str) -> Result<Vec<f32>> {
        let padded: Vec<char> = format!("<{label}>").chars().collect();
        let mut v = vec![0.0f32; self.dim];
        let n = self.n.min(padded.len());
        for w in padded.windows(n) {
            let g: String = w.iter().collect();
            for (a, b) in v.iter_mut().zip(self.gram_vector(&g)) {
                *a += b;
            }
        }
        Ok(v)
    }
}

/// Label → vector lookup, loaded from `label<TAB>v1,v2,…` lines.
#[derive(Debug, Clone, Default)]
pub struct TableEmbedder {
    dim: usize,
    table: BTreeMap<String, Vec<f32>>,
}

impl TableEmbedder {
    pub fn from_map(table: BTreeMap<String, Vec<f32>>) -> Result<Self> {
        let dim = table.values().next().map(|v| v.len()).unwrap_or(0);
        ensure!(dim > 0, Param, "embedding table is empty");
        if let Some((k, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::Param(format!("embedding for `{k}` has dim {}, expected {dim}", v.len())));
        }
        let table = table.into_iter().map(|(k, v)| (normalize_label(&k), v)).collect();
        Ok(TableEmbedder { dim, table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (label, vec) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{}:{}: missing tab", path.display(), ln + 1)))?;
            let v = vec
                .split(',')
                .map(|s| s.trim().parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), ln + 1)))?;
            table.insert(label.to_string(), v);
        }
        Self::from_map(table)
    }
}

impl TextEmbedder for TableEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, label: &str) -> Result<Vec<f32>> {
        self.table
            .get(&normalize_label(label))
            .cloned()
            .ok_or_else(|| Error::Param(format!("no embedding for label `{label}`")))
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeGroup {
    pub canonical: String,
    pub members: Vec<String>,
    /// `(a, b, cosine)` for every member pair.
    pub similarities: Vec<(String, String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeMap {
    /// Canonical names in index order (sorted).
    pub canonical: Vec<String>,
    /// Normalized raw label → canonical index.
    pub map: BTreeMap<String, usize>,
    pub groups: Vec<MergeGroup>,
}

impl MergeMap {
    pub fn n_canonical(&self) -> usize {
        self.canonical.len()
    }

    pub fn index_of(&self, raw: &str) -> Result<usize> {
        self.map
            .get(&normalize_label(raw))
            .copied()
            .ok_or_else(|| Error::Param(format!("label `{raw}` is not in the merge map")))
    }

    /// Tab-separated report: canonical, members, pairwise similarities.
    pub fn report(&self) -> String {
        let mut s = String::from("canonical\tmembers\tsimilarities\n");
        for g in &self.groups {
            let sims: Vec<String> = g.similarities.iter().map(|(a, b, c)| format!("{a}~{b}={c:.4}")).collect();
            s.push_str(&format!("{}\t{}\t{}\n", g.canonical, g.members.join("|"), sims.join(";")));
        }
        s
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components of the `cosine ≥ threshold` graph over unique
/// normalized labels; each component is named by its smallest member.
pub fn merge_labels(labels: &[String], embedder: &dyn TextEmbedder, threshold: f64) -> Result<MergeMap> {
    ensure!(!labels.is_empty(), Param, "cannot merge an empty label list");
    ensure!(threshold > 0.0 && threshold <= 1.0, Param, "threshold must be in (0, 1], got {threshold}");
    let unique: Vec<String> = labels
        .iter()
        .map(|l| normalize_label(l))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let vecs = unique.iter().map(|l| embedder.embed(l)).collect::<Result<Vec<_>>>()?;
    let n = unique.len();
    let mut sim = vec![vec![1.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine(&vecs[i], &vecs[j]);
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    merge_by_similarity(&unique, &sim, threshold)
}

/// Union-find over an explicit symmetric similarity matrix. `labels` must be
/// unique; they are used verbatim.
pub fn merge_by_similarity(labels: &[String], sim: &[Vec<f64>], threshold: f64) -> Result<MergeMap> {
    let n = labels.len();
    ensure!(n > 0, Param, "cannot merge an empty label list");
    ensure!(threshold > 0.0 && threshold <= 1.0, Param, "threshold must be in (0, 1], got {threshold}");
    ensure!(
        sim.len() == n && sim.iter().all(|r| r.len() == n),
        Param,
        "similarity matrix must be {n}×{n}"
    );
    ensure!(
        labels.iter().collect::<BTreeSet<_>>().len() == n,
        Param,
        "labels passed to merge_by_similarity must be unique"
    );
    // Work in sorted order so the smallest member index is the lexicographic representative.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| labels[a].cmp(&labels[b]));
    let unique: Vec<String> = order.iter().map(|&i| labels[i].clone()).collect();
    let sim: Vec<Vec<f64>> = order.iter().map(|&i| order.iter().map(|&j| sim[i][j]).collect()).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if sim[i][j] >= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        comps.entry(r).or_default().push(i);
    }
    let mut groups: Vec<(String, Vec<usize>)> = comps.into_values().map(|m| (unique[m[0]].clone(), m)).collect();
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    let mut map = BTreeMap::new();
    let mut out_groups = Vec::with_capacity(groups.len());
    for (ci, (name, members)) in groups.iter().enumerate() {
        let mut sims = Vec::new();
        for (x, &a) in members.iter().enumerate() {
            map.insert(unique[a].clone(), ci);
            for &b in &members[x + 1..] {
                sims.push((unique[a].clone(), unique[b].clone(), sim[a][b]));
            }
        }
        out_groups.push(MergeGroup {
            canonical: name.clone(),
            members: members.iter().map(|&m| unique[m].clone()).collect(),
            similarities: sims,
        });
    }
    Ok(MergeMap {
        canonical: groups.into_iter().map(|g| g.0).collect(),
        map,
        groups: out_groups,
    })
}

/// Stacked, L2-normalized label embeddings.
pub fn build_prototype_init(canonical_labels: &[String], embedder: &dyn TextEmbedder) -> Result<Mat> {
    let d = embedder.dim();
    let mut w = Mat::zeros((canonical_labels.len(), d));
    for (i, l) in canonical_labels.iter().enumerate() {
        let v = embedder.embed(l)?;
        ensure!(v.len() == d, Shape, "embedding of `{l}` has dim {}, expected {d}", v.len());
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        ensure!(norm > 0.0, Numerical, "embedding of `{l}` is zero");
        for (o, x) in w.row_mut(i).iter_mut().zip(&v) {
            *o = (*x as f64 / norm) as f32;
        }
    }
    Ok(w)
}

/// `(y, n)` for one sample. An empty label set is unlabeled: both all zeros.
pub fn labels_to_targets(labels: &[&str], merge_map: &MergeMap, n_c: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut y = vec![0.0; n_c];
    if labels.is_empty() {
        return Ok((y, vec![0.0; n_c]));
    }
    for l in labels {
        let i = merge_map.index_of(l)?;
        ensure!(i < n_c, Param, "canonical index {i} out of range for N_c = {n_c}");
        y[i] = 1.0;
    }
    Ok((y, vec![1.0; n_c]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeInit {
    Text,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub label_names: Vec<String>,
    /// `N_c × D`, trained jointly with the backbone.
    pub w: Mat,
    pub merge_map: MergeMap,
    pub init_matrix: Mat,
}

impl PrototypeBank {
    /// Merges `raw_labels` and initializes `W` from the text embeddings, or
    /// from `N(0, 1/D)` rows when `init` is `Random`.
    pub fn build(
        raw_labels: &[String],
        embedder: &dyn TextEmbedder,
        threshold: f64,
        init: PrototypeInit,
        seed: u64,
    ) -> Result<Self> {
        let merge_map = merge_labels(raw_labels, embedder, threshold)?;
        let w = match init {
            PrototypeInit::Text => build_prototype_init(&merge_map.canonical, embedder)?,
            PrototypeInit::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let std = 1.0 / (embedder.dim() as f32).sqrt();
                Mat::from_shape_simple_fn((merge_map.n_canonical(), embedder.dim()), || {
                    rng.sample::<f32, _>(StandardNormal) * std
                })
            }
        };
        Ok(PrototypeBank {
            label_names: merge_map.canonical.clone(),
            init_matrix: w.clone(),
            w,
            merge_map,
        })
    }

    pub fn n_c(&self) -> usize {
        self.label_names.len()
    }

    pub fn targets(&self, labels: &[&str]) -> Result<(Vec<f32>, Vec<f32>)> {
        labels_to_targets(labels, &self.merge_map, self.n_c())
    }
}

impl Params for PrototypeBank {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f32])) {
        f(&join_name(prefix, "w"), self.w.shape(), self.w.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        let s = self.w.shape().to_vec();
        f(&join_name(prefix, "w"), &s, self.w.as_slice_mut().unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_label("Melanoma"), "melanoma");
        assert_eq!(normalize_label("basal_cell-carcinoma "), "basal cell carcinoma");
        assert_eq!(normalize_label("  Nevus, (benign)!"), "nevus benign");
    }

    #[test]
    fn duplicates_merge_at_any_threshold() {
        let e = HashedNgramEmbedder::new(16, 0);
        let m = merge_labels(&s(&["Melanoma", "melanoma ", "MELANOMA"]), &e, 1.0).unwrap();
        assert_eq!(m.n_canonical(), 1);
    }

    #[test]
    fn orthogonal_labels_stay_apart() {
        let mut t = BTreeMap::new();
        for (i, l) in ["a", "b", "c", "d"].iter().enumerate() {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            t.insert(l.to_string(), v);
        }
        let e = TableEmbedder::from_map(t).unwrap();
        let m = merge_labels(&s(&["a", "b", "c", "d"]), &e, 0.95).unwrap();
        assert_eq!(m.n_canonical(), 4);
    }

    #[test]
    fn empty_list_rejected() {
        let e = HashedNgramEmbedder::new(8, 0);
        assert!(matches!(merge_labels(&[], &e, 0.9), Err(Error::Param(_))));
    }

    #[test]
    fn init_rows_are_normalized_and_equivariant() {
        let e = HashedNgramEmbedder::new(16, 3);
        let labels = s(&["nevus", "melanoma", "seborrheic keratosis"]);
        let w = build_prototype_init(&labels, &e).unwrap();
        assert_eq!(w.dim(), (3, 16));
        for r in w.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
        }
        let rev: Vec<String> = labels.iter().rev().cloned().collect();
        let w2 = build_prototype_init(&rev, &e).unwrap();
        for i in 0..3 {
            assert_eq!(w.row(i), w2.row(2 - i));
        }
    }

    #[test]
    fn targets() {
        let e = HashedNgramEmbedder::new(16, 0);
        let m = merge_labels(&s(&["a1", "b2", "c3", "d4"]), &e, 0.99).unwrap();
        assert_eq!(labels_to_targets(&[], &m, 4).unwrap(), (vec![0.0; 4], vec![0.0; 4]));
        assert_eq!(labels_to_targets(&["c3"], &m, 4).unwrap(), (vec![0.0, 0.0, 1.0, 0.0], vec![1.0; 4]));
        assert!(labels_to_targets(&["zz"], &m, 4).is_err());
    }

    #[test]
    fn table_file_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("emb.tsv");
        fs::write(&p, "Melanoma\t1,0,0\nnevus\t0,1,0\n").unwrap();
        let e = TableEmbedder::load(&p).unwrap();
        assert_eq!(e.dim(), 3);
        assert_eq!(e.embed("melanoma").unwrap(), vec![1.0, 0.0, 0.0]);
        fs::write(&p, "x\t1,0\ny\t1\n").unwrap();
        assert!(TableEmbedder::load(&p).is_err());
    }
}
