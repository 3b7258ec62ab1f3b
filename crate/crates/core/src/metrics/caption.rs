//! Caption overlap metrics on pre-tokenized word sequences.

use std::collections::BTreeMap;

pub type Tokens = [String];

fn ngrams(tokens: &Tokens, n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if n == 0 || tokens.len() < n {
        return m;
    }
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Clipped n-gram matches and hypothesis n-gram count.
fn clipped(hyp: &Tokens, refs: &[Vec<String>], n: usize) -> (usize, usize) {
    let h = ngrams(hyp, n);
    let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
    for r in refs {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = h.iter().map(|(g, c)| (*c).min(*max_ref.get(g).unwrap_or(&0))).sum();
    (matched, h.values().sum())
}

fn closest_ref_len(hyp_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp_len), l))
        .unwrap_or(0)
}

fn bleu_from_counts(matched: &[usize], totals: &[usize], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (m, t) in matched.iter().zip(totals) {
        if *m == 0 || *t == 0 {
            return 0.0;
        }
        log_sum += (*m as f64 / *t as f64).ln();
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    bp * (log_sum / matched.len() as f64).exp()
}

/// Sentence BLEU-n: geometric mean of clipped 1..n-gram precisions times the
/// brevity penalty against the closest reference length.
pub fn bleu(hyp: &Tokens, refs: &[Vec<String>], n: usize) -> f64 {
    let (m, t): (Vec<usize>, Vec<usize>) = (1..=n).map(|k| clipped(hyp, refs, k)).unzip();
    bleu_from_counts(&m, &t, hyp.len(), closest_ref_len(hyp.len(), refs))
}

/// Corpus BLEU-n with pooled counts.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> f64 {
    let mut m = vec![0; n];
    let mut t = vec![0; n];
    let (mut hl, mut rl) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        for k in 1..=n {
            let (a, b) = clipped(h, r, k);
            m[k - 1] += a;
            t[k - 1] += b;
        }
        hl += h.len();
        rl += closest_ref_len(h.len(), r);
    }
    bleu_from_counts(&m, &t, hl, rl)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(overlap: f64, hyp_total: f64, ref_total: f64) -> PrfScore {
    let precision = if hyp_total > 0.0 { overlap / hyp_total } else { 0.0 };
    let recall = if ref_total > 0.0 { overlap / ref_total } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    PrfScore { precision, recall, f1 }
}

fn best(scores: impl Iterator<Item = PrfScore>) -> PrfScore {
    scores
        .max_by(|a, b| a.f1.total_cmp(&b.f1))
        .unwrap_or(PrfScore { precision: 0.0, recall: 0.0, f1: 0.0 })
}

/// ROUGE-N against the best-matching reference.
pub fn rouge_n(hyp: &Tokens, refs: &[Vec<String>], n: usize) -> PrfScore {
    let h = ngrams(hyp, n);
    best(refs.iter().map(|r| {
        let rg = ngrams(r, n);
        let overlap: usize = h.iter().map(|(g, c)| (*c).min(*rg.get(g).unwrap_or(&0))).sum();
        prf(overlap as f64, h.values().sum::<usize>() as f64, rg.values().sum::<usize>() as f64)
    }))
}

pub fn lcs_len(a: &Tokens, b: &Tokens) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L (longest common subsequence) against the best-matching reference.
pub fn rouge_l(hyp: &Tokens, refs: &[Vec<String>]) -> PrfScore {
    best(refs.iter().map(|r| prf(lcs_len(hyp, r) as f64, hyp.len() as f64, r.len() as f64)))
}

/// Light suffix stripping applied before METEOR matching.
pub fn stem(word: &str) -> String {
    let w = word.to_lowercase();
    for suf in ["ing", "edly", "ed", "ly", "es", "s"] {
        if w.len() > suf.len() + 2 && w.ends_with(suf) {
            return w[..w.len() - suf.len()].to_string();
        }
    }
    w
}

/// METEOR without synonym matching: exact-after-stemming unigram alignment,
/// `F = P·R / (α·P + (1−α)·R)` with α = 0.9, fragmentation penalty
/// `0.5·(chunks/matches)³`. Best over references.
pub fn meteor_lite(hyp: &Tokens, refs: &[Vec<String>]) -> f64 {
    const ALPHA: f64 = 0.9;
    let h: Vec<String> = hyp.iter().map(|w| stem(w)).collect();
    refs.iter()
        .map(|r| {
            let r: Vec<String> = r.iter().map(|w| stem(w)).collect();
            // greedy left-to-right alignment, each reference token used once
            let mut used = vec![false; r.len()];
            let mut align: Vec<(usize, usize)> = Vec::new();
            for (i, w) in h.iter().enumerate() {
                if let Some(j) = (0..r.len()).find(|&j| !used[j] && &r[j] == w) {
                    used[j] = true;
                    align.push((i, j));
                }
            }
            let m = align.len();
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / h.len() as f64;
            let rc = m as f64 / r.len() as f64;
            let f = p * rc / (ALPHA * p + (1.0 - ALPHA) * rc);
            let mut chunks = 1;
            for w in align.windows(2) {
                if !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1) {
                    chunks += 1;
                }
            }
            let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
            f * (1.0 - penalty)
        })
        .fold(0.0, f64::max)
}

/// CIDEr (unscaled): mean over n = 1..4 of the TF-IDF cosine between the
/// hypothesis and each reference, averaged over references. Document
/// frequencies come from the reference sets. Returns `(corpus mean,
/// per-sample scores)`.
pub fn cider(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> (f64, Vec<f64>) {
    let n_docs = refs.len() as f64;
    if hyps.is_empty() {
        return (0.0, Vec::new());
    }
    let mut per = vec![0.0; hyps.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<Vec<String>, f64> = BTreeMap::new();
        for rs in refs {
            let mut seen: BTreeMap<&[String], ()> = BTreeMap::new();
            for r in rs {
                for g in ngrams(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        let vec_of = |t: &Tokens| -> BTreeMap<Vec<String>, f64> {
            let g = ngrams(t, n);
            let total: usize = g.values().sum();
            g.into_iter()
                .map(|(k, c)| {
                    let idf = (n_docs / df.get(k).copied().unwrap_or(0.0).max(1.0)).ln();
                    (k.to_vec(), c as f64 / total as f64 * idf)
                })
                .collect()
        };
        for (i, (h, rs)) in hyps.iter().zip(refs).enumerate() {
            if rs.is_empty() {
                continue;
            }
            let hv = vec_of(h);
            let hn = hv.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut s = 0.0;
            for r in rs {
                let rv = vec_of(r);
                let rn = rv.values().map(|v| v * v).sum::<f64>().sqrt();
                if hn > 0.0 && rn > 0.0 {
                    let dot: f64 = hv.iter().map(|(k, v)| v * rv.get(k).copied().unwrap_or(0.0)).sum();
                    s += dot / (hn * rn);
                }
            }
            per[i] += s / rs.len() as f64 / 4.0;
        }
    }
    (per.iter().sum::<f64>() / per.len() as f64, per)
}

pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn identity_cases() {
        let r = t("small dark round lesion upper left");
        assert_eq!(bleu(&r, std::slice::from_ref(&r), 1), 1.0);
        assert_eq!(bleu(&r, std::slice::from_ref(&r), 4), 1.0);
        assert_eq!(rouge_l(&r, std::slice::from_ref(&r)).f1, 1.0);
        assert_eq!(rouge_n(&r, std::slice::from_ref(&r), 2).f1, 1.0);
        assert!((meteor_lite(&r, std::slice::from_ref(&r)) - (1.0 - 0.5 / 216.0)).abs() < 1e-12);
    }

    #[test]
    fn hand_examples() {
        assert!((bleu(&t("a b c"), &[t("a b d")], 1) - 2.0 / 3.0).abs() < 1e-15);
        let s = rouge_l(&t("a c b"), &[t("a b c")]);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn brevity_penalty() {
        let b = bleu(&t("a b"), &[t("a b c d")], 1);
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn cider_identity_is_max() {
        let refs = vec![vec![t("a b c d")], vec![t("e f g h")], vec![t("a f c h")]];
        let hyps: Vec<Vec<String>> = refs.iter().map(|r| r[0].clone()).collect();
        let (best, _) = cider(&hyps, &refs);
        let wrong = vec![t("a b c h"), t("e f g d"), t("a f c d")];
        let (worse, _) = cider(&wrong, &refs);
        assert!((best - 1.0).abs() < 1e-12, "{best}");
        assert!(worse < best);
    }
}
