use std::collections::BTreeMap;

use hpl_core::prototypes::{
    labels_to_targets, merge_by_similarity, merge_labels, normalize_label, HashedNgramEmbedder, TableEmbedder,
};
use proptest::prelude::*;

fn union_find_components(sim: &[Vec<f64>], threshold: f64) -> usize {
    let n = sim.len();
    let mut comp: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in 0..n {
                if i != j && sim[i][j] >= threshold && comp[i] != comp[j] {
                    let m = comp[i].min(comp[j]);
                    comp[i] = m;
                    comp[j] = m;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut c = comp.clone();
    c.sort();
    c.dedup();
    c.len()
}

#[test]
fn transitive_closure_of_explicit_similarities() {
    let labels: Vec<String> = ["gamma", "alpha", "beta"].iter().map(|s| s.to_string()).collect();
    // rows/cols follow `labels`: sim(a,b)=0.97, sim(b,c)=0.96, sim(a,c)=0.5
    let sim = vec![vec![1.0, 0.5, 0.96], vec![0.5, 1.0, 0.97], vec![0.96, 0.97, 1.0]];
    let m = merge_by_similarity(&labels, &sim, 0.95).unwrap();
    assert_eq!(m.n_canonical(), union_find_components(&sim, 0.95));
    assert_eq!(m.n_canonical(), 1);
    assert_eq!(m.canonical, vec!["alpha".to_string()]);
    assert_eq!(m.groups[0].members.len(), 3);
    let m = merge_by_similarity(&labels, &sim, 0.965).unwrap();
    assert_eq!(m.n_canonical(), union_find_components(&sim, 0.965));
    assert_eq!(m.n_canonical(), 2);
}

#[test]
fn transitive_closure_through_embeddings() {
    // realizable unit vectors with sim(a,b)=0.97, sim(b,c)=0.96, sim(a,c)=0.9
    let (ab, bc, ac) = (0.97f64, 0.96f64, 0.9f64);
    let a = [1.0, 0.0, 0.0];
    let b = [ab, (1.0 - ab * ab).sqrt(), 0.0];
    let c2 = (bc - b[0] * ac) / b[1];
    let c = [ac, c2, (1.0 - ac * ac - c2 * c2).sqrt()];
    let mut t = BTreeMap::new();
    for (name, v) in [("alpha", a), ("beta", b), ("gamma", c)] {
        t.insert(name.to_string(), v.iter().map(|x| *x as f32).collect());
    }
    let e = TableEmbedder::from_map(t).unwrap();
    let labels: Vec<String> = ["alpha", "beta", "gamma"].iter().map(|s| s.to_string()).collect();
    let m = merge_labels(&labels, &e, 0.95).unwrap();
    assert_eq!(m.n_canonical(), 1);
    assert_eq!(m.canonical, vec!["alpha".to_string()]);
}

#[test]
fn multi_hot_targets_follow_merge_map() {
    let e = HashedNgramEmbedder::new(32, 1);
    let raw: Vec<String> = ["Nevus", "nevus", "Melanoma", "dermatofibroma"].iter().map(|s| s.to_string()).collect();
    let m = merge_labels(&raw, &e, 0.95).unwrap();
    assert_eq!(m.n_canonical(), 3);
    let (y, n) = labels_to_targets(&["Melanoma", "dermatofibroma"], &m, 3).unwrap();
    let mut expect = vec![0.0; 3];
    expect[m.index_of("melanoma").unwrap()] = 1.0;
    expect[m.index_of("dermatofibroma").unwrap()] = 1.0;
    assert_eq!(y, expect);
    assert_eq!(y.iter().sum::<f32>(), 2.0);
    assert_eq!(n, vec![1.0; 3]);
}

proptest! {
    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize_label(&s);
        prop_assert_eq!(normalize_label(&once), once);
    }

    #[test]
    fn merge_is_a_partition_and_monotone(
        vecs in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 4), 2..8),
        t_hi in 0.5f64..1.0,
        drop in 0.0f64..0.5,
    ) {
        let mut table = BTreeMap::new();
        let mut labels = Vec::new();
        for (i, v) in vecs.iter().enumerate() {
            let mut v = v.clone();
            v[0] += 1.5; // keep away from the zero vector
            table.insert(format!("l{i}"), v);
            labels.push(format!("l{i}"));
        }
        let e = TableEmbedder::from_map(table).unwrap();
        let hi = merge_labels(&labels, &e, t_hi).unwrap();
        let lo = merge_labels(&labels, &e, (t_hi - drop).max(0.01)).unwrap();
        prop_assert!(lo.n_canonical() <= hi.n_canonical());
        for m in [&hi, &lo] {
            prop_assert_eq!(m.map.len(), labels.len());
            let mut hit = vec![false; m.n_canonical()];
            for &i in m.map.values() {
                hit[i] = true;
            }
            prop_assert!(hit.iter().all(|h| *h));
            let member_total: usize = m.groups.iter().map(|g| g.members.len()).sum();
            prop_assert_eq!(member_total, labels.len());
        }
    }
}
