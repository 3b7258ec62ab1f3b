use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hpl_core::backbone::Vit;
use hpl_core::data::generate_classification_corpus;
use hpl_core::downstream::{encode_images, knn_classify, FeatureSet};
use hpl_core::heads_losses::sinkhorn_knopp;
use hpl_core::metrics::{bootstrap_ci, macro_auroc, BootstrapOptions};
use hpl_core::pretrain::{train_step, PretrainConfig, StudentModel};
use hpl_core::rng::component_rng;
use hpl_core::Image;
use ndarray::Array2;
use rand::Rng;

fn random_features(n: usize, d: usize, classes: usize, seed: u64) -> FeatureSet {
    let mut rng = component_rng(seed, "bench-features");
    FeatureSet {
        ids: (0..n).map(|i| format!("s{i}")).collect(),
        x: Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)),
        labels: Some((0..n).map(|i| i % classes).collect()),
        subgroups: None,
    }
}

fn bench_sinkhorn(c: &mut Criterion) {
    let mut rng = component_rng(0, "bench-sinkhorn");
    let logits = Array2::from_shape_fn((64, 1024), |_| rng.random_range(-1.0..1.0));
    c.bench_function("sinkhorn_64x1024_3it", |b| b.iter(|| sinkhorn_knopp(black_box(&logits), 0.04, 3).unwrap()));
}

fn bench_knn(c: &mut Criterion) {
    let gallery = random_features(600, 64, 3, 1);
    let queries = random_features(600, 64, 3, 2);
    c.bench_function("knn_600x600_d64", |b| b.iter(|| knn_classify(black_box(&queries), &gallery, 5, 3).unwrap()));
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = component_rng(3, "bench-metrics");
    let labels: Vec<usize> = (0..600).map(|i| i % 3).collect();
    let scores = Array2::from_shape_fn((600, 3), |_| rng.random::<f64>());
    c.bench_function("macro_auroc_600x3", |b| b.iter(|| macro_auroc(black_box(&labels), &scores).unwrap()));
    let opts = BootstrapOptions {
        n_replicates: 200,
        ..Default::default()
    };
    c.bench_function("bootstrap_auroc_200rep", |b| {
        b.iter(|| {
            bootstrap_ci(
                "auroc",
                labels.len(),
                |idx| {
                    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                    macro_auroc(&y, &scores.select(ndarray::Axis(0), idx)).unwrap_or(f64::NAN)
                },
                &opts,
            )
            .unwrap()
        })
    });
}

fn bench_backbone(c: &mut Criterion) {
    let cfg = PretrainConfig::default();
    let vit = Vit::new(cfg.model.clone(), &mut component_rng(0, "bench-vit")).unwrap();
    let imgs: Vec<Image> = (0..32).map(|i| Image::from_fn(64, 64, |y, x| [((x + i) % 7) as f32 / 7.0, (y % 5) as f32 / 5.0, 0.5])).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    c.bench_function("vit_encode_32x64px", |b| b.iter(|| encode_images(&vit, black_box(&refs)).unwrap()));
}

fn bench_train_step(c: &mut Criterion) {
    let corpus = generate_classification_corpus(6, 3, 64, 0.5, 0).unwrap();
    let samples = corpus.classification().unwrap();
    let batch: Vec<_> = samples.iter().take(16).collect();
    let mut cfg = PretrainConfig::default();
    cfg.train.batch_size = 16;
    let student = StudentModel::new(&cfg, &corpus.manifest.label_names).unwrap();
    let teacher = student.teacher();
    let mut group = c.benchmark_group("pretrain");
    group.sample_size(10);
    group.bench_function("train_step_b16", |b| {
        b.iter(|| {
            let mut rng = component_rng(0, "bench-step");
            train_step(&student, &teacher, &batch, &corpus.manifest.label_names, &cfg, 0.04, &mut rng).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_sinkhorn, bench_knn, bench_metrics, bench_backbone, bench_train_step);
criterion_main!(benches);
