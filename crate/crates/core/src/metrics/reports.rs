use std::collections::BTreeMap;

use ndarray::Axis;

use super::{bootstrap_ci, cider, corpus_bleu, dice_jac, macro_auroc, macro_f1, rouge_l, BootstrapOptions, MetricReport};
use crate::downstream::{CaptionPrediction, ClassificationDump};
use crate::error::{ensure, Result};
use crate::image::Mask;

/// Named metric reports of one evaluation, keyed `<prefix>.<metric>`.
pub type ReportSet = BTreeMap<String, MetricReport>;

/// Bootstrapped macro-F1, macro-AUROC and accuracy of a prediction dump.
pub fn classification_reports(prefix: &str, dump: &ClassificationDump, opts: &BootstrapOptions) -> Result<ReportSet> {
    dump.validate()?;
    let c = dump.class_names.len();
    let (y, p, s) = (&dump.truth, &dump.predicted, &dump.scores);
    let pick = |idx: &[usize], v: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let n = y.len();
    let mut out = ReportSet::new();
    let f1 = bootstrap_ci("macro_f1", n, |idx| macro_f1(&pick(idx, y), &pick(idx, p), c).unwrap_or(f64::NAN), opts)?;
    out.insert(format!("{prefix}.macro_f1"), f1);
    let auroc = bootstrap_ci(
        "macro_auroc",
        n,
        |idx| macro_auroc(&pick(idx, y), &s.select(Axis(0), idx)).unwrap_or(f64::NAN),
        opts,
    )?;
    out.insert(format!("{prefix}.macro_auroc"), auroc);
    let acc = bootstrap_ci(
        "accuracy",
        n,
        |idx| idx.iter().filter(|&&i| y[i] == p[i]).count() as f64 / idx.len() as f64,
        opts,
    )?;
    out.insert(format!("{prefix}.accuracy"), acc);
    Ok(out)
}

/// Per-sample foreground DICE and Jaccard, bootstrapped over samples.
pub fn segmentation_reports(prefix: &str, preds: &[Mask], truth: &[Mask], opts: &BootstrapOptions) -> Result<ReportSet> {
    ensure!(preds.len() == truth.len(), Shape, "{} predictions for {} masks", preds.len(), truth.len());
    let scores: Vec<(f64, f64)> = preds.iter().zip(truth).map(|(p, t)| dice_jac(p, t)).collect::<Result<_>>()?;
    let mean = |idx: &[usize], f: fn(&(f64, f64)) -> f64| idx.iter().map(|&i| f(&scores[i])).sum::<f64>() / idx.len() as f64;
    let mut out = ReportSet::new();
    out.insert(format!("{prefix}.dice"), bootstrap_ci("dice", scores.len(), |idx| mean(idx, |s| s.0), opts)?);
    out.insert(format!("{prefix}.jaccard"), bootstrap_ci("jaccard", scores.len(), |idx| mean(idx, |s| s.1), opts)?);
    Ok(out)
}

/// Corpus BLEU-1/4, mean ROUGE-L F and CIDEr over caption predictions.
pub fn caption_reports(prefix: &str, preds: &[CaptionPrediction], opts: &BootstrapOptions) -> Result<ReportSet> {
    let hyps: Vec<Vec<String>> = preds.iter().map(|p| p.hypothesis.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = preds.iter().map(|p| vec![p.reference.clone()]).collect();
    let sub = |idx: &[usize]| -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
        (idx.iter().map(|&i| hyps[i].clone()).collect(), idx.iter().map(|&i| refs[i].clone()).collect())
    };
    let n = preds.len();
    let mut out = ReportSet::new();
    for k in [1usize, 4] {
        let r = bootstrap_ci(
            &format!("bleu{k}"),
            n,
            |idx| {
                let (h, r) = sub(idx);
                corpus_bleu(&h, &r, k)
            },
            opts,
        )?;
        out.insert(format!("{prefix}.bleu{k}"), r);
    }
    let rl: Vec<f64> = hyps.iter().zip(&refs).map(|(h, r)| rouge_l(h, r).f1).collect();
    out.insert(
        format!("{prefix}.rouge_l"),
        bootstrap_ci("rouge_l", n, |idx| idx.iter().map(|&i| rl[i]).sum::<f64>() / idx.len() as f64, opts)?,
    );
    out.insert(
        format!("{prefix}.cider"),
        bootstrap_ci(
            "cider",
            n,
            |idx| {
                let (h, r) = sub(idx);
                cider(&h, &r).0
            },
            opts,
        )?,
    );
    Ok(out)
}
