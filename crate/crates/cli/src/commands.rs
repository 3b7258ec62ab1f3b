use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hpl_core::data::{load_manifest, save_manifest, Corpus};
use hpl_core::downstream::{
    caption_predictions, caption_train, evaluate_seg, extract_sample_features, knn_classify, pretrain_decoder,
    probe_predict, read_caption_dump, read_seg_dump, seg_targets, train_linear_probe, train_seg, write_caption_dump,
    write_seg_dump, ClassificationDump, Vocab,
};
use hpl_core::fedsim::{run_federated, ClientState};
use hpl_core::metrics::{
    caption_reports, classification_reports, macro_f1, segmentation_reports, subgroup_report, ReportSet,
};
use hpl_core::nn::Params;
use hpl_core::pretrain::{ablation_config, load_pretrained, train, AblationRow, TrainOptions};
use hpl_core::rng::component_rng;
use hpl_core::{Error, ExperimentConfig, FeatureSet, Result, Vit};

use crate::report::{build_report, write_report};
use crate::runinfo::{hash_json, hash_path, read_json, versions, write_json, RunManifest};
use crate::{Cli, Command};

/// Resolved state of one command invocation.
pub struct Ctx {
    pub command: String,
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub inputs: BTreeMap<String, String>,
}

impl Ctx {
    pub fn new(cli: &Cli) -> Result<Self> {
        let c = &cli.common;
        let cfg = ExperimentConfig::load(c.config.as_deref(), c.seed, &c.overrides)?;
        let command = cli.command.name().to_string();
        let out = c.output.clone().unwrap_or_else(|| PathBuf::from("hpl-out").join(&command));
        Ok(Ctx {
            command,
            cfg,
            out,
            data: c.data.clone(),
            config_path: c.config.clone(),
            overrides: c.overrides.clone(),
            inputs: BTreeMap::new(),
        })
    }

    fn child(&self, command: &str, out: PathBuf, cfg: ExperimentConfig) -> Ctx {
        Ctx {
            command: command.to_string(),
            cfg,
            out,
            data: self.data.clone(),
            config_path: self.config_path.clone(),
            overrides: self.overrides.clone(),
            inputs: BTreeMap::new(),
        }
    }

    fn create_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    /// Loads `<data>/<kind>/manifest.json`, or generates the corpus from
    /// the config when no data root is set.
    fn corpus(&mut self, kind: &str, generate: impl FnOnce(&ExperimentConfig) -> Result<Corpus>) -> Result<Corpus> {
        match &self.data {
            Some(root) => {
                let dir = root.join(kind);
                let c = load_manifest(&dir.join("manifest.json"))?;
                self.inputs.insert(format!("data/{kind}"), hash_path(&dir)?);
                Ok(c)
            }
            None => {
                let c = generate(&self.cfg)?;
                self.inputs.insert(format!("data/{kind}"), format!("generated:{}", hash_json(&self.cfg.data)?));
                Ok(c)
            }
        }
    }

    fn backbone(&mut self, checkpoint: Option<&Path>) -> Result<Vit> {
        match checkpoint {
            Some(p) => {
                let dir = if p.join("checkpoint").is_dir() { p.join("checkpoint") } else { p.to_path_buf() };
                let (_, vit) = load_pretrained(&dir, self.cfg.pretrain.eval_backbone)?;
                self.inputs.insert("checkpoint".into(), hash_path(&dir)?);
                Ok(vit)
            }
            None => {
                self.inputs.insert("checkpoint".into(), "random-init".into());
                Vit::new(self.cfg.pretrain.model.clone(), &mut component_rng(self.cfg.seed, "student-init"))
            }
        }
    }

    fn write_manifest(&self) -> Result<()> {
        let m = RunManifest {
            command: self.command.clone(),
            seed: self.cfg.seed,
            config_path: self.config_path.clone(),
            overrides: self.overrides.clone(),
            config: self.cfg.clone(),
            config_hash: hash_json(&self.cfg)?,
            inputs: self.inputs.clone(),
            versions: versions(),
        };
        write_json(&self.out.join("run_manifest.json"), &m)
    }

    /// Adds `reports` to `metrics.json` in the output directory.
    fn merge_metrics(&self, reports: ReportSet) -> Result<()> {
        let path = self.out.join("metrics.json");
        let mut all: ReportSet = if path.exists() { read_json(&path)? } else { ReportSet::new() };
        all.extend(reports);
        write_json(&path, &all)
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::Report { run_dirs } = &cli.command {
        let out = cli.common.output.clone().unwrap_or_else(|| PathBuf::from("hpl-out/report"));
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let table = build_report(run_dirs)?;
        return write_report(&table, &out);
    }
    let mut ctx = Ctx::new(cli)?;
    ctx.create_out()?;
    match &cli.command {
        Command::GenData => gen_data(&mut ctx)?,
        Command::Pretrain => pretrain(&mut ctx)?,
        Command::EvalRetrieval(b) => {
            let vit = ctx.backbone(b.checkpoint.as_deref())?;
            eval_retrieval(&mut ctx, &vit)?
        }
        Command::EvalLinear(b) => {
            let vit = ctx.backbone(b.checkpoint.as_deref())?;
            eval_linear(&mut ctx, &vit)?
        }
        Command::EvalSeg(b) => {
            let vit = ctx.backbone(b.checkpoint.as_deref())?;
            eval_seg(&mut ctx, &vit)?
        }
        Command::EvalCaption(b) => {
            let vit = ctx.backbone(b.checkpoint.as_deref())?;
            eval_caption(&mut ctx, &vit)?
        }
        Command::Fedsim(b) => {
            let vit = ctx.backbone(b.checkpoint.as_deref())?;
            fedsim(&mut ctx, &vit)?
        }
        Command::Ablate { toggle, evals } => ablate(&mut ctx, toggle, evals)?,
        Command::Report { .. } => unreachable!("handled above"),
    }
    ctx.write_manifest()
}

fn config_check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn gen_data(ctx: &mut Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut corpora = vec![
        ("classification".to_string(), cfg.classification_corpus()?),
        ("segmentation".to_string(), cfg.segmentation_corpus()?),
        ("caption".to_string(), cfg.caption_corpus()?),
    ];
    for (i, c) in cfg.federated_corpora()?.into_iter().enumerate() {
        corpora.push((format!("fed/client-{i}"), c));
    }
    for (kind, c) in &corpora {
        save_manifest(c, &ctx.out.join(kind).join("manifest.json"))?;
    }
    Ok(())
}

fn pretrain(ctx: &mut Ctx) -> Result<()> {
    let corpus = ctx.corpus("classification", |c| c.classification_corpus())?;
    let samples = corpus.classification()?;
    let train_set: Vec<_> = corpus.split_indices("train")?.into_iter().map(|i| samples[i].clone()).collect();
    let out = train(
        &train_set,
        &corpus.manifest.label_names,
        &ctx.cfg.pretrain,
        TrainOptions {
            output_dir: Some(ctx.out.clone()),
            ..Default::default()
        },
    )?;
    let last = out.log.last().ok_or_else(|| Error::Numerical("training produced no steps".into()))?;
    write_json(&ctx.out.join("summary.json"), last)
}

fn split_features(vit: &Vit, corpus: &Corpus) -> Result<(FeatureSet, FeatureSet)> {
    let s = corpus.classification()?;
    Ok((
        extract_sample_features(vit, s, &corpus.split_indices("train")?)?,
        extract_sample_features(vit, s, &corpus.split_indices("test")?)?,
    ))
}

/// Writes the dump, reads it back and derives every report from the file.
fn classification_outputs(ctx: &Ctx, prefix: &str, dump: ClassificationDump, test: &FeatureSet) -> Result<()> {
    let path = ctx.out.join(format!("{prefix}_predictions.csv"));
    dump.write_csv(&path)?;
    let dump = ClassificationDump::read_csv(&path)?;
    ctx.merge_metrics(classification_reports(prefix, &dump, &ctx.cfg.bootstrap)?)?;
    if let Some(groups) = &test.subgroups {
        let c = dump.class_names.len();
        let (y, p) = (&dump.truth, &dump.predicted);
        let sub = subgroup_report(
            "macro_f1",
            groups,
            |idx| {
                let yy: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
                let pp: Vec<usize> = idx.iter().map(|&i| p[i]).collect();
                macro_f1(&yy, &pp, c).unwrap_or(f64::NAN)
            },
            &ctx.cfg.bootstrap,
        )?;
        write_json(&ctx.out.join(format!("{prefix}_subgroups.json")), &sub)?;
    }
    Ok(())
}

fn labels_of(fs: &FeatureSet) -> Result<&[usize]> {
    fs.labels.as_deref().ok_or_else(|| Error::Data("features carry no labels".into()))
}

fn eval_retrieval(ctx: &mut Ctx, vit: &Vit) -> Result<()> {
    let corpus = ctx.corpus("classification", |c| c.classification_corpus())?;
    let (train_fs, test_fs) = split_features(vit, &corpus)?;
    let names = corpus.manifest.label_names.clone();
    let (pred, scores) = knn_classify(&test_fs, &train_fs, ctx.cfg.knn_k, names.len())?;
    let dump = ClassificationDump {
        class_names: names,
        sample_ids: test_fs.ids.clone(),
        truth: labels_of(&test_fs)?.to_vec(),
        predicted: pred,
        scores,
    };
    classification_outputs(ctx, "retrieval", dump, &test_fs)
}

fn eval_linear(ctx: &mut Ctx, vit: &Vit) -> Result<()> {
    let corpus = ctx.corpus("classification", |c| c.classification_corpus())?;
    let (train_fs, test_fs) = split_features(vit, &corpus)?;
    let names = corpus.manifest.label_names.clone();
    let (head, loss) = train_linear_probe(&train_fs, names.len(), &ctx.cfg.probe)?;
    write_json(&ctx.out.join("linear_train_loss.json"), &loss)?;
    let (pred, scores) = probe_predict(&head, &test_fs);
    let dump = ClassificationDump {
        class_names: names,
        sample_ids: test_fs.ids.clone(),
        truth: labels_of(&test_fs)?.to_vec(),
        predicted: pred,
        scores,
    };
    classification_outputs(ctx, "linear", dump, &test_fs)
}

fn eval_seg(ctx: &mut Ctx, vit: &Vit) -> Result<()> {
    let corpus = ctx.corpus("segmentation", |c| c.segmentation_corpus())?;
    let samples = corpus.segmentation()?;
    let (tr, te) = (corpus.split_indices("train")?, corpus.split_indices("test")?);
    let (head, loss) = train_seg(vit, samples, &tr, &ctx.cfg.seg)?;
    write_json(&ctx.out.join("seg_train_loss.json"), &loss)?;
    let (_, masks) = evaluate_seg(vit, &head, samples, &te)?;
    let ids: Vec<String> = te.iter().map(|&i| samples[i].sample_id.clone()).collect();
    let dir = ctx.out.join("seg_masks");
    write_seg_dump(&dir, &ids, &masks)?;
    let dumped = read_seg_dump(&dir)?;
    let chosen: Vec<_> = te.iter().map(|&i| &samples[i]).collect();
    let truth = seg_targets(&chosen, head.image_size());
    let preds: Vec<_> = dumped.into_iter().map(|(_, m)| m).collect();
    ctx.merge_metrics(segmentation_reports("seg", &preds, &truth, &ctx.cfg.bootstrap)?)
}

fn eval_caption(ctx: &mut Ctx, vit: &Vit) -> Result<()> {
    let corpus = ctx.corpus("caption", |c| c.caption_corpus())?;
    let samples = corpus.captions()?;
    let (tr, te) = (corpus.split_indices("train")?, corpus.split_indices("test")?);
    let vocab = Vocab::new(&corpus.manifest.label_names);
    let texts: Vec<Vec<String>> = tr.iter().map(|&i| samples[i].caption.clone()).collect();
    let (decoder, lm_loss) = pretrain_decoder(&texts, vocab, &ctx.cfg.decoder)?;
    let (model, loss) = caption_train(vit, samples, &tr, &decoder, &ctx.cfg.caption)?;
    write_json(&ctx.out.join("caption_train_loss.json"), &serde_json::json!({ "decoder_lm": lm_loss, "caption": loss }))?;
    let preds = caption_predictions(vit, &model, samples, &te, ctx.cfg.caption_max_len)?;
    let path = ctx.out.join("captions.tsv");
    write_caption_dump(&path, &preds)?;
    let preds = read_caption_dump(&path)?;
    ctx.merge_metrics(caption_reports("caption", &preds, &ctx.cfg.bootstrap)?)
}

fn fedsim(ctx: &mut Ctx, vit: &Vit) -> Result<()> {
    let corpora: Vec<Corpus> = match ctx.data.clone() {
        Some(_) => (0..ctx.cfg.data.fed_clients)
            .map(|i| ctx.corpus(&format!("fed/client-{i}"), |_| unreachable!("data root is set")))
            .collect::<Result<_>>()?,
        None => {
            let v = ctx.cfg.federated_corpora()?;
            ctx.inputs.insert("data/fed".into(), format!("generated:{}", hash_json(&ctx.cfg.data)?));
            v
        }
    };
    config_check(!corpora.is_empty(), || "no federated clients configured".into())?;
    let mut clients = Vec::new();
    let mut tests = Vec::new();
    for (i, c) in corpora.iter().enumerate() {
        let (tr, te) = split_features(vit, c)?;
        clients.push(ClientState::new(&format!("client-{i}"), tr, c.manifest.label_names.len(), ctx.cfg.seed)?);
        tests.push(te);
    }
    let out = run_federated(&mut clients, &tests, &ctx.cfg.federated, &ctx.cfg.bootstrap)?;
    out.write_round_log(&ctx.out.join("round_log.jsonl"))?;
    write_json(&ctx.out.join("fed_head.json"), &out.head.snapshot())?;
    let mut reports = ReportSet::new();
    for (client, ev) in out.final_metrics() {
        reports.insert(format!("fed.{client}.auroc"), ev.auroc.clone());
        reports.insert(format!("fed.{client}.macro_f1"), ev.f1.clone());
    }
    ctx.merge_metrics(reports)
}

fn ablation_rows(toggle: &[String]) -> Result<Vec<AblationRow>> {
    for t in toggle {
        config_check(["patch", "koleo", "sup"].contains(&t.as_str()), || {
            format!("unknown loss toggle `{t}` (expected patch, koleo or sup)")
        })?;
    }
    let on = |s: &str| toggle.iter().any(|t| t == s);
    Ok(AblationRow::ALL
        .into_iter()
        .filter(|r| {
            let w = r.weights(&hpl_core::heads_losses::LossWeights::default());
            (w.w_patch > 0.0 || on("patch")) && (w.w_koleo > 0.0 || on("koleo")) && (w.w_sup > 0.0 || on("sup"))
        })
        .collect())
}

fn row_slug(r: AblationRow) -> String {
    r.name().to_lowercase().replace('+', "-")
}

fn ablate(ctx: &mut Ctx, toggle: &[String], evals: &[String]) -> Result<()> {
    for e in evals {
        config_check(["retrieval", "linear", "seg", "caption"].contains(&e.as_str()), || {
            format!("unknown evaluation `{e}`")
        })?;
    }
    let rows = ablation_rows(toggle)?;
    let runs: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = rows
            .iter()
            .map(|&row| {
                let mut cfg = ctx.cfg.clone();
                cfg.pretrain = ablation_config(&cfg.pretrain, row);
                let mut child = ctx.child("ablate-row", ctx.out.join(row_slug(row)), cfg);
                s.spawn(move || -> Result<()> {
                    child.create_out()?;
                    pretrain(&mut child)?;
                    let vit = child.backbone(Some(&child.out.join("checkpoint")))?;
                    for e in evals {
                        match e.as_str() {
                            "retrieval" => eval_retrieval(&mut child, &vit)?,
                            "linear" => eval_linear(&mut child, &vit)?,
                            "seg" => eval_seg(&mut child, &vit)?,
                            _ => eval_caption(&mut child, &vit)?,
                        }
                    }
                    write_json(&child.out.join("ablation_row.json"), &row.name())?;
                    child.write_manifest()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation thread panicked")).collect()
    });
    runs.into_iter().collect::<Result<Vec<()>>>()?;
    let dirs: Vec<PathBuf> = rows.iter().map(|&r| ctx.out.join(row_slug(r))).collect();
    let table = build_report(&dirs)?;
    write_report(&table, &ctx.out.join("report"))
}
