use std::path::Path;
use std::process::Command;

use hpl_cli::{build_report, hash_path, read_json, ReportTable, RunManifest};
use hpl_core::metrics::ReportSet;

/// Overrides that shrink every corpus and training loop to seconds.
const TINY: [&str; 12] = [
    "data.n_per_class=8",
    "data.seg_samples=8",
    "data.caption_samples=8",
    "data.fed_per_class=8",
    "pretrain.train.epochs=1",
    "pretrain.train.batch_size=8",
    "pretrain.train.lr_reference_batch=8",
    "pretrain.crops.n_local=2",
    "bootstrap.n_replicates=20",
    "decoder.pretrain_epochs=1",
    "caption.epochs=1",
    "seg.epochs=2",
];

fn hpl(out: &Path, extra: &[&str]) -> i32 {
    let mut argv: Vec<String> = vec!["hpl".into(), "--seed".into(), "7".into(), "--output".into(), out.display().to_string()];
    for o in TINY {
        argv.push("--override".into());
        argv.push(o.into());
    }
    argv.extend(extra.iter().map(|s| s.to_string()));
    hpl_cli::run(argv)
}

fn hpl_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hpl"))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = hpl_bin().args(["--frobnicate", "pretrain"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_override_is_a_structured_config_error() {
    let d = tempfile::tempdir().unwrap();
    let out = hpl_bin()
        .args(["--output", d.path().to_str().unwrap(), "--override", "pretrain.bogus=1", "pretrain"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert_eq!(err["command"], "pretrain");
}

#[test]
fn pretrain_reruns_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    assert_eq!(hpl(&a, &["pretrain"]), 0);
    assert_eq!(hpl(&b, &["pretrain"]), 0);
    for f in ["checkpoint", "train_log.jsonl", "summary.json", "run_manifest.json"] {
        assert_eq!(hash_path(&a.join(f)).unwrap(), hash_path(&b.join(f)).unwrap(), "{f}");
    }
    let m: RunManifest = read_json(&a.join("run_manifest.json")).unwrap();
    assert_eq!(m.seed, 7);
    assert_eq!(m.config.pretrain.train.seed, 7);
    assert!(m.inputs["data/classification"].starts_with("generated:"));
}

#[test]
fn report_of_identical_runs_has_unit_p_values() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for dir in [&a, &b] {
        assert_eq!(hpl(dir, &["eval-retrieval"]), 0);
        assert_eq!(hpl(dir, &["eval-linear"]), 0);
    }
    let out = d.path().join("report");
    assert_eq!(hpl(&out, &["report", a.to_str().unwrap(), b.to_str().unwrap()]), 0);
    let table: ReportTable = read_json(&out.join("report.json")).unwrap();
    assert_eq!(table.rows.len(), 2);
    let second = &table.rows[1];
    assert!(!second.p_values.is_empty());
    for (k, p) in &second.p_values {
        assert!((p - 1.0).abs() < 1e-9, "{k}: p = {p}");
    }
    assert!(out.join("report.md").is_file());
    assert!(out.join("report.csv").is_file());
    assert!(out.join("plots").join("retrieval.macro_f1.svg").is_file());
    assert!(out.join("plots").join("subgroups_retrieval_0.svg").is_file());
}

#[test]
fn report_lists_missing_run_dirs() {
    let d = tempfile::tempdir().unwrap();
    let gone = d.path().join("nope");
    let err = build_report(std::slice::from_ref(&gone)).unwrap_err().to_string();
    assert!(err.contains(&gone.display().to_string()), "{err}");
    assert_eq!(hpl(&d.path().join("r"), &["report", gone.to_str().unwrap()]), 1);
}

#[test]
fn ablation_emits_one_run_per_loss_configuration() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("ablate");
    let code = hpl(&out, &["ablate", "--toggle", "sup,koleo", "--evals", "retrieval,linear,seg,caption"]);
    assert_eq!(code, 0);
    let mut labels = Vec::new();
    for slug in ["image-patch", "image-patch-reg", "image-patch-reg-kg"] {
        let dir = out.join(slug);
        labels.push(read_json::<String>(&dir.join("ablation_row.json")).unwrap());
        let m: ReportSet = read_json(&dir.join("metrics.json")).unwrap();
        for col in hpl_cli::TASK_COLUMNS {
            assert!(m.contains_key(col), "{slug} lacks {col}");
        }
    }
    assert_eq!(labels, ["Image+Patch", "Image+Patch+Reg", "Image+Patch+Reg+KG"]);
    assert!(!out.join("image").exists());
    let table: ReportTable = read_json(&out.join("report").join("report.json")).unwrap();
    assert_eq!(table.rows.len(), 3);
    let md = std::fs::read_to_string(out.join("report").join("report.md")).unwrap();
    for col in hpl_cli::TASK_COLUMNS {
        assert!(md.contains(col));
    }
}

#[test]
fn data_root_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    assert_eq!(hpl(&data, &["gen-data"]), 0);
    assert!(data.join("classification").join("manifest.json").is_file());
    assert!(data.join("fed").join("client-2").join("manifest.json").is_file());
    let run = d.path().join("eval");
    let mut cmd = hpl_bin();
    cmd.env("HPL_DATA_DIR", &data).args(["--seed", "7", "--output", run.to_str().unwrap()]);
    for o in TINY {
        cmd.args(["--override", o]);
    }
    let status = cmd.arg("eval-retrieval").status().unwrap();
    assert!(status.success());
    let m: RunManifest = read_json(&run.join("run_manifest.json")).unwrap();
    assert_eq!(m.inputs["data/classification"], hash_path(&data.join("classification")).unwrap());
    assert_eq!(m.inputs["checkpoint"], "random-init");
}

#[test]
fn fedsim_writes_one_log_line_per_round() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("fed");
    assert_eq!(hpl(&out, &["fedsim"]), 0);
    let log = std::fs::read_to_string(out.join("round_log.jsonl")).unwrap();
    let rounds: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rounds.len(), 2);
    assert_eq!(rounds[1]["clients"].as_array().unwrap().len(), 3);
    let m: ReportSet = read_json(&out.join("metrics.json")).unwrap();
    assert!(m.contains_key("fed.client-0.auroc"));
}
