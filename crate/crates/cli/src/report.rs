use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hpl_core::metrics::{paired_t_test, ReportSet, SubgroupEntry};
use hpl_core::{Error, MetricReport, Result};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::runinfo::{read_json, write_json};

/// Headline metric per task group, in column order.
pub const TASK_COLUMNS: [&str; 6] = [
    "retrieval.macro_f1",
    "retrieval.macro_auroc",
    "linear.macro_f1",
    "linear.macro_auroc",
    "seg.dice",
    "caption.bleu1",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: PathBuf,
    pub label: String,
    pub metrics: ReportSet,
    /// Paired t-test p-value of each metric against the first row.
    pub p_values: BTreeMap<String, f64>,
    pub subgroups: BTreeMap<String, BTreeMap<String, SubgroupEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub metric_names: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Run directories to include: `dir` itself when it holds `metrics.json`,
/// otherwise its immediate subdirectories that do.
fn expand(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("metrics.json").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.json").is_file())
        .collect();
    subs.sort();
    if subs.is_empty() {
        return Err(Error::Data(format!("{} contains no metrics.json", dir.display())));
    }
    Ok(subs)
}

fn label_of(dir: &Path) -> String {
    read_json::<String>(&dir.join("ablation_row.json"))
        .unwrap_or_else(|_| dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
}

pub fn build_report(run_dirs: &[PathBuf]) -> Result<ReportTable> {
    let missing: Vec<String> = run_dirs.iter().filter(|d| !d.is_dir()).map(|d| d.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing run directories: {}", missing.join(", "))));
    }
    let mut dirs = Vec::new();
    for d in run_dirs {
        dirs.extend(expand(d)?);
    }
    let mut rows = Vec::with_capacity(dirs.len());
    for d in dirs {
        let metrics: ReportSet = read_json(&d.join("metrics.json"))?;
        let mut subgroups = BTreeMap::new();
        for prefix in ["retrieval", "linear"] {
            let p = d.join(format!("{prefix}_subgroups.json"));
            if p.is_file() {
                subgroups.insert(prefix.to_string(), read_json(&p)?);
            }
        }
        rows.push(ReportRow {
            label: label_of(&d),
            run: d,
            metrics,
            p_values: BTreeMap::new(),
            subgroups,
        });
    }
    let names: BTreeSet<String> = rows.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
    let base = rows[0].metrics.clone();
    for row in &mut rows {
        for (k, m) in &row.metrics {
            if let Some(b) = base.get(k) {
                if let Ok(t) = paired_t_test(&b.replicates, &m.replicates) {
                    row.p_values.insert(k.clone(), t.p_value);
                }
            }
        }
    }
    Ok(ReportTable {
        metric_names: names.into_iter().collect(),
        rows,
    })
}

fn cell(m: Option<&MetricReport>) -> String {
    match m {
        Some(m) => format!("{:.4} [{:.4}, {:.4}]", m.point, m.ci_low, m.ci_high),
        None => "–".to_string(),
    }
}

impl ReportTable {
    /// One row per run with the six task-group columns.
    pub fn summary_markdown(&self) -> String {
        let mut s = String::from("| run |");
        for c in TASK_COLUMNS {
            write!(s, " {c} |").unwrap();
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(TASK_COLUMNS.len()));
        s.push('\n');
        for r in &self.rows {
            write!(s, "| {} |", r.label).unwrap();
            for c in TASK_COLUMNS {
                write!(s, " {} |", cell(r.metrics.get(c))).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Every metric with its interval and the p-value against the first run.
    pub fn detail_markdown(&self) -> String {
        let mut s = String::from("| run | metric | point | CI | p vs first |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            for k in &self.metric_names {
                if let Some(m) = r.metrics.get(k) {
                    let p = r.p_values.get(k).map(|p| format!("{p:.4}")).unwrap_or_else(|| "n/a".into());
                    writeln!(s, "| {} | {k} | {:.4} | [{:.4}, {:.4}] | {p} |", r.label, m.point, m.ci_low, m.ci_high)
                        .unwrap();
                }
            }
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("run,label,metric,point,boot_mean,boot_var,ci_low,ci_high,p_vs_first\n");
        for r in &self.rows {
            for (k, m) in &r.metrics {
                let p = r.p_values.get(k).map(|p| format!("{p:?}")).unwrap_or_default();
                writeln!(
                    s,
                    "{},{},{k},{:?},{:?},{:?},{:?},{:?},{p}",
                    r.run.display(),
                    r.label,
                    m.point,
                    m.boot_mean,
                    m.boot_var,
                    m.ci_low,
                    m.ci_high
                )
                .unwrap();
            }
        }
        s
    }
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Data(format!("plot rendering failed: {e}"))
}

/// Bar chart of `(label, value, low, high)` with interval whiskers.
fn bar_plot(path: &Path, title: &str, bars: &[(String, f64, f64, f64)]) -> Result<()> {
    let root = SVGBackend::new(path, (160 + 120 * bars.len() as u32, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let top = bars.iter().map(|b| b.3).fold(1e-9, f64::max).max(1.0);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 16))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..bars.len() as f64, 0f64..top * 1.05)
        .map_err(plot_err)?;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(bars.len().max(1))
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 {
                labels.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, b)| {
            Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, b.1)], BLUE.mix(0.6).filled())
        }))
        .map_err(plot_err)?;
    chart
        .draw_series(
            bars.iter()
                .enumerate()
                .map(|(i, b)| PathElement::new(vec![(i as f64 + 0.5, b.2), (i as f64 + 0.5, b.3)], BLACK.stroke_width(2))),
        )
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Writes `report.md`, `report.csv`, `report.json` and SVG bar plots (one
/// per metric and one per run's subgroup breakdown) under `out`.
pub fn write_report(table: &ReportTable, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out.join("plots")).map_err(|e| Error::io(out, e))?;
    let md = format!(
        "# Summary\n\n{}\n# All metrics\n\n{}",
        table.summary_markdown(),
        table.detail_markdown()
    );
    std::fs::write(out.join("report.md"), md).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("report.csv"), table.csv()).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("report.json"), table)?;
    for k in &table.metric_names {
        let bars: Vec<_> = table
            .rows
            .iter()
            .filter_map(|r| r.metrics.get(k).map(|m| (r.label.clone(), m.point, m.ci_low, m.ci_high)))
            .collect();
        bar_plot(&out.join("plots").join(format!("{k}.svg")), k, &bars)?;
    }
    for (i, r) in table.rows.iter().enumerate() {
        for (prefix, groups) in &r.subgroups {
            let bars: Vec<_> = groups
                .iter()
                .map(|(g, e)| (g.clone(), e.report.point, e.report.ci_low, e.report.ci_high))
                .collect();
            let name = format!("subgroups_{prefix}_{i}.svg");
            bar_plot(&out.join("plots").join(name), &format!("{} {prefix} macro-F1 by subgroup", r.label), &bars)?;
        }
    }
    Ok(())
}
