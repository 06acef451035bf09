//! Tables, statistical comparison and figures computed from the files a run
//! persisted. Re-running on the same run directory rewrites identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lesionfuse_core::evaluation::{
    aggregate_folds, AggregateRow, AggregateTable, FoldSummary, MeanStd, MetricsReport, METRIC_NAMES,
};
use lesionfuse_core::stats::{compare_models, ComparisonReport, ScoreMatrix};
use serde::{Deserialize, Serialize};

use crate::io::{read_json, write_atomic, write_json};
use crate::plots;
use crate::runner::{read_predictions, Cell, CellStatus, RunIndex, METRICS_FILE, PREDICTIONS_FILE, RUN_INDEX};

pub const REPORT_DIR: &str = "report";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub table_markdown: PathBuf,
    pub table_csv: PathBuf,
    pub scores_csv: Option<PathBuf>,
    pub comparison: Option<PathBuf>,
    pub plots: Vec<PathBuf>,
}

/// Everything derived from a run's persisted reports.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub table: AggregateTable,
    pub scores: Option<ScoreMatrix>,
    pub comparison: Option<ComparisonReport>,
    pub failed: Vec<Cell>,
}

fn summarize(reports: &[MetricsReport]) -> Result<FoldSummary> {
    if reports.len() >= 2 {
        return Ok(aggregate_folds(reports)?);
    }
    let one = |v: f64| MeanStd::of(&[v]);
    let r = &reports[0];
    Ok(FoldSummary {
        n_folds: 1,
        acc: one(r.acc),
        bacc: one(r.bacc),
        precision_weighted: one(r.precision_weighted),
        recall_weighted: one(r.recall_weighted),
        f1_weighted: one(r.f1_weighted),
        auc: one(r.auc),
    })
}

/// Aggregates completed cells per treatment and, when there are at least two
/// treatments, compares them with blocks = (seed, fold).
pub fn summarize_run(run_dir: &Path, index: &RunIndex) -> Result<RunSummary> {
    let metric = index.config.stats.metric_index()?;
    let multi_cf = index.config.c_f.len() > 1;
    // Treatments in configuration order.
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<(&Cell, MetricsReport)>> = BTreeMap::new();
    let mut failed = Vec::new();
    for cell in &index.cells {
        if let CellStatus::Failed(_) = cell.status {
            failed.push(cell.clone());
            continue;
        }
        let report: MetricsReport = read_json(&run_dir.join(&cell.dir).join(METRICS_FILE))?;
        let t = cell.treatment();
        if !groups.contains_key(&t) {
            order.push(t.clone());
        }
        groups.entry(t).or_default().push((cell, report));
    }

    let mut table = AggregateTable::default();
    for t in &order {
        let cells = &groups[t];
        let first = cells[0].0;
        let reports: Vec<MetricsReport> = cells.iter().map(|(_, r)| r.clone()).collect();
        let model = if multi_cf {
            format!("{} (c_f = {})", first.backbone, first.c_f)
        } else {
            first.backbone.clone()
        };
        table.rows.push(AggregateRow {
            model,
            scenario: first.scenario.as_str().to_string(),
            summary: summarize(&reports)?,
        });
    }

    let (mut scores, mut comparison) = (None, None);
    if order.len() >= 2 {
        let mut blocks: Vec<String> = Vec::new();
        for (c, _) in groups.values().flatten() {
            if !blocks.contains(&c.block()) {
                blocks.push(c.block());
            }
        }
        blocks.sort_by_key(|b| index.cells.iter().position(|c| &c.block() == b));
        let complete: Vec<String> = blocks
            .into_iter()
            .filter(|b| order.iter().all(|t| groups[t].iter().any(|(c, _)| &c.block() == b)))
            .collect();
        if complete.len() >= 2 {
            let values = complete
                .iter()
                .map(|b| {
                    order
                        .iter()
                        .map(|t| {
                            let (_, r) = groups[t].iter().find(|(c, _)| &c.block() == b).expect("complete block");
                            r.metric_values()[metric]
                        })
                        .collect()
                })
                .collect();
            let m = ScoreMatrix::new(complete, order.clone(), values)?;
            comparison = Some(compare_models(&m, &index.config.stats.options())?);
            scores = Some(m);
        } else {
            log::warn!("fewer than two blocks completed for every treatment; skipping the comparison");
        }
    }
    Ok(RunSummary {
        table,
        scores,
        comparison,
        failed,
    })
}

pub fn scores_to_csv(m: &ScoreMatrix) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["block".to_string()];
    header.extend(m.treatments.iter().cloned());
    w.write_record(&header)?;
    for (b, row) in m.blocks.iter().zip(&m.values) {
        let mut rec = vec![b.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    Ok(w.into_inner()?)
}

pub fn comparison_markdown(c: &ComparisonReport, metric: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "## Comparison ({metric}, blocks = seed x fold)\n");
    let _ = writeln!(
        out,
        "Friedman: statistic {:.4}, df {}, p = {:.4}{} ({} at alpha = {})\n",
        c.friedman.statistic,
        c.friedman.df,
        c.friedman.p_value,
        c.friedman.p_exact.map(|p| format!(", exact p = {p:.4}")).unwrap_or_default(),
        if c.friedman_significant { "significant" } else { "not significant" },
        c.options.alpha_friedman,
    );
    match &c.pairwise {
        None => out.push_str("No pairwise tests: the omnibus test did not reject.\n"),
        Some(pairs) => {
            let adj = c.options.holm;
            let _ = writeln!(
                out,
                "| A | B | W | p |{} significant (alpha = {}) | better |",
                if adj { " Holm p |" } else { "" },
                c.options.alpha_wilcoxon
            );
            let _ = writeln!(out, "|---|---|---|---|{}---|---|", if adj { "---|" } else { "" });
            for p in pairs {
                let w = p.wilcoxon.as_ref().map(|w| format!("{}", w.statistic)).unwrap_or_else(|| "-".into());
                let h = p.p_adjusted.map(|v| format!(" {v:.4} |")).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "| {} | {} | {w} | {:.4} |{h} {} | {} |",
                    p.a,
                    p.b,
                    p.p_value,
                    if p.significant { "yes" } else { "no" },
                    p.better.as_deref().unwrap_or("-")
                );
            }
        }
    }
    out
}

/// Writes tables, the score matrix, the comparison and per-cell figures for
/// the run in `run_dir`.
pub fn emit_reports(run_dir: &Path) -> Result<ReportFiles> {
    let index: RunIndex = read_json(&run_dir.join(RUN_INDEX))?;
    let summary = summarize_run(run_dir, &index)?;
    if summary.table.rows.is_empty() {
        anyhow::bail!("no completed cells in {}", run_dir.display());
    }
    let out = run_dir.join(REPORT_DIR);
    let mut files = ReportFiles {
        table_markdown: out.join("aggregate.md"),
        table_csv: out.join("aggregate.csv"),
        ..Default::default()
    };

    let mut md = String::from("# Cross-validation results\n\n");
    if index.synthetic {
        md.push_str("> Synthetic data generated by `lesionfuse synth`; these are not clinical images.\n\n");
    }
    let _ = writeln!(
        md,
        "Mean ± standard deviation over {} folds x {} seed(s); columns {}.\n",
        index.config.folds,
        index.config.repeats,
        METRIC_NAMES.join(", ")
    );
    md.push_str(&summary.table.to_markdown());
    if !summary.failed.is_empty() {
        md.push_str("\n## Failed cells\n\n");
        for c in &summary.failed {
            if let CellStatus::Failed(msg) = &c.status {
                let _ = writeln!(md, "- `{}`: {}", c.dir.display(), msg.lines().next().unwrap_or(""));
            }
        }
    }
    if let (Some(scores), Some(cmp)) = (&summary.scores, &summary.comparison) {
        md.push('\n');
        md.push_str(&comparison_markdown(cmp, &index.config.stats.metric));
        let scores_path = out.join("scores.csv");
        write_atomic(&scores_path, &scores_to_csv(scores)?)?;
        let cmp_path = out.join("comparison.json");
        write_json(&cmp_path, cmp)?;
        files.scores_csv = Some(scores_path);
        files.comparison = Some(cmp_path);
    }
    write_atomic(&files.table_markdown, md.as_bytes())?;
    let mut csv_buf = Vec::new();
    summary.table.write_csv(&mut csv_buf)?;
    write_atomic(&files.table_csv, &csv_buf)?;

    for cell in index.cells.iter().filter(|c| c.status == CellStatus::Completed) {
        let dir = run_dir.join(&cell.dir);
        let report: MetricsReport = read_json(&dir.join(METRICS_FILE))?;
        let title = format!("{} {} c_f={} seed {} fold {}", cell.backbone, cell.scenario, cell.c_f, cell.seed, cell.fold);
        let cm_path = dir.join("confusion.svg");
        plots::confusion_heatmap(&cm_path, &report.confusion, &report.classes, &title)?;
        let roc_path = dir.join("roc.svg");
        plots::roc_plot(&roc_path, &report.roc, &title)?;
        let (labels, probs) =
            read_predictions(&dir.join(PREDICTIONS_FILE)).with_context(|| format!("cell {}", cell.dir.display()))?;
        let prob_path = dir.join("probabilities.svg");
        plots::probability_plot(&prob_path, &labels, &probs, &report.classes, &title)?;
        files.plots.extend([cm_path, roc_path, prob_path]);
    }
    Ok(files)
}
