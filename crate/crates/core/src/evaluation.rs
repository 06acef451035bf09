//! Classification metrics over class-probability outputs.
//!
//! Everything here works for any number of classes; the `*_6` style helpers
//! simply default to the six diagnosis labels.

use serde::{Deserialize, Serialize};

use crate::data::{Diagnosis, N_CLASSES};
use crate::error::{Error, Result};

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(n: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion_matrix_n(n_classes: usize, truth: &[usize], pred: &[usize]) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Metrics(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Metrics(format!("label {} outside 0..{n_classes}", t.max(p))));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize]) -> Result<ConfusionMatrix> {
    confusion_matrix_n(N_CLASSES, truth, pred)
}

/// Mean per-class recall over classes that have at least one true sample.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let recalls: Vec<f64> = (0..cm.n_classes())
        .filter(|&i| cm.row_sum(i) > 0)
        .map(|i| cm.counts[i][i] as f64 / cm.row_sum(i) as f64)
        .collect();
    if recalls.is_empty() {
        return Err(Error::Metrics("balanced accuracy of an empty confusion matrix".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Support-weighted precision, recall and F1. A class never predicted has
/// precision 0; a class with `P + R = 0` has F1 0.
pub fn weighted_prf(cm: &ConfusionMatrix) -> Result<(f64, f64, f64)> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Metrics("precision/recall of an empty confusion matrix".into()));
    }
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for i in 0..cm.n_classes() {
        let support = cm.row_sum(i);
        if support == 0 {
            continue;
        }
        let tp = cm.counts[i][i] as f64;
        let predicted = cm.col_sum(i);
        let prec = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let rec = tp / support as f64;
        let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        let w = support as f64 / total as f64;
        p += w * prec;
        r += w * rec;
        f += w * f1;
    }
    Ok((p, r, f))
}

/// Area under the ROC curve of `scores` for the positive set, using the rank
/// statistic (ties count one half). `None` if either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&b| b).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn check_probs(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::Metrics(format!("{} probability rows for {} labels", probs.len(), labels.len())));
    }
    if let Some(row) = probs.iter().find(|r| r.len() != n_classes) {
        return Err(Error::Metrics(format!("probability row of width {}, expected {n_classes}", row.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Metrics(format!("label {l} outside 0..{n_classes}")));
    }
    Ok(())
}

/// Per-class one-vs-rest AUCs (`None` for classes absent from `labels`).
pub fn auc_per_class(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<Vec<Option<f64>>> {
    check_probs(probs, labels, n_classes)?;
    Ok((0..n_classes)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            binary_auc(&scores, &pos)
        })
        .collect())
}

/// Macro one-vs-rest AUC; classes absent from `labels` are skipped with a warning.
pub fn auc_macro_ovr(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    let per = auc_per_class(probs, labels, n_classes)?;
    let mut present = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Metrics("AUC needs at least two classes present".into()));
    }
    let skipped: Vec<usize> = (0..n_classes).filter(|c| per[*c].is_none()).collect();
    if !skipped.is_empty() {
        log::warn!("AUC: skipping classes {skipped:?} with no true samples");
    }
    let vals: Vec<f64> = per.into_iter().flatten().collect();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct
/// score threshold.
pub fn roc_points(scores: &[f64], positive: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = positive.iter().filter(|&&b| b).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0
            } else {
                fp += 1.0
            }
            i += 1;
        }
        let fpr = if n_neg > 0.0 { fp / n_neg } else { 1.0 };
        let tpr = if n_pos > 0.0 { tp / n_pos } else { 1.0 };
        pts.push((fpr, tpr));
    }
    if pts.last() != Some(&(1.0, 1.0)) {
        pts.push((1.0, 1.0));
    }
    pts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: String,
    pub auc: Option<f64>,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub n_samples: usize,
    pub acc: f64,
    pub bacc: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    pub auc: f64,
    pub confusion: ConfusionMatrix,
    pub roc: Vec<RocCurve>,
    /// Mean predicted distribution per true class; `None` for absent classes.
    pub prob_dists: Vec<Option<Vec<f64>>>,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Full report over the six diagnosis labels.
pub fn evaluate(probs: &[Vec<f64>], labels: &[usize]) -> Result<MetricsReport> {
    let names: Vec<String> = Diagnosis::ALL.iter().map(|d| d.abbrev().to_string()).collect();
    evaluate_named(probs, labels, &names)
}

pub fn evaluate_named(probs: &[Vec<f64>], labels: &[usize], classes: &[String]) -> Result<MetricsReport> {
    let n = classes.len();
    check_probs(probs, labels, n)?;
    if labels.is_empty() {
        return Err(Error::Metrics("no samples to evaluate".into()));
    }
    let pred: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
    let cm = confusion_matrix_n(n, labels, &pred)?;
    let (p, r, f) = weighted_prf(&cm)?;
    let per_auc = auc_per_class(probs, labels, n)?;
    let roc = (0..n)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|row| row[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            RocCurve {
                class: classes[c].clone(),
                auc: per_auc[c],
                points: roc_points(&scores, &pos),
            }
        })
        .collect();
    let prob_dists = (0..n)
        .map(|c| {
            let rows: Vec<&Vec<f64>> = probs.iter().zip(labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            (!rows.is_empty()).then(|| {
                (0..n)
                    .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
                    .collect()
            })
        })
        .collect();
    Ok(MetricsReport {
        classes: classes.to_vec(),
        n_samples: labels.len(),
        acc: cm.trace() as f64 / cm.total() as f64,
        bacc: balanced_accuracy(&cm)?,
        precision_weighted: p,
        recall_weighted: r,
        f1_weighted: f,
        auc: auc_macro_ovr(probs, labels, n)?,
        confusion: cm,
        roc,
        prob_dists,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (`n - 1` denominator).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MeanStd { mean, std: var.sqrt() }
    }

    pub fn render(&self, digits: usize) -> String {
        format!("{:.*} ± {:.*}", digits, self.mean, digits, self.std)
    }
}

/// Names of the summary metrics, in table order.
pub const METRIC_NAMES: [&str; 6] = ["ACC", "BACC", "P", "R", "F1", "AUC"];

impl MetricsReport {
    pub fn metric_values(&self) -> [f64; 6] {
        [
            self.acc,
            self.bacc,
            self.precision_weighted,
            self.recall_weighted,
            self.f1_weighted,
            self.auc,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub n_folds: usize,
    pub acc: MeanStd,
    pub bacc: MeanStd,
    pub precision_weighted: MeanStd,
    pub recall_weighted: MeanStd,
    pub f1_weighted: MeanStd,
    pub auc: MeanStd,
}

impl FoldSummary {
    pub fn metrics(&self) -> [MeanStd; 6] {
        [
            self.acc,
            self.bacc,
            self.precision_weighted,
            self.recall_weighted,
            self.f1_weighted,
            self.auc,
        ]
    }
}

pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<FoldSummary> {
    if reports.len() < 2 {
        return Err(Error::Metrics(format!("need at least 2 fold reports, got {}", reports.len())));
    }
    if reports.iter().any(|r| r.classes != reports[0].classes) {
        return Err(Error::Metrics("fold reports use different class sets".into()));
    }
    let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(FoldSummary {
        n_folds: reports.len(),
        acc: col(|r| r.acc),
        bacc: col(|r| r.bacc),
        precision_weighted: col(|r| r.precision_weighted),
        recall_weighted: col(|r| r.recall_weighted),
        f1_weighted: col(|r| r.f1_weighted),
        auc: col(|r| r.auc),
    })
}

/// One row per (model, scenario) of fold-aggregated metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub rows: Vec<AggregateRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub scenario: String,
    pub summary: FoldSummary,
}

impl AggregateTable {
    pub fn to_markdown(&self) -> String {
        let mut out = format!("| Model | Scenario | {} |\n", METRIC_NAMES.join(" | "));
        out.push_str(&format!("|---|---|{}\n", "---|".repeat(METRIC_NAMES.len())));
        for r in &self.rows {
            let cells: Vec<String> = r.summary.metrics().iter().map(|m| m.render(3)).collect();
            out.push_str(&format!("| {} | {} | {} |\n", r.model, r.scenario, cells.join(" | ")));
        }
        out
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["model".to_string(), "scenario".to_string()];
        for m in METRIC_NAMES {
            header.push(format!("{}_mean", m.to_lowercase()));
            header.push(format!("{}_std", m.to_lowercase()));
        }
        wr.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.model.clone(), r.scenario.clone()];
            for m in r.summary.metrics() {
                rec.push(format!("{}", m.mean));
                rec.push(format!("{}", m.std));
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}
