//! Rank-based model comparison: Friedman omnibus test over matched blocks,
//! followed by pairwise Wilcoxon signed-rank tests.

use std::collections::HashMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::evaluation::average_ranks;

/// Scores with one row per block (e.g. fold) and one column per treatment
/// (model or configuration).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub blocks: Vec<String>,
    pub treatments: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(blocks: Vec<String>, treatments: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if treatments.len() < 2 {
            return Err(Error::Stats(format!("need at least 2 treatments, got {}", treatments.len())));
        }
        if values.len() < 2 {
            return Err(Error::Stats(format!("need at least 2 blocks, got {}", values.len())));
        }
        if blocks.len() != values.len() {
            return Err(Error::Stats("block labels do not match the number of rows".into()));
        }
        for (b, row) in values.iter().enumerate() {
            if row.len() != treatments.len() {
                return Err(Error::Stats(format!(
                    "block {} has {} scores, expected {}",
                    blocks[b],
                    row.len(),
                    treatments.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Stats(format!("block {} has a missing or non-finite score", blocks[b])));
            }
        }
        Ok(ScoreMatrix {
            blocks,
            treatments,
            values,
        })
    }

    /// Unlabelled blocks are numbered from 1.
    pub fn from_rows(treatments: &[&str], values: Vec<Vec<f64>>) -> Result<Self> {
        let blocks = (1..=values.len()).map(|i| i.to_string()).collect();
        Self::new(blocks, treatments.iter().map(|s| s.to_string()).collect(), values)
    }

    /// Reads a CSV whose header names the treatments and whose rows are
    /// blocks. A leading column named `block` is taken as row labels.
    pub fn from_csv<R: Read>(source: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let labelled = header.first().is_some_and(|h| h.eq_ignore_ascii_case("block"));
        let treatments: Vec<String> = header[labelled as usize..].to_vec();
        let mut blocks = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let mut fields = rec.iter();
            blocks.push(if labelled {
                fields.next().unwrap_or_default().to_string()
            } else {
                (i + 1).to_string()
            });
            let row = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Stats(format!("row {}: `{f}` is not a number", i + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Self::new(blocks, treatments, values)
    }

    pub fn n_blocks(&self) -> usize {
        self.values.len()
    }

    pub fn n_treatments(&self) -> usize {
        self.treatments.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub df: usize,
    /// Chi-square approximation.
    pub p_value: f64,
    /// Permutation p-value over within-block rank shuffles, when the state
    /// space is small enough to enumerate.
    pub p_exact: Option<f64>,
    pub mean_ranks: Vec<f64>,
}

/// Largest number of distinct rank-sum states the exact Friedman
/// distribution may visit.
const EXACT_STATE_LIMIT: usize = 250_000;

/// Within-block average ranks, doubled so that ties stay integral.
fn doubled_ranks(m: &ScoreMatrix) -> Vec<Vec<u32>> {
    m.values
        .iter()
        .map(|row| average_ranks(row).iter().map(|r| (2.0 * r).round() as u32).collect())
        .collect()
}

/// Statistic from doubled rank sums; `tie_denominator` is `1 - sum(t^3 - t) / (n (k^3 - k))`.
fn friedman_from_sums(sums2: &[u32], n: usize, k: usize, tie_denominator: f64) -> f64 {
    if tie_denominator <= 0.0 {
        return 0.0;
    }
    let (nf, kf) = (n as f64, k as f64);
    let centre = (kf + 1.0) / 2.0;
    let ss: f64 = sums2
        .iter()
        .map(|&s| (s as f64 / 2.0 / nf - centre).powi(2))
        .sum();
    12.0 * nf / (kf * (kf + 1.0)) * ss / tie_denominator
}

fn tie_denominator(m: &ScoreMatrix) -> f64 {
    let n = m.n_blocks() as f64;
    let k = m.n_treatments() as f64;
    let mut ties = 0.0;
    for row in &m.values {
        let mut sorted = row.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i + 1;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            ties += t * t * t - t;
            i = j;
        }
    }
    1.0 - ties / (n * (k * k * k - k))
}

/// All distinct orderings of `v`.
fn distinct_permutations(v: &[u32]) -> Vec<Vec<u32>> {
    let mut v = v.to_vec();
    v.sort_unstable();
    let mut out = vec![v.clone()];
    // Lexicographic successor (handles repeated values).
    loop {
        let Some(i) = (0..v.len().saturating_sub(1)).rev().find(|&i| v[i] < v[i + 1]) else {
            break;
        };
        let j = (i + 1..v.len()).rev().find(|&j| v[j] > v[i]).expect("successor exists");
        v.swap(i, j);
        v[i + 1..].reverse();
        out.push(v.clone());
    }
    out
}

fn friedman_exact(ranks2: &[Vec<u32>], k: usize, tie_den: f64, observed: f64) -> Option<f64> {
    let n = ranks2.len();
    let mut states: HashMap<Vec<u32>, f64> = HashMap::from([(vec![0; k], 1.0)]);
    let mut total = 1.0;
    for row in ranks2 {
        let perms = distinct_permutations(row);
        total *= perms.len() as f64;
        let mut next: HashMap<Vec<u32>, f64> = HashMap::with_capacity(states.len() * perms.len());
        for (sums, count) in &states {
            for p in &perms {
                let s: Vec<u32> = sums.iter().zip(p).map(|(a, b)| a + b).collect();
                *next.entry(s).or_insert(0.0) += count;
            }
        }
        if next.len() > EXACT_STATE_LIMIT {
            return None;
        }
        states = next;
    }
    let tol = 1e-9 * observed.abs().max(1.0);
    let hits: f64 = states
        .iter()
        .filter(|(s, _)| friedman_from_sums(s, n, k, tie_den) >= observed - tol)
        .map(|(_, c)| c)
        .sum();
    Some(hits / total)
}

/// Friedman rank test with average ranks for ties and the usual tie
/// correction. When every block is fully tied the statistic is 0 and p is 1.
pub fn friedman_test(m: &ScoreMatrix) -> Result<FriedmanResult> {
    let (n, k) = (m.n_blocks(), m.n_treatments());
    if k < 2 || n < 2 {
        return Err(Error::Stats("Friedman test needs at least 2 blocks and 2 treatments".into()));
    }
    let ranks2 = doubled_ranks(m);
    let mut sums2 = vec![0u32; k];
    for row in &ranks2 {
        for (s, r) in sums2.iter_mut().zip(row) {
            *s += r;
        }
    }
    let den = tie_denominator(m);
    let statistic = friedman_from_sums(&sums2, n, k, den);
    let p_value = if den <= 0.0 || statistic <= 0.0 {
        1.0
    } else {
        let chi = ChiSquared::new((k - 1) as f64).expect("positive df");
        chi.sf(statistic)
    };
    let p_exact = if den <= 0.0 {
        Some(1.0)
    } else {
        friedman_exact(&ranks2, k, den, statistic)
    };
    Ok(FriedmanResult {
        statistic,
        df: k - 1,
        p_value,
        p_exact,
        mean_ranks: sums2.iter().map(|&s| s as f64 / 2.0 / n as f64).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Number of non-zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub method: PValueMethod,
}

/// Largest number of non-zero differences handled by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Null distribution of `W+` for the given ranks: entry `i` is the
/// probability that `2 W+ = i`.
pub fn signed_rank_null(ranks: &[f64]) -> Vec<f64> {
    let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = r2.iter().sum();
    let mut dist = vec![0.0f64; max + 1];
    dist[0] = 1.0;
    for &r in &r2 {
        for s in (r..=max).rev() {
            dist[s] += dist[s - r];
        }
    }
    let total = 2f64.powi(ranks.len() as i32);
    dist.iter_mut().for_each(|c| *c /= total);
    dist
}

/// Wilcoxon signed-rank test on paired samples `a - b`. Zero differences are
/// dropped; tied magnitudes share their average rank. Exact for up to
/// [`WILCOXON_EXACT_MAX`] non-zero differences, normal approximation above.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(a, b, None)
}

/// As [`wilcoxon_signed_rank`], optionally forcing the p-value method.
pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], method: Option<PValueMethod>) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Stats("paired samples contain non-finite values".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(Error::Stats("no information: all paired differences are zero".into()));
    }
    let n = d.len();
    let mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&mags);
    // `+ 0.0` turns the empty sum's -0.0 into 0.0.
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum::<f64>() + 0.0;
    let w_minus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v < 0.0).map(|(r, _)| r).sum::<f64>() + 0.0;
    let statistic = w_plus.min(w_minus);
    let method = method.unwrap_or(if n <= WILCOXON_EXACT_MAX {
        PValueMethod::Exact
    } else {
        PValueMethod::Normal
    });

    let p = match method {
        PValueMethod::Exact => {
            let dist = signed_rank_null(&ranks);
            let cut = (2.0 * statistic).round() as usize;
            (2.0 * dist[..=cut].iter().sum::<f64>()).min(1.0)
        }
        PValueMethod::Normal => {
            let nf = n as f64;
            let mean = nf * (nf + 1.0) / 4.0;
            let mut tie = 0.0;
            let mut sorted = mags.clone();
            sorted.sort_by(f64::total_cmp);
            let mut i = 0;
            while i < n {
                let mut j = i + 1;
                while j < n && sorted[j] == sorted[i] {
                    j += 1;
                }
                let t = (j - i) as f64;
                tie += t * t * t - t;
                i = j;
            }
            let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
            if var <= 0.0 {
                1.0
            } else {
                let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
                let normal = Normal::new(0.0, 1.0).expect("standard normal");
                (2.0 * normal.sf(z)).min(1.0)
            }
        }
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        statistic,
        p_value: p,
        method,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub alpha_friedman: f64,
    pub alpha_wilcoxon: f64,
    /// Holm step-down adjustment of the pairwise p-values.
    pub holm: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            alpha_friedman: 0.05,
            alpha_wilcoxon: 0.01,
            holm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub a: String,
    pub b: String,
    /// `None` when every paired difference is zero.
    pub wilcoxon: Option<WilcoxonResult>,
    pub p_value: f64,
    pub p_adjusted: Option<f64>,
    pub significant: bool,
    /// Treatment with the larger mean score when the difference is significant.
    pub better: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub treatments: Vec<String>,
    pub n_blocks: usize,
    pub means: Vec<f64>,
    pub options: CompareOptions,
    pub friedman: FriedmanResult,
    pub friedman_significant: bool,
    /// Present only when the Friedman test is significant.
    pub pairwise: Option<Vec<PairwiseResult>>,
}

fn holm(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adj = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p[i]).min(1.0));
        adj[i] = running;
    }
    adj
}

/// Friedman test, then (only if it rejects at `alpha_friedman`) Wilcoxon
/// tests for every pair of treatments at `alpha_wilcoxon`.
pub fn compare_models(m: &ScoreMatrix, options: &CompareOptions) -> Result<ComparisonReport> {
    let friedman = friedman_test(m)?;
    let friedman_significant = friedman.p_value < options.alpha_friedman;
    let means: Vec<f64> = (0..m.n_treatments())
        .map(|j| m.column(j).iter().sum::<f64>() / m.n_blocks() as f64)
        .collect();
    let pairwise = if friedman_significant {
        let mut pairs = Vec::new();
        for i in 0..m.n_treatments() {
            for j in i + 1..m.n_treatments() {
                let w = match wilcoxon_signed_rank(&m.column(i), &m.column(j)) {
                    Ok(w) => Some(w),
                    Err(_) => None,
                };
                pairs.push((i, j, w));
            }
        }
        let raw: Vec<f64> = pairs.iter().map(|(_, _, w)| w.as_ref().map_or(1.0, |w| w.p_value)).collect();
        let adjusted = options.holm.then(|| holm(&raw));
        Some(
            pairs
                .into_iter()
                .enumerate()
                .map(|(idx, (i, j, w))| {
                    let p_eff = adjusted.as_ref().map_or(raw[idx], |a| a[idx]);
                    let significant = w.is_some() && p_eff < options.alpha_wilcoxon;
                    let better = significant.then(|| {
                        if means[i] >= means[j] {
                            m.treatments[i].clone()
                        } else {
                            m.treatments[j].clone()
                        }
                    });
                    PairwiseResult {
                        a: m.treatments[i].clone(),
                        b: m.treatments[j].clone(),
                        wilcoxon: w,
                        p_value: raw[idx],
                        p_adjusted: adjusted.as_ref().map(|a| a[idx]),
                        significant,
                        better,
                    }
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(ComparisonReport {
        treatments: m.treatments.clone(),
        n_blocks: m.n_blocks(),
        means,
        options: options.clone(),
        friedman,
        friedman_significant,
        pairwise,
    })
}
