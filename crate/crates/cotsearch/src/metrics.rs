//! Run summaries and analysis aggregations: the efficiency metric, operator
//! frequencies, operator-to-mode correlation over externally labeled steps,
//! and rank correlation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::trace::{Operator, ReasoningTrace};
use crate::{Error, Result};

/// Composite efficiency: quadratic in relative accuracy, linear in relative
/// token savings. Unit-free, so accuracies may be fractions or percentages
/// as long as both sides agree.
pub fn efficiency_eta(acc: f64, baseline_acc: f64, len: f64, baseline_len: f64) -> Result<f64> {
    if baseline_acc <= 0.0 {
        return Err(Error::Data("baseline accuracy must be positive".into()));
    }
    if len <= 0.0 || baseline_len <= 0.0 {
        return Err(Error::Data("lengths must be positive".into()));
    }
    Ok((acc / baseline_acc).powi(2) * (baseline_len / len))
}

/// Accuracy/length summary of a run against its baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Fraction of correct traces.
    pub accuracy: f64,
    pub mean_length: f64,
    pub baseline_accuracy: f64,
    pub baseline_length: f64,
    pub eta: f64,
    /// Accuracy difference in percentage points.
    pub delta_acc: f64,
    /// Length difference as a percentage of the baseline.
    pub delta_length_pct: f64,
}

fn accuracy_and_length(traces: &[ReasoningTrace]) -> (f64, f64) {
    let n = traces.len() as f64;
    let correct = traces.iter().filter(|t| t.correct).count() as f64;
    let tokens: u64 = traces.iter().map(|t| t.total_tokens).sum();
    (correct / n, tokens as f64 / n)
}

/// Summarize a run against paired baseline traces over the same query set.
pub fn summarize_run(traces: &[ReasoningTrace], baseline: &[ReasoningTrace]) -> Result<RunMetrics> {
    if traces.is_empty() || baseline.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ours: Vec<&str> = traces.iter().map(|t| t.query_id.as_str()).collect();
    let mut theirs: Vec<&str> = baseline.iter().map(|t| t.query_id.as_str()).collect();
    ours.sort_unstable();
    ours.dedup();
    theirs.sort_unstable();
    theirs.dedup();
    if ours != theirs {
        return Err(Error::Data(
            "query sets differ between run and baseline".into(),
        ));
    }
    let (accuracy, mean_length) = accuracy_and_length(traces);
    let (baseline_accuracy, baseline_length) = accuracy_and_length(baseline);
    let eta = efficiency_eta(accuracy, baseline_accuracy, mean_length, baseline_length)?;
    Ok(RunMetrics {
        accuracy,
        mean_length,
        baseline_accuracy,
        baseline_length,
        eta,
        delta_acc: (accuracy - baseline_accuracy) * 100.0,
        delta_length_pct: (mean_length - baseline_length) / baseline_length * 100.0,
    })
}

/// Multi-benchmark averages: mean of per-benchmark deltas and mean of
/// per-benchmark eta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageMetrics {
    pub delta_acc: f64,
    pub delta_length_pct: f64,
    pub eta: f64,
}

pub fn average_metrics(rows: &[RunMetrics]) -> Result<AverageMetrics> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = rows.len() as f64;
    Ok(AverageMetrics {
        delta_acc: rows.iter().map(|r| r.delta_acc).sum::<f64>() / n,
        delta_length_pct: rows.iter().map(|r| r.delta_length_pct).sum::<f64>() / n,
        eta: rows.iter().map(|r| r.eta).sum::<f64>() / n,
    })
}

/// CSV with the standard comparison columns.
pub fn metrics_csv(rows: &[(&str, &RunMetrics)]) -> String {
    let mut out = String::from("policy,accuracy,mean_length,eta,delta_acc,delta_length_pct\n");
    for (name, m) in rows {
        out.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            m.accuracy, m.mean_length, m.eta, m.delta_acc, m.delta_length_pct
        ));
    }
    out
}

/// How often each operator was chosen, as a percentage of all decision
/// points. Sorted by frequency, then text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorFrequency {
    pub operator: String,
    pub count: u64,
    pub percent: f64,
}

pub fn operator_frequency(traces: &[ReasoningTrace]) -> Vec<OperatorFrequency> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut total = 0u64;
    for t in traces {
        for op in t.architecture() {
            *counts.entry(op.text.as_str()).or_default() += 1;
            total += 1;
        }
    }
    let mut rows: Vec<OperatorFrequency> = counts
        .into_iter()
        .map(|(text, count)| OperatorFrequency {
            operator: text.to_string(),
            count,
            percent: count as f64 / total as f64 * 100.0,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.operator.cmp(&b.operator))
    });
    rows
}

pub fn operator_frequency_csv(rows: &[OperatorFrequency]) -> String {
    let mut out = String::from("operator,percent,count\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.operator, r.percent, r.count));
    }
    out
}

/// Functional class of a step, as labeled by an external judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeLabel {
    Statement,
    Reflection,
    Summary,
    Divergence,
}

impl ModeLabel {
    pub const ALL: [ModeLabel; 4] = [
        ModeLabel::Statement,
        ModeLabel::Reflection,
        ModeLabel::Summary,
        ModeLabel::Divergence,
    ];

    pub fn index(self) -> usize {
        match self {
            ModeLabel::Statement => 0,
            ModeLabel::Reflection => 1,
            ModeLabel::Summary => 2,
            ModeLabel::Divergence => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModeLabel::Statement => "statement",
            ModeLabel::Reflection => "reflection",
            ModeLabel::Summary => "summary",
            ModeLabel::Divergence => "divergence",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().as_str() {
            "statement" => Some(ModeLabel::Statement),
            "reflection" => Some(ModeLabel::Reflection),
            "summary" => Some(ModeLabel::Summary),
            "divergence" => Some(ModeLabel::Divergence),
            _ => None,
        }
    }
}

/// One operator's label counts and row-stochastic mode distribution, mode
/// order `[statement, reflection, summary, divergence]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub operator: String,
    pub counts: [u64; 4],
    pub probs: [f64; 4],
}

/// Aggregate externally labeled `(operator, mode)` pairs into per-operator
/// mode distributions. Rows are sorted by operator text.
pub fn mode_correlation(labeled: &[(Operator, ModeLabel)]) -> Vec<ModeRow> {
    let mut counts: BTreeMap<&str, [u64; 4]> = BTreeMap::new();
    for (op, mode) in labeled {
        counts.entry(op.text.as_str()).or_insert([0; 4])[mode.index()] += 1;
    }
    counts
        .into_iter()
        .map(|(text, counts)| {
            let total: u64 = counts.iter().sum();
            let probs = counts.map(|c| c as f64 / total as f64);
            ModeRow {
                operator: text.to_string(),
                counts,
                probs,
            }
        })
        .collect()
}

pub fn mode_correlation_csv(rows: &[ModeRow]) -> String {
    let mut out = String::from("operator,mode,probability,count\n");
    for r in rows {
        for mode in ModeLabel::ALL {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.operator,
                mode.name(),
                r.probs[mode.index()],
                r.counts[mode.index()]
            ));
        }
    }
    out
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() > 1, "need at least two points");
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        var_x += (a - mean) * (a - mean);
        var_y += (b - mean) * (b - mean);
    }
    cov / (var_x.sqrt() * var_y.sqrt()).max(1e-300)
}
