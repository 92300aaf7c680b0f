//! Recall, specificity and precision over labeled datasets.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyVerdict;
use crate::prompt::BugFinding;
use crate::synth::{Label, LabeledSample};

/// `100·num/den`, or `None` for an empty denominator.
pub fn percent(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Share of reports that were correct, in percent.
pub fn precision(reports: u64, correct: u64) -> Option<f64> {
    percent(correct, reports)
}

/// Findings of one sample, split by the filter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleFindings {
    pub kept: Vec<BugFinding>,
    #[serde(default)]
    pub excluded: Vec<BugFinding>,
    /// The exchange failed, e.g. on a schema violation.
    #[serde(default)]
    pub failed: bool,
}

/// Raw counts. Line-level counts are per finding, function-level counts
/// per sample. `*_mutated` columns come from the mutated set; the plain
/// false-positive columns come from the clean set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub mutated_samples: u64,
    pub clean_samples: u64,
    pub tp_l: u64,
    pub fp_l_mutated: u64,
    pub fn_l: u64,
    pub tp_f: u64,
    pub fp_f_mutated: u64,
    pub fn_f: u64,
    pub fp_l: u64,
    pub excluded_fp_l: u64,
    /// Clean lines nobody flagged.
    pub tn_l: u64,
    pub fp_f: u64,
    pub excluded_fp_f: u64,
    pub tn_f: u64,
    /// Exchanges that failed; counted as misses on mutated samples.
    pub failures: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    pub recall_f: Option<f64>,
    pub specificity_l: Option<f64>,
    pub precision: Option<f64>,
}

impl MetricsSummary {
    pub fn from_counts(counts: ConfusionCounts) -> MetricsSummary {
        let c = &counts;
        let specificity_l = match c.fp_l + c.excluded_fp_l {
            0 if c.clean_samples > 0 => {
                tracing::info!("no findings on the clean set; specificity reported as 100");
                Some(100.0)
            }
            den => percent(c.excluded_fp_l, den),
        };
        MetricsSummary {
            recall_f: percent(c.tp_f, c.tp_f + c.fn_f),
            specificity_l,
            precision: precision(c.tp_l + c.fp_l_mutated + c.fp_l, c.tp_l),
            counts,
        }
    }
}

/// Scores chat findings keyed by sample id. Samples absent from the map
/// had no findings.
pub fn score_run(dataset: &[LabeledSample], findings: &HashMap<String, SampleFindings>) -> MetricsSummary {
    let empty = SampleFindings::default();
    let mut c = ConfusionCounts::default();
    for sample in dataset {
        let f = findings.get(&sample.id).unwrap_or(&empty);
        if f.failed {
            c.failures += 1;
            tracing::warn!(sample = %sample.id, "exchange failed; scored as no findings");
        }
        match (sample.label, sample.mutated_file_line()) {
            (Label::Mutated, Some(target)) => {
                c.mutated_samples += 1;
                let hits = f.kept.iter().filter(|b| b.line() == Some(target)).count() as u64;
                c.tp_l += hits;
                c.fp_l_mutated += f.kept.len() as u64 - hits;
                if hits > 0 {
                    c.tp_f += 1;
                } else {
                    c.fn_l += 1;
                    c.fn_f += 1;
                    if !f.kept.is_empty() {
                        c.fp_f_mutated += 1;
                    }
                }
            }
            _ => {
                c.clean_samples += 1;
                c.fp_l += f.kept.len() as u64;
                c.excluded_fp_l += f.excluded.len() as u64;
                let flagged: BTreeSet<usize> = f.kept.iter().filter_map(BugFinding::line).collect();
                c.tn_l += (sample.function_text.lines().count() as u64).saturating_sub(flagged.len() as u64);
                if !f.kept.is_empty() {
                    c.fp_f += 1;
                } else if !f.excluded.is_empty() {
                    c.excluded_fp_f += 1;
                } else {
                    c.tn_f += 1;
                }
            }
        }
    }
    MetricsSummary::from_counts(c)
}

/// Consistency-stage scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InfillingScore {
    pub tp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
}

/// A mutated position judged inconsistent is a hit; a clean position
/// judged consistent is a correct pass.
pub fn score_infilling<'a>(items: impl IntoIterator<Item = (Label, &'a ConsistencyVerdict)>) -> InfillingScore {
    let mut s = InfillingScore::default();
    for (label, v) in items {
        match (label, v.consistent) {
            (Label::Mutated, false) => s.tp += 1,
            (Label::Mutated, true) => s.fn_ += 1,
            (Label::Clean, true) => s.tn += 1,
            (Label::Clean, false) => s.fp += 1,
        }
    }
    s.recall = percent(s.tp, s.tp + s.fn_);
    s.specificity = percent(s.tn, s.tn + s.fp);
    s
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub label: String,
    pub summary: MetricsSummary,
    pub cost: Option<f64>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.1}"))
}

/// Aligned text table: mutated-set columns, clean-set columns, cost.
pub fn render_table(rows: &[TableRow]) -> String {
    let header = [
        "", "TP_L", "FP_L", "TP_F", "FP_F", "Rec.", "FP_L", "E.FP_L", "FP_F", "E.FP_F", "Spe.", "Cost",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let c = &r.summary.counts;
            vec![
                r.label.clone(),
                c.tp_l.to_string(),
                c.fp_l_mutated.to_string(),
                c.tp_f.to_string(),
                c.fp_f_mutated.to_string(),
                pct(r.summary.recall_f),
                c.fp_l.to_string(),
                c.excluded_fp_l.to_string(),
                c.fp_f.to_string(),
                c.excluded_fp_f.to_string(),
                pct(r.summary.specificity_l),
                r.cost.map_or_else(|| "-".into(), |c| format!("${c:.2}")),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        for (i, cell) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[0]);
            } else {
                let sep = if i == 6 || i == 11 { " | " } else { "  " };
                let _ = write!(out, "{sep}{cell:>w$}", w = widths[i]);
            }
        }
        out.push('\n');
    };
    line(&header);
    for r in &body {
        line(&r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}
