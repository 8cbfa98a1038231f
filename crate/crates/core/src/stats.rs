//! Fit-quality metrics and cohort statistics.
//!
//! The Wilcoxon signed-rank test is exact: the null distribution of the
//! positive rank sum is counted over all `2^n` sign assignments with a
//! subset-sum recursion on doubled ranks, so average ranks from ties stay
//! integral and `n` is not limited by enumeration cost.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Tac;

/// Mean over frames of the squared difference.
pub fn mse(predicted: &Tac, measured: &Tac) -> Result<f64> {
    if predicted.grid() != measured.grid() {
        return Err(Error::GridMismatch("predicted and measured curves".into()));
    }
    mse_values(predicted.values(), measured.values())
}

pub fn mse_values(predicted: &[f64], measured: &[f64]) -> Result<f64> {
    if predicted.len() != measured.len() {
        return Err(Error::LengthMismatch {
            expected: measured.len(),
            actual: predicted.len(),
            context: "mse",
        });
    }
    if predicted.is_empty() {
        return Err(Error::Stats("mse of empty curves".into()));
    }
    let sum: f64 = predicted.iter().zip(measured).map(|(p, m)| (p - m).powi(2)).sum();
    Ok(sum / predicted.len() as f64)
}

/// `100 * (multi - baseline) / baseline`, in percent.
pub fn relative_change(baseline: f64, multi: f64) -> Result<f64> {
    if baseline.is_nan() || baseline <= 0.0 || !baseline.is_finite() || !multi.is_finite() {
        return Err(Error::Stats(format!(
            "relative change needs a positive finite baseline (got {baseline}, {multi})"
        )));
    }
    Ok(100.0 * (multi - baseline) / baseline)
}

/// Mean and sample standard deviation (`n - 1` denominator; absent for n = 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: Option<f64>,
}

pub fn cohort_summary(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Stats("summary of an empty list".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (n >= 2).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(Summary { n, mean, sd })
}

/// One subject's paired fit errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub subject_id: String,
    pub organ: String,
    pub mse_baseline: f64,
    pub mse_multi: f64,
}

/// Paired baseline/multi MSEs for one organ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedCohort {
    subjects: Vec<String>,
    baseline: Vec<f64>,
    multi: Vec<f64>,
}

impl PairedCohort {
    pub fn new(subjects: Vec<String>, baseline: Vec<f64>, multi: Vec<f64>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Stats("cohort has no subjects".into()));
        }
        if baseline.len() != subjects.len() || multi.len() != subjects.len() {
            return Err(Error::LengthMismatch {
                expected: subjects.len(),
                actual: baseline.len().min(multi.len()),
                context: "paired cohort columns",
            });
        }
        for (s, (&b, &m)) in subjects.iter().zip(baseline.iter().zip(&multi)) {
            if !(b.is_finite() && m.is_finite() && b >= 0.0 && m >= 0.0) {
                return Err(Error::Stats(format!(
                    "subject {s}: MSE values must be finite and non-negative ({b}, {m})"
                )));
            }
        }
        Ok(Self {
            subjects,
            baseline,
            multi,
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn baseline(&self) -> &[f64] {
        &self.baseline
    }

    pub fn multi(&self) -> &[f64] {
        &self.multi
    }

    /// `multi - baseline` per subject.
    pub fn differences(&self) -> Vec<f64> {
        self.multi.iter().zip(&self.baseline).map(|(m, b)| m - b).collect()
    }

    /// Per-subject relative changes in percent.
    pub fn relative_changes(&self) -> Result<Vec<f64>> {
        self.baseline
            .iter()
            .zip(&self.multi)
            .map(|(&b, &m)| relative_change(b, m))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub statistic: f64,
    /// Two-sided exact p-value.
    pub p_value: f64,
}

pub fn wilcoxon_signed_rank(cohort: &PairedCohort) -> Result<WilcoxonResult> {
    wilcoxon_differences(&cohort.differences())
}

/// Exact two-sided signed-rank test on paired differences.
pub fn wilcoxon_differences(differences: &[f64]) -> Result<WilcoxonResult> {
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("Wilcoxon differences".into()));
    }
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::Stats("all paired differences are zero".into()));
    }
    let doubled = doubled_ranks(&nonzero);
    let n = nonzero.len();
    let w_plus2: u64 = nonzero.iter().zip(&doubled).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total2: u64 = doubled.iter().sum();
    let w_minus2 = total2 - w_plus2;
    let stat2 = w_plus2.min(w_minus2);

    let counts = rank_sum_counts(&doubled);
    let below: f64 = counts[..=stat2 as usize].iter().sum();
    let all: f64 = counts.iter().sum();
    let p_value = (2.0 * below / all).min(1.0);
    Ok(WilcoxonResult {
        n,
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: w_minus2 as f64 / 2.0,
        statistic: stat2 as f64 / 2.0,
        p_value,
    })
}

/// Twice the average ranks of `|values|`.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]].abs() == values[order[i]].abs() {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean; doubled that is i + j + 2
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Number of sign assignments giving each doubled positive rank sum.
fn rank_sum_counts(doubled: &[u64]) -> Vec<f64> {
    let total: u64 = doubled.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        reach += r;
        for s in (r..=reach).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

/// Table-style summary of one organ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganSummary {
    pub organ: String,
    pub n: usize,
    pub mse_baseline: Summary,
    pub mse_multi: Summary,
    /// Mean and sd of the per-subject relative changes (percent).
    pub relative_change_pct: Summary,
    /// Absent when every difference is zero.
    pub wilcoxon: Option<WilcoxonResult>,
}

pub fn summarize_cohort(cohort: &PairedCohort, organ: &str) -> Result<OrganSummary> {
    let wilcoxon = match wilcoxon_signed_rank(cohort) {
        Ok(w) => Some(w),
        Err(Error::Stats(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(OrganSummary {
        organ: organ.to_string(),
        n: cohort.len(),
        mse_baseline: cohort_summary(cohort.baseline())?,
        mse_multi: cohort_summary(cohort.multi())?,
        relative_change_pct: cohort_summary(&cohort.relative_changes()?)?,
        wilcoxon,
    })
}

/// Groups records by organ (sorted by name) and summarizes each group.
pub fn summarize_records(records: &[CohortRecord]) -> Result<Vec<OrganSummary>> {
    if records.is_empty() {
        return Err(Error::Stats("cohort has no subjects".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&CohortRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.organ.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(organ, rows)| {
            let cohort = PairedCohort::new(
                rows.iter().map(|r| r.subject_id.clone()).collect(),
                rows.iter().map(|r| r.mse_baseline).collect(),
                rows.iter().map(|r| r.mse_multi).collect(),
            )?;
            summarize_cohort(&cohort, organ)
        })
        .collect()
}

fn mean_sd(s: &Summary) -> String {
    match s.sd {
        Some(sd) => format!("{:.2} ± {:.2}", s.mean, sd),
        None => format!("{:.2}", s.mean),
    }
}

/// Plain-text table with one row per organ.
pub fn format_table(rows: &[OrganSummary]) -> String {
    let header = ["Organ", "n", "MSE (aorta)", "MSE (multiple)", "Relative change", "p-value"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            let rel = match r.relative_change_pct.sd {
                Some(sd) => format!("{:.2}% ± {:.2}%", r.relative_change_pct.mean, sd),
                None => format!("{:.2}%", r.relative_change_pct.mean),
            };
            let p = match &r.wilcoxon {
                Some(w) if w.p_value < 0.05 => format!("{:.5}*", w.p_value),
                Some(w) => format!("{:.5}", w.p_value),
                None => "n/a".into(),
            };
            [
                r.organ.clone(),
                r.n.to_string(),
                mean_sd(&r.mse_baseline),
                mean_sd(&r.mse_multi),
                rel,
                p,
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut out, &header.map(String::from));
    line(&mut out, &widths.map(|w| "-".repeat(w)));
    for row in &body {
        line(&mut out, row);
    }
    out
}
