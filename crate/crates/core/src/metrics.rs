//! Mean precision at 5 with the small-`n_q` adjustment.
//!
//! ```text
//! mP@5 = 1/Q * sum_q  1/min(n_q, 5) * sum_{j=1..min(n_q, 5)} rel_q(j)
//! ```
//!
//! Note the inner sum stops at `min(n_q, 5)`: a query with a single relevant
//! item is judged on rank 1 only, and a hit at rank 2 earns nothing. This is
//! stricter than the common variant that counts hits in all five ranks and
//! only clips the denominator; that variant is available as
//! [`PrecisionRule::ClippedDenominator`] for comparison.
//!
//! Queries with `n_q = 0` are skipped and counted in
//! [`MetricReport::skipped`].

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::hash::Hash;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dataset::{for_each_row, is_valid_label, open_csv, parse_field};
use crate::error::{Error, Result};
use crate::retrieval::RetrievalResult;

pub const CUTOFF: usize = 5;
pub const REPORT_HEADER: [&str; 3] = ["query_id", "n_q", "p_at_5"];
pub const LABELS_HEADER: [&str; 2] = ["id", "label"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrecisionRule {
    /// Hits counted over the first `min(n_q, 5)` ranks.
    #[default]
    Literal,
    /// Hits counted over the first 5 ranks, divided by `min(n_q, 5)`.
    ClippedDenominator,
}

/// Relevant index ids per query id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub relevant: HashMap<u64, HashSet<u64>>,
}

impl GroundTruth {
    pub fn n_q(&self, query_id: u64) -> Option<usize> {
        self.relevant.get(&query_id).map(HashSet::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryScore {
    pub query_id: u64,
    pub n_q: usize,
    pub p_at_5: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Scored queries in ascending id order.
    pub per_query: Vec<QueryScore>,
    pub skipped: usize,
    pub mp_at_5: f64,
}

impl MetricReport {
    /// Number of scored queries (`Q`).
    pub fn q(&self) -> usize {
        self.per_query.len()
    }

    pub fn summary_line(&self) -> String {
        format!("{},{},{:.6}", self.q(), self.skipped, self.mp_at_5)
    }
}

fn check_unique(predictions: &[u64]) -> Result<()> {
    let mut seen = HashSet::with_capacity(predictions.len());
    for &p in predictions {
        if !seen.insert(p) {
            return Err(Error::Validation(format!(
                "prediction id {p} appears twice"
            )));
        }
    }
    Ok(())
}

pub fn p_at_5_single(predictions: &[u64], relevant: &HashSet<u64>) -> Result<f64> {
    precision_single(predictions, relevant, PrecisionRule::Literal)
}

/// Per-query precision; missing ranks count as misses.
pub fn precision_single(
    predictions: &[u64],
    relevant: &HashSet<u64>,
    rule: PrecisionRule,
) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::Argument(
            "query has no relevant items (n_q = 0)".into(),
        ));
    }
    check_unique(predictions)?;
    let denom = relevant.len().min(CUTOFF);
    let depth = match rule {
        PrecisionRule::Literal => denom,
        PrecisionRule::ClippedDenominator => CUTOFF,
    };
    let hits = predictions
        .iter()
        .take(depth)
        .filter(|id| relevant.contains(id))
        .count();
    Ok(hits as f64 / denom as f64)
}

pub fn mp_at_5(results: &RetrievalResult, truth: &GroundTruth) -> Result<MetricReport> {
    mp_at_5_with(results, truth, PrecisionRule::Literal)
}

pub fn mp_at_5_with(
    results: &RetrievalResult,
    truth: &GroundTruth,
    rule: PrecisionRule,
) -> Result<MetricReport> {
    let mut per_query = Vec::with_capacity(results.queries.len());
    let mut skipped = 0;
    let mut seen = HashSet::new();
    for q in &results.queries {
        if !seen.insert(q.query_id) {
            return Err(Error::Validation(format!(
                "query {} appears twice in results",
                q.query_id
            )));
        }
        let relevant = truth.relevant.get(&q.query_id).ok_or_else(|| {
            Error::Validation(format!("query {} has no ground truth", q.query_id))
        })?;
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        let p = precision_single(&q.ids(), relevant, rule)?;
        per_query.push(QueryScore {
            query_id: q.query_id,
            n_q: relevant.len(),
            p_at_5: p,
        });
    }
    if per_query.is_empty() {
        return Err(Error::Validation(format!(
            "no scorable queries ({skipped} skipped with n_q = 0)"
        )));
    }
    per_query.sort_by_key(|s| s.query_id);
    let total: f64 = per_query.iter().map(|s| s.p_at_5).sum();
    let mp = total / per_query.len() as f64;
    Ok(MetricReport {
        per_query,
        skipped,
        mp_at_5: mp,
    })
}

/// Relevance by label equality; a query never counts itself as relevant.
pub fn truth_from_labels<L: Eq + Hash>(
    query_labels: &[(u64, L)],
    index_labels: &[(u64, L)],
) -> GroundTruth {
    let mut by_label: HashMap<&L, Vec<u64>> = HashMap::new();
    for (id, label) in index_labels {
        by_label.entry(label).or_default().push(*id);
    }
    let relevant = query_labels
        .iter()
        .map(|(qid, label)| {
            let set = by_label
                .get(label)
                .map(|ids| ids.iter().copied().filter(|id| id != qid).collect())
                .unwrap_or_default();
            (*qid, set)
        })
        .collect();
    GroundTruth { relevant }
}

pub fn write_report(report: &MetricReport, path: &Path) -> Result<()> {
    let ctx = || path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", REPORT_HEADER.join(",")).map_err(|e| Error::io(ctx(), e))?;
    for s in &report.per_query {
        writeln!(out, "{},{},{:.6}", s.query_id, s.n_q, s.p_at_5)
            .map_err(|e| Error::io(ctx(), e))?;
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn write_labels(labels: &[(u64, String)], path: &Path) -> Result<()> {
    let ctx = || path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", LABELS_HEADER.join(",")).map_err(|e| Error::io(ctx(), e))?;
    for (id, label) in labels {
        writeln!(out, "{id},{label}").map_err(|e| Error::io(ctx(), e))?;
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_labels(path: &Path) -> Result<Vec<(u64, String)>> {
    let mut reader = open_csv(path, &LABELS_HEADER)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for_each_row(path, &mut reader, |line, row| {
        let id: u64 = parse_field(path, line, row, 0, "id")?;
        let label = row.get(1).unwrap_or("").to_string();
        if !is_valid_label(&label) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("label {label:?} must match [A-Za-z0-9_-]+"),
            });
        }
        if !seen.insert(id) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("duplicate id {id}"),
            });
        }
        out.push((id, label));
        Ok(())
    })?;
    Ok(out)
}
