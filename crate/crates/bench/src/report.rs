//! Aggregates per (family, dim, method) with best-method markers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::MetricsRow;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Stat {
    /// Population standard deviation; NaN for an empty sample.
    pub fn of(xs: &[f64]) -> Stat {
        if xs.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN, median: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let mut s = xs.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        let m = s.len() / 2;
        let median = if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) };
        Stat { mean, std: var.sqrt(), median }
    }
}

/// Column order of the report tables; `true` where larger is better.
pub const COLUMNS: [(&str, bool); 9] = [
    ("final_dist", false),
    ("final_gap", false),
    ("best_gap", false),
    ("auc_gap", false),
    ("auc_best_gap", false),
    ("hit_rate", true),
    ("minima_visited", true),
    ("oracle_calls", false),
    ("shortfall", false),
];

fn column(r: &MetricsRow, name: &str) -> Option<f64> {
    Some(match name {
        "final_dist" => r.final_dist,
        "final_gap" => r.final_gap,
        "best_gap" => r.best_gap,
        "auc_gap" => r.auc_gap,
        "auc_best_gap" => r.auc_best_gap,
        "hit_rate" => r.hit as f64,
        "minima_visited" => r.minima_visited? as f64,
        "oracle_calls" => r.oracle_calls as f64,
        "shortfall" => r.shortfall as f64,
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub family: String,
    pub dim: usize,
    pub method: String,
    pub runs: usize,
    /// One entry per [`COLUMNS`] item.
    pub stats: Vec<Stat>,
    /// Best mean within the (family, dim) block.
    pub best: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub aggregates: Vec<Aggregate>,
}

impl BenchReport {
    /// Groups in first-seen order of (family, dim) then method.
    pub fn from_rows(rows: &[MetricsRow]) -> BenchReport {
        let mut keys: Vec<(String, usize, String)> = Vec::new();
        for r in rows {
            let k = (r.family.clone(), r.dim, r.method.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let mut aggregates: Vec<Aggregate> = keys
            .into_iter()
            .map(|(family, dim, method)| {
                let group: Vec<&MetricsRow> =
                    rows.iter().filter(|r| r.family == family && r.dim == dim && r.method == method).collect();
                let stats = COLUMNS
                    .iter()
                    .map(|(c, _)| Stat::of(&group.iter().filter_map(|r| column(r, c)).collect::<Vec<_>>()))
                    .collect();
                Aggregate { family, dim, method, runs: group.len(), stats, best: vec![false; COLUMNS.len()] }
            })
            .collect();
        let blocks: Vec<(String, usize)> = aggregates.iter().map(|a| (a.family.clone(), a.dim)).collect();
        for (fam, dim) in blocks {
            for (ci, (_, higher)) in COLUMNS.iter().enumerate() {
                let means: Vec<f64> = aggregates
                    .iter()
                    .filter(|a| a.family == fam && a.dim == dim)
                    .map(|a| a.stats[ci].mean)
                    .filter(|m| !m.is_nan())
                    .collect();
                let Some(target) = means.iter().copied().reduce(|a, b| if (b > a) == *higher { b } else { a }) else {
                    continue;
                };
                for a in aggregates.iter_mut().filter(|a| a.family == fam && a.dim == dim) {
                    a.best[ci] = a.stats[ci].mean == target;
                }
            }
        }
        BenchReport { aggregates }
    }

    pub fn get(&self, family: &str, dim: usize, method: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.family == family && a.dim == dim && a.method == method)
    }

    /// Mean of `column` for one group.
    pub fn mean(&self, family: &str, dim: usize, method: &str, column: &str) -> Option<f64> {
        let ci = COLUMNS.iter().position(|(c, _)| *c == column)?;
        Some(self.get(family, dim, method)?.stats[ci].mean)
    }

    /// Markdown tables, one per (family, dim) block, `mean ± std`, best in bold.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let mut seen: Vec<(String, usize)> = Vec::new();
        for a in &self.aggregates {
            let key = (a.family.clone(), a.dim);
            if seen.contains(&key) {
                continue;
            }
            seen.push(key);
            let _ = writeln!(out, "### {} (d = {})\n", a.family, a.dim);
            let _ = write!(out, "| method | runs |");
            for (c, _) in COLUMNS {
                let _ = write!(out, " {c} |");
            }
            let _ = write!(out, "\n|---|---|");
            for _ in COLUMNS {
                let _ = write!(out, "---|");
            }
            out.push('\n');
            for b in self.aggregates.iter().filter(|b| b.family == a.family && b.dim == a.dim) {
                let _ = write!(out, "| {} | {} |", b.method, b.runs);
                for (s, best) in b.stats.iter().zip(&b.best) {
                    let cell = if s.mean.is_nan() { "NA".to_string() } else { format!("{:.4} ± {:.4}", s.mean, s.std) };
                    if *best {
                        let _ = write!(out, " **{cell}** |");
                    } else {
                        let _ = write!(out, " {cell} |");
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out.push_str("minima_visited counts distinct 32-per-axis cells holding a small-gradient trajectory-local minimum; this cell-hash rule is a harness convention.\n");
        out
    }
}
