//! Per-run metrics computed from the queried points with the true objective.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use shape_core::tasks::Task;
use shape_core::TaskError;

/// Bumped whenever the row layout changes.
pub const SCHEMA_VERSION: u32 = 1;

/// Bins per axis for the visited-minima cell hash.
pub const MINIMA_BINS: usize = 32;

/// One (task, particle, method) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task_id: String,
    pub family: String,
    pub dim: usize,
    pub seed: u64,
    pub method: String,
    pub oracle: String,
    pub final_dist: f64,
    pub final_gap: f64,
    pub best_gap: f64,
    pub auc_gap: f64,
    pub auc_dist: f64,
    pub auc_best_gap: f64,
    pub hit: u8,
    pub oracle_calls: u64,
    /// `None` where the family has no cell hash (LJ).
    pub minima_visited: Option<u64>,
    pub wall_ms: f64,
    pub surcharge_calls: u64,
    pub aux_calls: u64,
    pub shortfall: u64,
    pub particle: u64,
    pub budget: u64,
    /// Reference value came from an offline multistart search.
    pub proxy_reference: bool,
    pub schema_version: u32,
}

/// Gap and distance summaries of a sequence of queried points.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceMetrics {
    pub final_dist: f64,
    pub final_gap: f64,
    pub best_gap: f64,
    pub auc_gap: f64,
    pub auc_dist: f64,
    pub auc_best_gap: f64,
    pub hit: bool,
    /// Running minimum of the gap, one entry per point.
    pub best_curve: Vec<f64>,
}

/// `final = last`, `best = min`, `auc = mean` over `gaps` (and `dists`).
/// An empty trace is scored at the start point.
pub fn summarize(gaps: &[f64], dists: &[f64], tolerance: f64) -> TraceMetrics {
    assert_eq!(gaps.len(), dists.len());
    assert!(!gaps.is_empty(), "summaries need at least one point");
    let n = gaps.len() as f64;
    let mut best_curve = Vec::with_capacity(gaps.len());
    let mut best = f64::INFINITY;
    for &g in gaps {
        best = best.min(g);
        best_curve.push(best);
    }
    TraceMetrics {
        final_dist: *dists.last().unwrap(),
        final_gap: *gaps.last().unwrap(),
        best_gap: best,
        auc_gap: gaps.iter().sum::<f64>() / n,
        auc_dist: dists.iter().sum::<f64>() / n,
        auc_best_gap: best_curve.iter().sum::<f64>() / n,
        hit: best <= tolerance,
        best_curve,
    }
}

/// Metrics for the points an optimizer queried, starting from `q0`.
pub fn trace_metrics(task: &Task, q0: &[f64], points: &[Vec<f64>]) -> Result<TraceMetrics, TaskError> {
    let f_star = task.reference().f;
    let initial_gap = task.value(q0)? - f_star;
    let start = [q0.to_vec()];
    let pts: &[Vec<f64>] = if points.is_empty() { &start } else { points };
    let mut gaps = Vec::with_capacity(pts.len());
    let mut dists = Vec::with_capacity(pts.len());
    for q in pts {
        gaps.push(task.value(q)? - f_star);
        dists.push(task.distance(q));
    }
    Ok(summarize(&gaps, &dists, task.hit_tolerance(initial_gap)))
}

/// Distinct cells (at `MINIMA_BINS` per axis over the nominal box) holding a
/// point with a small true gradient that is also a local minimum of f along
/// the trajectory. `None` for families without a cell hash.
pub fn count_minima(task: &Task, points: &[Vec<f64>]) -> Result<Option<u64>, TaskError> {
    if !task.supports_minima_count() {
        return Ok(None);
    }
    let hw = task.half_width();
    let mut fs = Vec::with_capacity(points.len());
    let mut small = Vec::with_capacity(points.len());
    for q in points {
        let (f, g) = task.value_grad(q)?;
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        fs.push(f);
        small.push(gn <= 1e-2 * (1.0 + f.abs()));
    }
    let mut cells = HashSet::new();
    for (k, q) in points.iter().enumerate() {
        let left = k == 0 || fs[k] <= fs[k - 1];
        let right = k + 1 == points.len() || fs[k] <= fs[k + 1];
        if small[k] && left && right {
            cells.insert(cell_of(q, hw));
        }
    }
    Ok(Some(cells.len() as u64))
}

fn cell_of(q: &[f64], hw: f64) -> Vec<i64> {
    let bins = MINIMA_BINS as f64;
    q.iter()
        .map(|&x| (((x + hw) / (2.0 * hw) * bins).floor()).clamp(0.0, bins - 1.0) as i64)
        .collect()
}

/// Best-so-far gap after each of `grid` call counts; before the first query
/// the start gap applies.
pub fn curve_on_grid(calls: &[u64], best_curve: &[f64], start_gap: f64, grid: &[u64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len());
    let mut k = 0;
    let mut cur = start_gap;
    for &c in grid {
        while k < calls.len() && calls[k] <= c {
            cur = best_curve[k].min(cur);
            k += 1;
        }
        out.push(cur);
    }
    out
}
