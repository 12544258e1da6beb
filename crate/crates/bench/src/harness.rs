//! Matched-budget benchmark runs: every method sees the same task instances,
//! the same start points and the same oracle noise stream per particle.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use shape_core::baselines::{lookup_hparams, run_baseline, Hparams, Method};
use shape_core::memory::MemoryConfig;
use shape_core::oracle::OracleKind;
use shape_core::policy::Policy;
use shape_core::shape_loop::{run, ShapeConfig};
use shape_core::tasks::{derive_seed, make_task, Family, Task, TaskOptions};
use shape_core::ShapeError;

use crate::metrics::{count_minima, curve_on_grid, trace_metrics, MetricsRow, SCHEMA_VERSION};

/// Points on the shared call axis used for best-so-far curves.
pub const CURVE_POINTS: usize = 64;

#[derive(Clone, Debug)]
pub enum MethodSpec {
    Shape { label: String, policy: Arc<Policy> },
    Baseline { method: Method, hparams: Option<Hparams> },
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Shape { label, .. } => label.clone(),
            MethodSpec::Baseline { method, .. } => method.name().to_string(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchSpec {
    /// `(family, dim)` blocks.
    pub blocks: Vec<(Family, usize)>,
    pub n_tasks: usize,
    pub seed: u64,
    pub task: TaskOptions,
    pub oracle: OracleKind,
    pub budget: u64,
    pub particles: usize,
    pub methods: Vec<MethodSpec>,
    pub shape: ShapeConfig,
}

impl BenchSpec {
    /// Task `i` of a block; identical for every method.
    pub fn task(&self, family: Family, dim: usize, i: usize) -> Result<Task, ShapeError> {
        Ok(make_task(family, dim, derive_seed(self.seed, 10_000 + i as u64), &self.task)?)
    }
}

/// Best-so-far gap curve of one run on the shared call grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub family: String,
    pub dim: usize,
    pub method: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct BenchOutput {
    pub rows: Vec<MetricsRow>,
    pub curves: Vec<Curve>,
    pub grid: Vec<u64>,
}

/// Evenly spaced call counts from 0 to `budget`.
pub fn call_grid(budget: u64) -> Vec<u64> {
    (0..CURVE_POINTS).map(|i| (budget as f64 * i as f64 / (CURVE_POINTS - 1) as f64).round() as u64).collect()
}

struct Job {
    block: usize,
    task: usize,
    particle: usize,
    method: usize,
}

/// Raw outcome of one optimizer run before metrics.
pub struct RunOutcome {
    pub points: Vec<Vec<f64>>,
    pub calls: Vec<u64>,
    pub calls_used: u64,
    pub surcharge: u64,
    pub aux: u64,
    pub shortfall: u64,
}

/// Run one method once. SHAPE memory follows the checkpoint: a policy with no
/// memory readout runs with memory disabled.
pub fn run_method(
    spec: &MethodSpec,
    task: &Task,
    oracle: OracleKind,
    budget: u64,
    q0: &[f64],
    stream: u64,
    shape: &ShapeConfig,
) -> Result<RunOutcome, ShapeError> {
    match spec {
        MethodSpec::Shape { policy, .. } => {
            let mut cfg = shape.clone();
            cfg.memory = MemoryConfig { enabled: policy.config.readout_len > 0, ..cfg.memory };
            let tr = run(task, policy, oracle, budget, q0, stream, &cfg)?;
            Ok(RunOutcome {
                points: tr.rows.iter().map(|r| r.q.clone()).collect(),
                calls: tr.rows.iter().map(|r| r.calls).collect(),
                calls_used: tr.calls_used,
                surcharge: 0,
                aux: 0,
                shortfall: tr.shortfall,
            })
        }
        MethodSpec::Baseline { method, hparams } => {
            let hp = hparams.unwrap_or_else(|| lookup_hparams(*method, task.family.table_key()));
            let tr = run_baseline(task, hp, oracle, budget, q0, stream)?;
            Ok(RunOutcome {
                points: tr.rows.iter().map(|r| r.q.clone()).collect(),
                calls: tr.rows.iter().map(|r| r.calls).collect(),
                calls_used: tr.calls_used,
                surcharge: tr.surcharge_calls,
                aux: tr.aux_calls,
                shortfall: tr.shortfall,
            })
        }
    }
}

/// Runs the whole grid in parallel and returns rows in canonical order
/// (block, task, particle, method).
pub fn run_benchmark(spec: &BenchSpec) -> Result<BenchOutput, ShapeError> {
    if spec.methods.is_empty() {
        return Err(ShapeError::InvalidConfig("no methods configured".into()));
    }
    let tasks: Vec<Vec<Task>> = spec
        .blocks
        .iter()
        .map(|&(f, d)| (0..spec.n_tasks).map(|i| spec.task(f, d, i)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;
    let mut jobs = Vec::new();
    for b in 0..spec.blocks.len() {
        for t in 0..spec.n_tasks {
            for p in 0..spec.particles {
                for m in 0..spec.methods.len() {
                    jobs.push(Job { block: b, task: t, particle: p, method: m });
                }
            }
        }
    }
    let grid = call_grid(spec.budget);
    let results: Vec<(MetricsRow, Curve)> = jobs
        .par_iter()
        .map(|j| {
            let task = &tasks[j.block][j.task];
            let method = &spec.methods[j.method];
            let q0 = task.start_for(j.particle as u64);
            let stream = j.particle as u64;
            let t0 = Instant::now();
            let out = run_method(method, task, spec.oracle, spec.budget, &q0, stream, &spec.shape)?;
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            let m = trace_metrics(task, &q0, &out.points)?;
            let minima = count_minima(task, &out.points)?;
            let start_gap = task.value(&q0)? - task.reference().f;
            let curve = if out.points.is_empty() {
                vec![start_gap; grid.len()]
            } else {
                curve_on_grid(&out.calls, &m.best_curve, start_gap, &grid)
            };
            let row = MetricsRow {
                task_id: task.id(),
                family: task.family.name().to_string(),
                dim: task.dim,
                seed: task.seed,
                method: method.label(),
                oracle: spec.oracle.tag().to_string(),
                final_dist: m.final_dist,
                final_gap: m.final_gap,
                best_gap: m.best_gap,
                auc_gap: m.auc_gap,
                auc_dist: m.auc_dist,
                auc_best_gap: m.auc_best_gap,
                hit: m.hit as u8,
                oracle_calls: out.calls_used,
                minima_visited: minima,
                wall_ms,
                surcharge_calls: out.surcharge,
                aux_calls: out.aux,
                shortfall: out.shortfall,
                particle: j.particle as u64,
                budget: spec.budget,
                proxy_reference: task.reference().proxy,
                schema_version: SCHEMA_VERSION,
            };
            let curve = Curve { family: row.family.clone(), dim: row.dim, method: row.method.clone(), values: curve };
            Ok((row, curve))
        })
        .collect::<Result<_, ShapeError>>()?;
    let (rows, curves) = results.into_iter().unzip();
    Ok(BenchOutput { rows, curves, grid })
}

/// Mean curve per (family, dim, method), in first-seen order.
pub fn mean_curves(curves: &[Curve]) -> Vec<Curve> {
    let mut out: Vec<(Curve, usize)> = Vec::new();
    for c in curves {
        match out.iter_mut().find(|(m, _)| m.family == c.family && m.dim == c.dim && m.method == c.method) {
            Some((m, n)) => {
                m.values.iter_mut().zip(&c.values).for_each(|(a, b)| *a += b);
                *n += 1;
            }
            None => out.push((c.clone(), 1)),
        }
    }
    out.into_iter()
        .map(|(mut c, n)| {
            c.values.iter_mut().for_each(|v| *v /= n as f64);
            c
        })
        .collect()
}
