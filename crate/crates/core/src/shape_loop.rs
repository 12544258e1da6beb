//! The fixed-budget optimization loop.
//!
//! Every stage the planner proposes a context from the current state and
//! memory; the controller then drives up to `event_horizon` semi-implicit
//! steps, each followed by exactly one oracle query at the new point. The
//! best queried point is kept; memory is written at stage end when the mode
//! is escape or a stall was detected.

use serde::{Deserialize, Serialize};

use crate::dynamics::{step_semi_implicit, Mode, PhasePoint, StageContext, StepConfig, P_MAX};
use crate::error::ShapeError;
use crate::memory::{EventSummary, Memory, MemoryConfig};
use crate::oracle::{Oracle, OracleKind, OracleSample};
use crate::policy::{context_features, control, plan, Policy, EVENT_HORIZON};
use crate::tasks::Task;

pub const FLAG_STAGE_START: u8 = 1;
pub const FLAG_STALL: u8 = 2;
pub const FLAG_WRITE: u8 = 4;
pub const FLAG_DIVERGED: u8 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StallConfig {
    pub grad_rel: f64,
    pub momentum: f64,
    pub improvement: f64,
}

impl Default for StallConfig {
    fn default() -> Self {
        Self { grad_rel: 1e-3, momentum: 1e-3, improvement: 1e-6 }
    }
}

impl StallConfig {
    /// Small gradient, small momentum and no best-so-far progress.
    pub fn is_stalled(&self, g_norm: f64, f: f64, p_norm: f64, improvement: f64) -> bool {
        g_norm < self.grad_rel * (1.0 + f.abs()) && p_norm < self.momentum && improvement < self.improvement
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeConfig {
    pub h: f64,
    pub event_horizon: usize,
    pub p_max: f64,
    pub memory: MemoryConfig,
    pub early_stop: bool,
    pub stall: StallConfig,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            h: crate::dynamics::DEFAULT_STEP,
            event_horizon: EVENT_HORIZON,
            p_max: P_MAX,
            memory: MemoryConfig::default(),
            early_stop: true,
            stall: StallConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub stage: usize,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// Oracle value at `q` (an estimate for noisy or zeroth-order oracles).
    pub f: f64,
    pub g_norm: f64,
    pub calls: u64,
    pub best_f: f64,
    pub mode: Mode,
    pub flags: u8,
    /// Shaped Hamiltonian under the step's structure operators.
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub first_row: usize,
    pub context: StageContext,
    pub logits: Vec<f64>,
    pub stalled: bool,
    pub wrote: bool,
    pub forced_settle: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub rows: Vec<TraceRow>,
    pub stages: Vec<StageRecord>,
    pub best_q: Vec<f64>,
    pub best_f: f64,
    pub budget_total: u64,
    pub calls_used: u64,
    pub early_stop: bool,
    /// Budget left unspent at termination.
    pub shortfall: u64,
    pub divergences: usize,
    pub oracle: String,
}

struct Best {
    q: Vec<f64>,
    sample: OracleSample,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// State handed to a stage observer right after the planner ran.
pub struct StageStart<'a> {
    pub stage: usize,
    pub x: &'a PhasePoint,
    pub sample: &'a OracleSample,
    pub memory: &'a Memory,
    pub context: &'a StageContext,
    /// Context features the planner saw.
    pub features: &'a [f64],
    /// Whether the previous stage ended in a stall.
    pub prev_stalled: bool,
}

/// Run SHAPE on `task` from `q0` with a budget of `budget` oracle calls.
/// `stream` selects the oracle noise stream.
pub fn run(
    task: &Task,
    policy: &Policy,
    oracle_kind: OracleKind,
    budget: u64,
    q0: &[f64],
    stream: u64,
    cfg: &ShapeConfig,
) -> Result<RolloutTrace, ShapeError> {
    run_observed(task, policy, oracle_kind, budget, q0, stream, cfg, &mut |_| Ok(()))
}

/// [`run`] with a callback at every stage start.
#[allow(clippy::too_many_arguments)]
pub fn run_observed(
    task: &Task,
    policy: &Policy,
    oracle_kind: OracleKind,
    budget: u64,
    q0: &[f64],
    stream: u64,
    cfg: &ShapeConfig,
    observer: &mut dyn FnMut(&StageStart) -> Result<(), ShapeError>,
) -> Result<RolloutTrace, ShapeError> {
    if policy.config.dim != task.dim || q0.len() != task.dim {
        return Err(ShapeError::InvalidConfig(format!(
            "policy dimension {}, task dimension {}, start dimension {}",
            policy.config.dim,
            task.dim,
            q0.len()
        )));
    }
    let mut memory = Memory::new(task.dim, task.half_width(), &cfg.memory);
    if memory.readout_len() != policy.config.readout_len {
        return Err(ShapeError::InvalidConfig(format!(
            "policy expects a memory readout of length {}, memory provides {}",
            policy.config.readout_len,
            memory.readout_len()
        )));
    }
    let mut oracle = Oracle::new(oracle_kind, budget, task.seed, stream)?;
    let step_cfg = StepConfig { h: cfg.h, p_max: cfg.p_max, q_max: task.q_max() };
    let (unit, q_max) = (task.unit(), task.q_max());
    let desc = task.descriptor();
    let mut trace = RolloutTrace {
        rows: Vec::new(),
        stages: Vec::new(),
        best_q: q0.to_vec(),
        best_f: f64::INFINITY,
        budget_total: budget,
        calls_used: 0,
        early_stop: false,
        shortfall: budget,
        divergences: 0,
        oracle: oracle_kind.tag().to_string(),
    };
    if !oracle.can_query() {
        return Ok(trace);
    }
    let mut x = PhasePoint::at_rest(q0.iter().map(|v| v.clamp(-q_max, q_max)).collect());
    let mut sample = oracle.query(task, &x.q)?;
    let mut best = Best { q: x.q.clone(), sample: sample.clone() };
    trace.rows.push(TraceRow {
        step: 0,
        stage: 0,
        q: x.q.clone(),
        p: x.p.clone(),
        f: sample.f,
        g_norm: norm(&sample.g),
        calls: oracle.budget.used,
        best_f: sample.f,
        mode: Mode::Settle,
        flags: 0,
        energy: sample.f,
    });
    let mut settle_stalls = 0;
    let mut prev_stalled = false;
    let mut force_settle = false;
    let mut divergence_streak = 0;
    let mut stage = 0;
    'stages: while oracle.can_query() {
        let features = context_features(&sample.g, sample.f, &desc, &memory.read(&x.q));
        let (mut ctx, logits) = plan(policy, &x.q, &x.p, &features, unit, q_max)?;
        let forced = force_settle;
        if force_settle {
            ctx.mode = Mode::Settle;
            force_settle = false;
        }
        let horizon = cfg.event_horizon.max(1);
        ctx.horizon = horizon;
        observer(&StageStart {
            stage,
            x: &x,
            sample: &sample,
            memory: &memory,
            context: &ctx,
            features: &features,
            prev_stalled,
        })?;
        let first_row = trace.rows.len();
        let best_at_start = best.sample.f;
        let mut stalled = false;
        let mut diverged = false;
        for j in 0..horizon {
            if !oracle.can_query() {
                break;
            }
            let features = context_features(&sample.g, sample.f, &desc, &memory.read(&x.q));
            let outcome = (|| -> Result<_, ShapeError> {
                let ops = control(policy, &x.q, &x.p, &features, &ctx, unit)?;
                let kappa = ctx.kappa_bar + ops.kappa_loc;
                let (_, g_mem) = memory.potential(&x.q, ctx.mode, &cfg.memory);
                let effort: Vec<f64> = (0..task.dim)
                    .map(|i| sample.g[i] + kappa * (x.q[i] - ctx.anchor[i]) + g_mem[i])
                    .collect();
                let (aj, ar) = crate::dynamics::mode_scale(ctx.alpha_j_bar, ctx.alpha_r_bar, ctx.mode);
                let out = step_semi_implicit(&x, &ops, aj, ar, &effort, &step_cfg)?;
                let next = out.next;
                let s = oracle.query(task, &next.q)?;
                if !s.f.is_finite() || !s.g.iter().all(|v| v.is_finite()) {
                    return Err(ShapeError::NonFinite("oracle sample"));
                }
                let (u_next, _) = memory.potential(&next.q, ctx.mode, &cfg.memory);
                let spring: f64 =
                    0.5 * kappa * next.q.iter().zip(&ctx.anchor).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let energy = s.f + spring + u_next + ops.kinetic(&next.p);
                Ok((next, s, energy))
            })();
            let (next, s, energy) = match outcome {
                Ok(v) => v,
                Err(e) if e.is_numerical() => {
                    x = PhasePoint::at_rest(best.q.clone());
                    sample = best.sample.clone();
                    force_settle = true;
                    diverged = true;
                    trace.divergences += 1;
                    if let Some(last) = trace.rows.last_mut() {
                        last.flags |= FLAG_DIVERGED;
                    }
                    break;
                }
                Err(e) => return Err(e),
            };
            x = next;
            sample = s;
            if sample.f < best.sample.f {
                best = Best { q: x.q.clone(), sample: sample.clone() };
            }
            let g_norm = norm(&sample.g);
            trace.rows.push(TraceRow {
                step: trace.rows.len(),
                stage,
                q: x.q.clone(),
                p: x.p.clone(),
                f: sample.f,
                g_norm,
                calls: oracle.budget.used,
                best_f: best.sample.f,
                mode: ctx.mode,
                flags: if j == 0 { FLAG_STAGE_START } else { 0 },
                energy,
            });
            if cfg.stall.is_stalled(g_norm, sample.f, norm(&x.p), best_at_start - best.sample.f) {
                stalled = true;
                if let Some(last) = trace.rows.last_mut() {
                    last.flags |= FLAG_STALL;
                }
                break;
            }
        }
        let trigger = !diverged && (ctx.mode == Mode::Escape || stalled);
        memory.write(
            &EventSummary { q: x.q.clone(), f: sample.f, g_norm: norm(&sample.g), mode: ctx.mode, stalled },
            trigger,
        );
        if trigger && trace.rows.len() > first_row {
            if let Some(last) = trace.rows.last_mut() {
                last.flags |= FLAG_WRITE;
            }
        }
        trace.stages.push(StageRecord {
            stage,
            first_row,
            context: ctx.clone(),
            logits,
            stalled,
            wrote: trigger,
            forced_settle: forced,
        });
        prev_stalled = stalled;
        settle_stalls = if stalled && ctx.mode == Mode::Settle { settle_stalls + 1 } else { 0 };
        stage += 1;
        if cfg.early_stop && settle_stalls >= 2 {
            trace.early_stop = true;
            break 'stages;
        }
        divergence_streak = if diverged { divergence_streak + 1 } else { 0 };
        if divergence_streak > 10 || (trace.rows.len() == first_row && !diverged) {
            break;
        }
    }
    trace.best_q = best.q;
    trace.best_f = best.sample.f;
    trace.calls_used = oracle.budget.used;
    trace.shortfall = oracle.budget.remaining();
    Ok(trace)
}

/// Policy shape matching `task` under memory configuration `memory`.
pub fn policy_config(task: &Task, hidden: usize, memory: &MemoryConfig) -> crate::policy::PolicyConfig {
    let readout = Memory::new(task.dim, task.half_width(), memory).readout_len();
    crate::policy::PolicyConfig::new(task.dim, hidden, readout)
}
