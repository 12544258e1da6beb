//! Three-phase training: probe teacher, local controller pretraining,
//! supervised planner fitting and joint rollout training.
//!
//! Oracle values and gradients that enter the observation or the effort are
//! constants on the tape; rollout losses reach the parameters through the
//! recorded dynamics, with `f` attached as an external node carrying the
//! analytic task gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use shape_numeric::adam::{clip_global_norm, Adam, AdamConfig};
use shape_numeric::{Tape, Tensor, Var};

use crate::dynamics::{step_tape, Mode, PhasePoint, StageContext, StepConfig};
use crate::error::ShapeError;
use crate::memory::{EventSummary, Memory};
use crate::oracle::{Oracle, OracleKind};
use crate::policy::{
    context_features, control_tape, plan_tape, stage_vars, stage_vars_const, Policy, PolicyVars,
};
use crate::shape_loop::{policy_config, run_observed, ShapeConfig};
use crate::tasks::{derive_seed, make_task, Family, Task, TaskOptions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub term: f64,
    pub best: f64,
    pub prog: f64,
    pub ce: f64,
    pub sg: f64,
    pub ctrl: f64,
    pub jr: f64,
    pub port: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { term: 1.0, best: 0.5, prog: 0.10, ce: 0.40, sg: 0.25, ctrl: 1e-3, jr: 5e-4, port: 5e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub k: usize,
    /// Probe radii in task units, cycled over candidates.
    pub radii: Vec<f64>,
    pub lambda_nov: f64,
    pub lambda_risk: f64,
    /// Refine when the best candidate improves by more than this times `1 + |f|`.
    pub improve_rel: f64,
    /// A candidate with novelty above this counts as novel.
    pub novel_threshold: f64,
    /// Random directions screened for the memory-novel slots.
    pub novel_screen: usize,
    pub c_g: f64,
    pub c_p: f64,
    pub escape_force: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: 8,
            radii: vec![0.25, 0.5, 1.0],
            lambda_nov: 0.5,
            lambda_risk: 0.1,
            improve_rel: 0.05,
            novel_threshold: 0.5,
            novel_screen: 16,
            c_g: 1.0,
            c_p: 0.5,
            escape_force: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub hidden: usize,
    pub epochs: usize,
    pub pretrain: usize,
    pub controller_updates: usize,
    pub planner_updates: usize,
    pub batch: usize,
    pub train_rollout: u64,
    pub eval_rollout: u64,
    pub n_eval: usize,
    /// Steps a gradient may travel back through the rollout.
    pub bptt: usize,
    pub lr: f64,
    pub clip: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::for_dim(2)
    }
}

impl TrainSchedule {
    /// Row of the schedule table for the nearest tabled dimension.
    pub fn for_dim(d: usize) -> Self {
        let (hidden, epochs, n_eval) = match d {
            0..=2 => (32, 500, 128),
            3..=20 => (64, 800, 64),
            _ => (128, 1000, 32),
        };
        Self {
            hidden,
            epochs,
            pretrain: 100,
            controller_updates: 2,
            planner_updates: 2,
            batch: 64,
            train_rollout: 128,
            eval_rollout: 500,
            n_eval,
            bptt: 32,
            lr: 1e-3,
            clip: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub family: Family,
    pub dim: usize,
    pub task: TaskOptions,
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub probe: ProbeConfig,
    pub shape: ShapeConfig,
    /// Oracle feeding the dynamics during training rollouts.
    pub oracle: OracleKind,
    pub seed: u64,
    /// Soft mode probabilities inside training rollouts.
    pub soft_modes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let shape = ShapeConfig { early_stop: false, ..ShapeConfig::default() };
        Self {
            family: Family::Multiwell,
            dim: 1,
            task: TaskOptions { wells: 2, ..TaskOptions::default() },
            schedule: TrainSchedule::for_dim(2),
            weights: LossWeights::default(),
            probe: ProbeConfig::default(),
            shape,
            oracle: OracleKind::Exact,
            seed: 0,
            soft_modes: true,
        }
    }
}

/// Probe-teacher output for one stage start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherLabel {
    pub anchor: Vec<f64>,
    pub mode: Mode,
    pub score: f64,
    pub improve: f64,
    /// Unit direction of the most novel candidate.
    pub novel_dir: Vec<f64>,
    pub calls: u64,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn unit_or_none(x: &[f64]) -> Option<Vec<f64>> {
    let n = norm(x);
    (n > 1e-12 && n.is_finite()).then(|| x.iter().map(|v| v / n).collect())
}

fn gaussian<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random unit vector orthogonal to `basis` when there is room.
fn orthogonal_fill<R: Rng>(basis: &[Vec<f64>], d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v = gaussian(d, rng);
        if basis.len() < d {
            for b in basis {
                let c: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= c * bi;
                }
            }
        }
        if let Some(u) = unit_or_none(&v) {
            return u;
        }
    }
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Score probe candidates around `q` and derive the teacher anchor and mode.
/// Each candidate costs one exact value evaluation on the training ledger.
#[allow(clippy::too_many_arguments)]
pub fn probe_teacher<R: Rng>(
    task: &Task,
    q: &[f64],
    p: &[f64],
    f: f64,
    g: &[f64],
    memory: &Memory,
    stalled: bool,
    probe: &ProbeConfig,
    rng: &mut R,
) -> Result<TeacherLabel, ShapeError> {
    let d = q.len();
    let k = probe.k.max(1);
    let (unit, q_max) = (task.unit(), task.q_max());
    let radius = |j: usize| probe.radii[j % probe.radii.len()] * unit;
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
    dirs.extend(unit_or_none(&neg_g));
    if dirs.len() < k {
        dirs.extend(unit_or_none(p));
    }
    // two memory-novel slots chosen among screened random directions
    let mut screened: Vec<(f64, Vec<f64>)> = (0..probe.novel_screen)
        .map(|_| {
            let u = orthogonal_fill(&[], d, rng);
            let c: Vec<f64> = (0..d).map(|i| (q[i] + radius(1) * u[i]).clamp(-q_max, q_max)).collect();
            (memory.novelty(&c), u)
        })
        .collect();
    screened.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, u) in screened.into_iter().take(2) {
        if dirs.len() < k {
            dirs.push(u);
        }
    }
    while dirs.len() < k {
        let u = orthogonal_fill(&dirs, d, rng);
        dirs.push(u);
    }
    let mut cands = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    let mut improves = Vec::with_capacity(k);
    let mut novelties = Vec::with_capacity(k);
    for (j, u) in dirs.iter().enumerate() {
        let c: Vec<f64> = (0..d).map(|i| (q[i] + radius(j) * u[i]).clamp(-q_max, q_max)).collect();
        let improve = f - task.value(&c)?;
        let nov = memory.novelty(&c);
        let risk = c.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / unit;
        scores.push(improve + probe.lambda_nov * nov - probe.lambda_risk * risk);
        improves.push(improve);
        novelties.push(nov);
        cands.push(c);
    }
    let best = first_argmax(&scores);
    let improve = improves[best];
    let mode = if improve > probe.improve_rel * (1.0 + f.abs()) {
        Mode::Refine
    } else if improve <= 0.0 && (stalled || novelties[best] > probe.novel_threshold) {
        Mode::Escape
    } else {
        Mode::Settle
    };
    Ok(TeacherLabel {
        anchor: cands.swap_remove(best),
        mode,
        score: scores[best],
        improve,
        novel_dir: dirs[first_argmax(&novelties)].clone(),
        calls: k as u64,
    })
}

/// `-g - c_g (q - anchor) - c_p p + F_escape`.
pub fn teacher_force(g: &[f64], q: &[f64], p: &[f64], label: &TeacherLabel, probe: &ProbeConfig) -> Vec<f64> {
    (0..q.len())
        .map(|i| {
            let esc = if label.mode == Mode::Escape { probe.escape_force * label.novel_dir[i] } else { 0.0 };
            -g[i] - probe.c_g * (q[i] - label.anchor[i]) - probe.c_p * p[i] + esc
        })
        .collect()
}

/// A labelled stage start collected from a forward rollout.
#[derive(Clone, Debug)]
pub struct StageSample {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    pub features: Vec<f64>,
    /// Planner output at this state (supplies the gains in Phase I).
    pub context: StageContext,
    pub label: TeacherLabel,
    /// Memory force under the teacher's mode.
    pub g_mem: Vec<f64>,
    pub force: Vec<f64>,
    pub unit: f64,
    pub q_max: f64,
}

/// Run the current policy forward and label every stage start.
pub fn collect_stage_samples(
    task: &Task,
    policy: &Policy,
    q0: &[f64],
    cfg: &TrainConfig,
    stream: u64,
    ledger: &mut u64,
) -> Result<Vec<StageSample>, ShapeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task.seed, 40_000 + stream));
    let mut out = Vec::new();
    let mut calls = 0;
    run_observed(
        task,
        policy,
        cfg.oracle,
        cfg.schedule.train_rollout,
        q0,
        stream,
        &cfg.shape,
        &mut |s| {
            let stalled = s.prev_stalled || cfg.shape.stall.is_stalled(norm(&s.sample.g), s.sample.f, norm(&s.x.p), 0.0);
            let label =
                probe_teacher(task, &s.x.q, &s.x.p, s.sample.f, &s.sample.g, s.memory, stalled, &cfg.probe, &mut rng)?;
            calls += label.calls;
            let (_, g_mem) = s.memory.potential(&s.x.q, label.mode, &cfg.shape.memory);
            let force = teacher_force(&s.sample.g, &s.x.q, &s.x.p, &label, &cfg.probe);
            out.push(StageSample {
                q: s.x.q.clone(),
                p: s.x.p.clone(),
                f: s.sample.f,
                g: s.sample.g.clone(),
                features: s.features.to_vec(),
                context: s.context.clone(),
                label,
                g_mem,
                force,
                unit: task.unit(),
                q_max: task.q_max(),
            });
            Ok(())
        },
    )?;
    *ledger += calls;
    Ok(out)
}

fn vec_var(t: &mut Tape, x: &[f64]) -> Var {
    t.constant(Tensor::vector(x.to_vec()))
}

fn param_grads(g: &shape_numeric::tape::Gradients, policy: &Policy, vars: &PolicyVars) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(8);
    for (v, p) in vars.controller.all().iter().zip(policy.controller.params()) {
        out.push(g.get_or_zeros(*v, p));
    }
    for (v, p) in vars.planner.all().iter().zip(policy.planner.params()) {
        out.push(g.get_or_zeros(*v, p));
    }
    out
}

fn add_into(acc: &mut [Tensor], g: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

/// Phase I loss on one stage sample: momentum-rate regression onto the
/// teacher force plus the structure-size penalty at the stage start.
pub fn phase1_loss(
    policy: &Policy,
    sample: &StageSample,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor>), ShapeError> {
    let mut t = Tape::new();
    let vars = policy.register(&mut t, true, false);
    let q = vec_var(&mut t, &sample.q);
    let p = vec_var(&mut t, &sample.p);
    let feats = vec_var(&mut t, &sample.features);
    let ctx = StageContext { anchor: sample.label.anchor.clone(), mode: sample.label.mode, ..sample.context.clone() };
    let stage = stage_vars_const(&mut t, &ctx)?;
    let ops = control_tape(&mut t, &policy.config, &vars, q, p, feats, &stage, sample.unit)?;
    let effort: Vec<f64> = sample.g.iter().zip(&sample.g_mem).map(|(a, b)| a + b).collect();
    let effort = vec_var(&mut t, &effort);
    let kappa = t.add(stage.kappa_bar, ops.kappa_loc)?;
    let step_cfg = StepConfig { h: cfg.shape.h, p_max: cfg.shape.p_max, q_max: sample.q_max };
    let st = step_tape(&mut t, q, p, &ops, stage.alpha_j, stage.alpha_r, kappa, stage.anchor, effort, &step_cfg)?;
    let dp = t.sub(st.p, p)?;
    let rate = t.scale(dp, 1.0 / cfg.shape.h);
    let target = vec_var(&mut t, &sample.force);
    let diff = t.sub(rate, target)?;
    let reg = t.dot(diff, diff)?;
    let nw = t.norm2(st.omega_v)?;
    let nd = t.norm2(st.damp_v)?;
    let s = t.add(nw, nd)?;
    let s = t.scale(s, cfg.weights.jr);
    let loss = t.add(reg, s)?;
    let value = t.scalar_value(loss);
    if !value.is_finite() {
        return Err(ShapeError::NonFinite("phase I loss"));
    }
    let g = t.backward(loss)?;
    Ok((value, param_grads(&g, policy, &vars)))
}

/// `lambda_ce CE(logits, label) + lambda_sg Huber(anchor - teacher anchor)`
/// on an existing tape.
fn plan_sup_terms(
    t: &mut Tape,
    logits: Var,
    anchor: Var,
    label: &TeacherLabel,
    w: &LossWeights,
) -> Result<Var, ShapeError> {
    let lse = t.logsumexp(logits);
    let picked = t.slice(logits, label.mode.index(), 1)?;
    let ce = t.sub(lse, picked)?;
    let target = vec_var(t, &label.anchor);
    let diff = t.sub(anchor, target)?;
    let hub = t.huber(diff, 1.0);
    let hub = t.sum(hub);
    let ce = t.scale(ce, w.ce);
    let hub = t.scale(hub, w.sg);
    Ok(t.add(ce, hub)?)
}

/// Phase II loss on one stage sample (planner only).
pub fn phase2_loss(
    policy: &Policy,
    sample: &StageSample,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor>), ShapeError> {
    let mut t = Tape::new();
    let vars = policy.register(&mut t, false, true);
    let q = vec_var(&mut t, &sample.q);
    let p = vec_var(&mut t, &sample.p);
    let feats = vec_var(&mut t, &sample.features);
    let out = plan_tape(&mut t, &policy.config, &vars, q, p, feats, sample.unit, sample.q_max)?;
    let loss = plan_sup_terms(&mut t, out.logits, out.anchor, &sample.label, &cfg.weights)?;
    let value = t.scalar_value(loss);
    if !value.is_finite() {
        return Err(ShapeError::NonFinite("phase II loss"));
    }
    let g = t.backward(loss)?;
    Ok((value, param_grads(&g, policy, &vars)))
}

/// Per-rollout loss components (already weighted in `total`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub term: f64,
    pub best: f64,
    pub prog: f64,
    pub plan_sup: f64,
    pub ctrl: f64,
    pub jr: f64,
    pub port: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.term += o.term;
        self.best += o.best;
        self.prog += o.prog;
        self.plan_sup += o.plan_sup;
        self.ctrl += o.ctrl;
        self.jr += o.jr;
        self.port += o.port;
        self.total += o.total;
    }

    fn scale(&mut self, s: f64) {
        for x in [
            &mut self.term,
            &mut self.best,
            &mut self.prog,
            &mut self.plan_sup,
            &mut self.ctrl,
            &mut self.jr,
            &mut self.port,
            &mut self.total,
        ] {
            *x *= s;
        }
    }
}

/// Result of one recorded rollout.
#[derive(Clone, Debug)]
pub struct RolloutLoss {
    pub parts: LossParts,
    pub grads: Vec<Tensor>,
    /// Queried points in order, starting with the initial one.
    pub queried: Vec<Vec<f64>>,
    pub probe_calls: u64,
}

/// Record one rollout on a tape and differentiate the Phase III objective.
/// Returns `None` when the rollout diverged.
pub fn rollout_loss(
    policy: &Policy,
    task: &Task,
    q0: &[f64],
    stream: u64,
    cfg: &TrainConfig,
) -> Result<Option<RolloutLoss>, ShapeError> {
    let w = &cfg.weights;
    let sc = &cfg.shape;
    let budget = cfg.schedule.train_rollout;
    let mut oracle = Oracle::new(cfg.oracle, budget, task.seed, stream)?;
    let mut memory = Memory::new(task.dim, task.half_width(), &sc.memory);
    if memory.readout_len() != policy.config.readout_len {
        return Err(ShapeError::InvalidConfig("policy readout length does not match memory".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task.seed, 40_000 + stream));
    let (unit, q_max) = (task.unit(), task.q_max());
    let desc = task.descriptor();
    let step_cfg = StepConfig { h: sc.h, p_max: sc.p_max, q_max };
    if !oracle.can_query() {
        return Ok(None);
    }
    let mut t = Tape::new();
    let vars = policy.register(&mut t, true, true);
    let mut x = PhasePoint::at_rest(q0.iter().map(|v| v.clamp(-q_max, q_max)).collect());
    let mut qv = vec_var(&mut t, &x.q);
    let mut pv = vec_var(&mut t, &x.p);
    let mut sample = oracle.query(task, &x.q)?;
    let (f0, _) = task.value_grad(&x.q)?;
    let norm0 = 1.0 / (f0.abs() + 1.0);
    let mut queried = vec![x.q.clone()];
    // per queried point after the start: the q node and true (f, g)
    let mut visits: Vec<(Var, f64, Vec<f64>)> = Vec::new();
    let mut best_f = sample.f;
    let mut prog_terms = Vec::new();
    let mut ctrl_terms = Vec::new();
    let mut jr_terms = Vec::new();
    let mut port_terms = Vec::new();
    let mut sup_terms = Vec::new();
    let mut probe_calls = 0;
    let mut prev_stalled = false;
    let mut settle_stalls = 0;
    let mut since_cut = 0;
    'stages: while oracle.can_query() {
        let features = context_features(&sample.g, sample.f, &desc, &memory.read(&x.q));
        let fv = vec_var(&mut t, &features);
        let out = plan_tape(&mut t, &policy.config, &vars, qv, pv, fv, unit, q_max)?;
        let logits = t.value(out.logits).data().to_vec();
        let mode = Mode::argmax(&logits);
        let stalled_now = prev_stalled || sc.stall.is_stalled(norm(&sample.g), sample.f, norm(&x.p), 0.0);
        let label =
            probe_teacher(task, &x.q, &x.p, sample.f, &sample.g, &memory, stalled_now, &cfg.probe, &mut rng)?;
        probe_calls += label.calls;
        sup_terms.push(plan_sup_terms(&mut t, out.logits, out.anchor, &label, w)?);
        let stage = stage_vars(&mut t, &out, mode, cfg.soft_modes)?;
        let first = visits.len();
        let best_at_start = best_f;
        let mut stalled = false;
        for _ in 0..sc.event_horizon.max(1) {
            if !oracle.can_query() {
                break;
            }
            if since_cut == cfg.schedule.bptt.max(1) {
                qv = t.detach(qv);
                pv = t.detach(pv);
                since_cut = 0;
            }
            let features = context_features(&sample.g, sample.f, &desc, &memory.read(&x.q));
            let fv = vec_var(&mut t, &features);
            let ops = control_tape(&mut t, &policy.config, &vars, qv, pv, fv, &stage, unit)?;
            let (_, g_mem) = memory.potential(&x.q, mode, &sc.memory);
            let effort: Vec<f64> = sample.g.iter().zip(&g_mem).map(|(a, b)| a + b).collect();
            let ev = vec_var(&mut t, &effort);
            let kappa = t.add(stage.kappa_bar, ops.kappa_loc)?;
            let st = step_tape(&mut t, qv, pv, &ops, stage.alpha_j, stage.alpha_r, kappa, stage.anchor, ev, &step_cfg)?;
            let q_next = t.value(st.q).data().to_vec();
            let p_next = t.value(st.p).data().to_vec();
            if !q_next.iter().chain(&p_next).all(|v| v.is_finite()) {
                return Ok(None);
            }
            let queried_pair = oracle
                .query(task, &q_next)
                .map_err(ShapeError::from)
                .and_then(|s| Ok((s, task.value_grad(&q_next)?)));
            let (s, (ft, gt)) = match queried_pair {
                Ok(v) => v,
                Err(e) if e.is_numerical() => return Ok(None),
                Err(e) => return Err(e),
            };
            // progress toward the stage anchor
            let rel = t.sub(st.q, stage.anchor)?;
            prog_terms.push(t.norm2(rel)?);
            let u2 = t.dot(st.u_port, st.u_port)?;
            ctrl_terms.push(u2);
            let nw = t.norm2(st.omega_v)?;
            let nd = t.norm2(st.damp_v)?;
            let nu = t.norm2(st.u_port)?;
            let nu = t.scale(nu, 0.25);
            let jr = t.add(nw, nd)?;
            jr_terms.push(t.add(jr, nu)?);
            let pw = t.dot(st.y, st.u_port)?;
            let pw = t.relu(pw);
            port_terms.push(t.hadamard(pw, pw)?);
            visits.push((st.q, ft, gt));
            qv = st.q;
            pv = st.p;
            since_cut += 1;
            x = PhasePoint { q: q_next, p: p_next };
            sample = s;
            queried.push(x.q.clone());
            if sample.f < best_f {
                best_f = sample.f;
            }
            if sc.stall.is_stalled(norm(&sample.g), sample.f, norm(&x.p), best_at_start - best_f) {
                stalled = true;
                break;
            }
        }
        let trigger = mode == Mode::Escape || stalled;
        memory.write(&EventSummary { q: x.q.clone(), f: sample.f, g_norm: norm(&sample.g), mode, stalled }, trigger);
        prev_stalled = stalled;
        settle_stalls = if stalled && mode == Mode::Settle { settle_stalls + 1 } else { 0 };
        if sc.early_stop && settle_stalls >= 2 {
            break 'stages;
        }
        if visits.len() == first {
            break;
        }
    }
    if visits.is_empty() {
        return Ok(None);
    }
    let mean = |t: &mut Tape, xs: &[Var]| -> Result<Var, ShapeError> {
        let c = t.concat(xs);
        let s = t.sum(c);
        Ok(t.scale(s, 1.0 / xs.len() as f64))
    };
    let (last_q, last_f, last_g) = visits.last().cloned().unwrap();
    let term = t.external(last_q, last_f * norm0, Tensor::vector(last_g.iter().map(|v| v * norm0).collect()))?;
    // best over the start and every visited point; the start carries no gradient
    let mut bi = None;
    let mut bf = f0;
    for (i, v) in visits.iter().enumerate() {
        if v.1 < bf {
            bf = v.1;
            bi = Some(i);
        }
    }
    let best = match bi {
        Some(i) => {
            let (bq, bfv, bg) = visits[i].clone();
            t.external(bq, bfv * norm0, Tensor::vector(bg.iter().map(|v| v * norm0).collect()))?
        }
        None => t.scalar(f0 * norm0),
    };
    let prog = mean(&mut t, &prog_terms)?;
    let sup = mean(&mut t, &sup_terms)?;
    let ctrl = mean(&mut t, &ctrl_terms)?;
    let jr = mean(&mut t, &jr_terms)?;
    let port = mean(&mut t, &port_terms)?;
    let mut parts = LossParts {
        term: t.scalar_value(term),
        best: t.scalar_value(best),
        prog: t.scalar_value(prog),
        plan_sup: t.scalar_value(sup),
        ctrl: t.scalar_value(ctrl),
        jr: t.scalar_value(jr),
        port: t.scalar_value(port),
        total: 0.0,
    };
    let terms = [
        t.scale(term, w.term),
        t.scale(best, w.best),
        t.scale(prog, w.prog),
        sup,
        t.scale(ctrl, w.ctrl),
        t.scale(jr, w.jr),
        t.scale(port, w.port),
    ];
    let all = t.concat(&terms);
    let total = t.sum(all);
    parts.total = t.scalar_value(total);
    if !parts.total.is_finite() {
        return Ok(None);
    }
    let g = t.backward(total)?;
    Ok(Some(RolloutLoss { parts, grads: param_grads(&g, policy, &vars), queried, probe_calls }))
}

/// Which objective a log record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Local,
    Planner,
    Rollout,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Local => "local",
            Phase::Planner => "planner",
            Phase::Rollout => "rollout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Zero for pretraining, then the 1-based epoch.
    pub epoch: usize,
    pub update: usize,
    pub phase: Phase,
    pub parts: LossParts,
    pub grad_norm: f64,
}

/// Stateful trainer holding the policy and both optimizer states.
pub struct Trainer {
    pub policy: Policy,
    pub config: TrainConfig,
    pub log: Vec<LossRecord>,
    /// Oracle calls spent by the probe teacher (training ledger only).
    pub probe_calls: u64,
    adam_c: Adam,
    adam_p: Adam,
    rng: ChaCha8Rng,
    tasks_drawn: u64,
    updates: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, ShapeError> {
        let probe = make_task(config.family, config.dim, config.seed, &config.task)?;
        let pc = policy_config(&probe, config.schedule.hidden, &config.shape.memory);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 77));
        let policy = Policy::new(pc, &mut rng);
        Ok(Self::with_policy(policy, config, rng))
    }

    pub fn with_policy(policy: Policy, config: TrainConfig, rng: ChaCha8Rng) -> Self {
        let acfg = AdamConfig { lr: config.schedule.lr, ..AdamConfig::default() };
        let adam_c = Adam::new(acfg, policy.controller.params());
        let adam_p = Adam::new(acfg, policy.planner.params());
        Self { policy, config, log: Vec::new(), probe_calls: 0, adam_c, adam_p, rng, tasks_drawn: 0, updates: 0 }
    }

    /// Fresh training task and start; task seeds never collide with the
    /// evaluation seeds derived from other streams.
    pub fn draw_task(&mut self) -> Result<(Task, Vec<f64>, u64), ShapeError> {
        self.tasks_drawn += 1;
        let seed = derive_seed(self.config.seed, 1_000_000 + self.tasks_drawn);
        let task = make_task(self.config.family, self.config.dim, seed, &self.config.task)?;
        let q0 = task.sample_start(&mut self.rng);
        Ok((task, q0, self.tasks_drawn))
    }

    fn apply(&mut self, mut grads: Vec<Tensor>, controller: bool, planner: bool) -> Result<f64, ShapeError> {
        let gn = clip_global_norm(&mut grads, self.config.schedule.clip);
        let pg = grads.split_off(4);
        if controller {
            let mut ps = self.policy.controller.params_mut();
            self.adam_c.update(&mut ps, &grads)?;
        }
        if planner {
            let mut ps = self.policy.planner.params_mut();
            self.adam_p.update(&mut ps, &pg)?;
        }
        Ok(gn)
    }

    /// Labelled stage samples from fresh rollouts, `batch` of them.
    pub fn stage_batch(&mut self) -> Result<Vec<StageSample>, ShapeError> {
        let want = self.config.schedule.batch.max(1);
        let mut samples = Vec::new();
        while samples.len() < want {
            let (task, q0, stream) = self.draw_task()?;
            let mut ledger = 0;
            samples.extend(collect_stage_samples(&task, &self.policy, &q0, &self.config, stream, &mut ledger)?);
            self.probe_calls += ledger;
        }
        samples.shuffle(&mut self.rng);
        samples.truncate(want);
        Ok(samples)
    }

    fn batched<F>(&self, samples: &[StageSample], f: F) -> Result<(f64, Vec<Tensor>), ShapeError>
    where
        F: Fn(&Policy, &StageSample, &TrainConfig) -> Result<(f64, Vec<Tensor>), ShapeError> + Sync,
    {
        let results: Vec<_> = samples.par_iter().map(|s| f(&self.policy, s, &self.config)).collect();
        let mut total = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for r in results {
            let (l, g) = r?;
            total += l;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => add_into(a, &g),
            }
        }
        let n = samples.len().max(1) as f64;
        let mut acc = acc.unwrap_or_default();
        for g in acc.iter_mut() {
            for x in g.data_mut() {
                *x /= n;
            }
        }
        Ok((total / n, acc))
    }

    /// One Phase I update on `samples`; returns the batch loss before the step.
    pub fn phase1_update(&mut self, samples: &[StageSample], epoch: usize) -> Result<f64, ShapeError> {
        let (loss, grads) = self.batched(samples, phase1_loss)?;
        let gn = self.apply(grads, true, false)?;
        self.record(epoch, Phase::Local, LossParts { total: loss, ..LossParts::default() }, gn);
        Ok(loss)
    }

    /// One Phase II update on `samples`.
    pub fn phase2_update(&mut self, samples: &[StageSample], epoch: usize) -> Result<f64, ShapeError> {
        let (loss, grads) = self.batched(samples, phase2_loss)?;
        let gn = self.apply(grads, false, true)?;
        self.record(epoch, Phase::Planner, LossParts { plan_sup: loss, total: loss, ..LossParts::default() }, gn);
        Ok(loss)
    }

    /// Batch-mean Phase III loss and gradient on fresh tasks, without stepping.
    pub fn phase3_batch(&mut self) -> Result<(LossParts, Vec<Tensor>), ShapeError> {
        let mut jobs = Vec::with_capacity(self.config.schedule.batch);
        for _ in 0..self.config.schedule.batch.max(1) {
            jobs.push(self.draw_task()?);
        }
        let results: Vec<_> = jobs
            .par_iter()
            .map(|(task, q0, stream)| rollout_loss(&self.policy, task, q0, *stream, &self.config))
            .collect();
        let mut parts = LossParts::default();
        let mut acc: Option<Vec<Tensor>> = None;
        let mut n = 0usize;
        for r in results {
            if let Some(rl) = r? {
                parts.add(&rl.parts);
                self.probe_calls += rl.probe_calls;
                match acc.as_mut() {
                    None => acc = Some(rl.grads),
                    Some(a) => add_into(a, &rl.grads),
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(ShapeError::NonFinite("every training rollout diverged"));
        }
        parts.scale(1.0 / n as f64);
        let mut acc = acc.unwrap();
        for g in acc.iter_mut() {
            for x in g.data_mut() {
                *x /= n as f64;
            }
        }
        Ok((parts, acc))
    }

    /// One Phase III update on both networks.
    pub fn phase3_update(&mut self, epoch: usize) -> Result<LossParts, ShapeError> {
        let (parts, grads) = self.phase3_batch()?;
        let gn = self.apply(grads, true, true)?;
        self.record(epoch, Phase::Rollout, parts, gn);
        Ok(parts)
    }

    fn record(&mut self, epoch: usize, phase: Phase, parts: LossParts, grad_norm: f64) {
        self.updates += 1;
        self.log.push(LossRecord { epoch, update: self.updates, phase, parts, grad_norm });
    }

    /// Phase I then Phase II pretraining, `pretrain` updates each.
    pub fn pretrain(&mut self) -> Result<(), ShapeError> {
        for _ in 0..self.config.schedule.pretrain {
            let batch = self.stage_batch()?;
            self.phase1_update(&batch, 0)?;
        }
        for _ in 0..self.config.schedule.pretrain {
            let batch = self.stage_batch()?;
            self.phase2_update(&batch, 0)?;
        }
        Ok(())
    }

    /// One epoch: controller updates on the local objective, then joint
    /// rollout updates.
    pub fn epoch(&mut self, epoch: usize) -> Result<(), ShapeError> {
        for _ in 0..self.config.schedule.controller_updates {
            let batch = self.stage_batch()?;
            self.phase1_update(&batch, epoch)?;
        }
        for _ in 0..self.config.schedule.planner_updates {
            self.phase3_update(epoch)?;
        }
        Ok(())
    }

    /// Full schedule; `on_epoch` sees the trainer after every epoch.
    pub fn train(&mut self, on_epoch: &mut dyn FnMut(usize, &Trainer)) -> Result<(), ShapeError> {
        self.pretrain()?;
        for e in 1..=self.config.schedule.epochs {
            self.epoch(e)?;
            on_epoch(e, self);
        }
        Ok(())
    }
}
