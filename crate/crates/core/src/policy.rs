//! Planner and local controller networks and their output heads.
//!
//! Both networks are two-layer MLPs. The controller maps the step
//! observation plus the current stage action to the structure operators;
//! the planner maps the stage-start context to an anchor, mode logits and
//! stage gains. Heads are evaluated on a [`Tape`] so the same code serves
//! rollouts and training.

use rand::Rng;
use serde::{Deserialize, Serialize};
use shape_numeric::mlp::forward_tape;
use shape_numeric::{Checkpoint, Mlp, MlpVars, NumericError, Tape, Tensor, Var};

use crate::dynamics::{Mode, OpsVars, StageContext, StructureOps};
use crate::error::ShapeError;
use crate::tasks::DESCRIPTOR_LEN;

pub const M_MIN: f64 = 0.1;
pub const U_MAX: f64 = 5.0;
pub const KAPPA_FLOOR: f64 = 0.1;
pub const P_SCALE: f64 = 5.0;
pub const EVENT_HORIZON: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub dim: usize,
    pub rank: usize,
    pub hidden: usize,
    pub readout_len: usize,
    pub trust_radius: f64,
}

impl PolicyConfig {
    /// Rank 4 up to d = 20, 8 beyond.
    pub fn new(dim: usize, hidden: usize, readout_len: usize) -> Self {
        Self { dim, rank: if dim <= 20 { 4 } else { 8 }, hidden, readout_len, trust_radius: 1.0 }
    }

    fn shared_len(&self) -> usize {
        self.dim + 2 + DESCRIPTOR_LEN + self.readout_len
    }

    pub fn controller_input_len(&self) -> usize {
        2 * self.dim + self.shared_len() + self.dim + 3 + 3
    }

    pub fn controller_output_len(&self) -> usize {
        4 * self.dim + 1 + 3 * self.dim * self.rank
    }

    pub fn planner_input_len(&self) -> usize {
        2 * self.dim + self.shared_len()
    }

    pub fn planner_output_len(&self) -> usize {
        3 + self.dim + 4
    }
}

/// Signed logarithm used to squash unbounded scalar features.
pub fn slog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

/// Observation features that carry no gradient: oracle gradient and value,
/// task descriptor and squashed memory readout.
pub fn context_features(g: &[f64], f: f64, descriptor: &[f64], readout: &[f64]) -> Vec<f64> {
    let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out: Vec<f64> = g.iter().map(|x| x / (1.0 + gn)).collect();
    out.push(slog(f));
    out.push(gn.ln_1p());
    out.extend_from_slice(descriptor);
    for (i, &r) in readout.iter().enumerate() {
        out.push(match i % 4 {
            0 => r,
            2 => r.max(0.0).ln_1p(),
            _ => slog(r),
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub controller: Mlp,
    pub planner: Mlp,
}

/// Tape handles for both networks.
#[derive(Clone, Copy, Debug)]
pub struct PolicyVars {
    pub controller: MlpVars,
    pub planner: MlpVars,
}

/// Planner heads on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PlannerOut {
    pub logits: Var,
    pub anchor: Var,
    pub alpha_j_bar: Var,
    pub alpha_r_bar: Var,
    pub kappa_bar: Var,
}

/// Stage quantities fed to every step of the stage.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub anchor: Var,
    pub alpha_j: Var,
    pub alpha_r: Var,
    pub kappa_bar: Var,
    /// Mode one-hot (or soft probabilities during training).
    pub mode_features: Var,
    pub alpha_j_bar: Var,
    pub alpha_r_bar: Var,
}

impl Policy {
    pub fn new<R: Rng>(config: PolicyConfig, rng: &mut R) -> Self {
        let controller = Mlp::init(config.controller_input_len(), config.hidden, config.controller_output_len(), rng);
        let planner = Mlp::init(config.planner_input_len(), config.hidden, config.planner_output_len(), rng);
        Self { config, controller, planner }
    }

    /// All weights and biases zero.
    pub fn zeros(config: PolicyConfig) -> Self {
        let controller = Mlp::zeros(config.controller_input_len(), config.hidden, config.controller_output_len());
        let planner = Mlp::zeros(config.planner_input_len(), config.hidden, config.planner_output_len());
        Self { config, controller, planner }
    }

    pub fn register(&self, t: &mut Tape, train_controller: bool, train_planner: bool) -> PolicyVars {
        let controller =
            if train_controller { self.controller.register(t) } else { self.controller.register_frozen(t) };
        let planner = if train_planner { self.planner.register(t) } else { self.planner.register_frozen(t) };
        PolicyVars { controller, planner }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let c = &self.config;
        ck.push_meta("dim", c.dim);
        ck.push_meta("rank", c.rank);
        ck.push_meta("hidden", c.hidden);
        ck.push_meta("readout_len", c.readout_len);
        ck.push_meta("trust_radius", format!("{:.16e}", c.trust_radius));
        for (n, t) in self.controller.named("psi.controller") {
            ck.push(n, t);
        }
        for (n, t) in self.planner.named("phi.planner") {
            ck.push(n, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ShapeError> {
        let meta = |k: &str| -> Result<String, ShapeError> {
            ck.meta(k).map(str::to_string).ok_or_else(|| ShapeError::InvalidConfig(format!("checkpoint lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize, ShapeError> {
            meta(k)?.parse().map_err(|_| ShapeError::InvalidConfig(format!("checkpoint field `{k}` is not an integer")))
        };
        let config = PolicyConfig {
            dim: num("dim")?,
            rank: num("rank")?,
            hidden: num("hidden")?,
            readout_len: num("readout_len")?,
            trust_radius: meta("trust_radius")?
                .parse()
                .map_err(|_| ShapeError::InvalidConfig("bad trust_radius".into()))?,
        };
        let mut p = Policy::zeros(config);
        p.controller.load_named("psi.controller", |n| ck.get(n).cloned())?;
        p.planner.load_named("phi.planner", |n| ck.get(n).cloned())?;
        Ok(p)
    }
}

/// Planner forward pass. `features` is the constant part of the context,
/// `q0`/`p0` the stage-start state.
pub fn plan_tape(
    t: &mut Tape,
    cfg: &PolicyConfig,
    vars: &PolicyVars,
    q0: Var,
    p0: Var,
    features: Var,
    unit: f64,
    q_max: f64,
) -> Result<PlannerOut, NumericError> {
    let d = cfg.dim;
    let hw = 5.0 * unit;
    let qs = t.scale(q0, 1.0 / hw);
    let ps = t.scale(p0, 1.0 / P_SCALE);
    let input = t.concat(&[qs, ps, features]);
    let out = forward_tape(t, &vars.planner, input)?;
    let logits = t.slice(out, 0, 3)?;
    let o = t.slice(out, 3, d)?;
    // radial squash keeps |anchor - q0| <= trust radius in every dimension
    let o2 = t.dot(o, o)?;
    let o2 = t.add_const(o2, 1e-12);
    let n = t.sqrt(o2)?;
    let th = t.tanh(n);
    let inv = t.recip(n)?;
    let s = t.hadamard(th, inv)?;
    let s = t.scale(s, cfg.trust_radius * unit);
    let offset = t.scale_by(o, s)?;
    let raw = t.add(q0, offset)?;
    let anchor = t.clip(raw, -q_max, q_max);
    let aj = t.slice(out, 3 + d, 1)?;
    let alpha_j_bar = t.sigmoid(aj);
    let ar = t.slice(out, 4 + d, 1)?;
    let alpha_r_bar = t.sigmoid(ar);
    let kb = t.slice(out, 5 + d, 1)?;
    let kb = t.softplus(kb);
    let kappa_bar = t.add_const(kb, KAPPA_FLOOR);
    Ok(PlannerOut { logits, anchor, alpha_j_bar, alpha_r_bar, kappa_bar })
}

/// Mode-scaled gains. With `soft` the mode enters through its softmax
/// probabilities; otherwise through the one-hot of `mode`.
pub fn stage_vars(t: &mut Tape, plan: &PlannerOut, mode: Mode, soft: bool) -> Result<StageVars, NumericError> {
    let probs = if soft {
        let lse = t.logsumexp(plan.logits);
        let lse3 = t.concat(&[lse, lse, lse]);
        let z = t.sub(plan.logits, lse3)?;
        t.exp(z)
    } else {
        let mut oh = vec![0.0; 3];
        oh[mode.index()] = 1.0;
        t.constant(Tensor::vector(oh))
    };
    let bj = t.constant(Tensor::vector(Mode::ALL.iter().map(|m| m.betas().0).collect()));
    let br = t.constant(Tensor::vector(Mode::ALL.iter().map(|m| m.betas().1).collect()));
    let beta_j = t.dot(probs, bj)?;
    let beta_r = t.dot(probs, br)?;
    let alpha_j = t.hadamard(plan.alpha_j_bar, beta_j)?;
    let alpha_r = t.hadamard(plan.alpha_r_bar, beta_r)?;
    Ok(StageVars {
        anchor: plan.anchor,
        alpha_j,
        alpha_r,
        kappa_bar: plan.kappa_bar,
        mode_features: probs,
        alpha_j_bar: plan.alpha_j_bar,
        alpha_r_bar: plan.alpha_r_bar,
    })
}

/// Stage variables from a fixed context (no planner gradient).
pub fn stage_vars_const(t: &mut Tape, ctx: &StageContext) -> Result<StageVars, NumericError> {
    let plan = PlannerOut {
        logits: t.constant(Tensor::vector(vec![0.0; 3])),
        anchor: t.constant(Tensor::vector(ctx.anchor.clone())),
        alpha_j_bar: t.scalar(ctx.alpha_j_bar),
        alpha_r_bar: t.scalar(ctx.alpha_r_bar),
        kappa_bar: t.scalar(ctx.kappa_bar),
    };
    stage_vars(t, &plan, ctx.mode, false)
}

/// Controller forward pass producing the structure operators.
pub fn control_tape(
    t: &mut Tape,
    cfg: &PolicyConfig,
    vars: &PolicyVars,
    q: Var,
    p: Var,
    features: Var,
    stage: &StageVars,
    unit: f64,
) -> Result<OpsVars, NumericError> {
    let (d, r) = (cfg.dim, cfg.rank);
    let hw = 5.0 * unit;
    let qs = t.scale(q, 1.0 / hw);
    let ps = t.scale(p, 1.0 / P_SCALE);
    let rel = t.sub(stage.anchor, q)?;
    let rel = t.scale(rel, 1.0 / hw);
    let k1 = t.add_const(stage.kappa_bar, 1.0);
    let kinv = t.recip(k1)?;
    let ksq = t.scale(kinv, -1.0);
    let ksq = t.add_const(ksq, 1.0);
    let input = t.concat(&[qs, ps, features, rel, stage.mode_features, stage.alpha_j_bar, stage.alpha_r_bar, ksq]);
    let out = forward_tape(t, &vars.controller, input)?;
    let mut off = 0;
    let mut take = |t: &mut Tape, n: usize| -> Result<Var, NumericError> {
        let v = t.slice(out, off, n)?;
        off += n;
        Ok(v)
    };
    let m = take(t, d)?;
    let m = t.softplus(m);
    let mass = t.add_const(m, M_MIN);
    let k = take(t, 1)?;
    let kappa_loc = t.softplus(k);
    let u = take(t, d)?;
    let u = t.tanh(u);
    let u_shp = t.scale(u, U_MAX);
    let kd = take(t, d)?;
    let k_d = t.softplus(kd);
    let factor_scale = 1.0 / (d as f64).sqrt();
    let mut factor = |t: &mut Tape| -> Result<Var, NumericError> {
        let f = take(t, d * r)?;
        let f = t.scale(f, factor_scale);
        t.reshape(f, &[d, r])
    };
    let u_omega = factor(t)?;
    let v_omega = factor(t)?;
    let b_d = factor(t)?;
    let dd = take(t, d)?;
    let d_d = t.softplus(dd);
    Ok(OpsVars { rank: r, mass, kappa_loc, u_shp, k_d, u_omega, v_omega, b_d, d_d })
}

/// Read structure operators off the tape.
pub fn ops_values(t: &Tape, ops: &OpsVars) -> StructureOps {
    StructureOps {
        rank: ops.rank,
        mass: t.value(ops.mass).data().to_vec(),
        kappa_loc: t.scalar_value(ops.kappa_loc),
        u_shp: t.value(ops.u_shp).data().to_vec(),
        k_d: t.value(ops.k_d).data().to_vec(),
        u_omega: t.value(ops.u_omega).data().to_vec(),
        v_omega: t.value(ops.v_omega).data().to_vec(),
        b_d: t.value(ops.b_d).data().to_vec(),
        d_d: t.value(ops.d_d).data().to_vec(),
    }
}

/// Evaluate the planner without recording gradients.
pub fn plan(
    policy: &Policy,
    q0: &[f64],
    p0: &[f64],
    features: &[f64],
    unit: f64,
    q_max: f64,
) -> Result<(StageContext, Vec<f64>), NumericError> {
    let mut t = Tape::new();
    let vars = policy.register(&mut t, false, false);
    let qv = t.constant(Tensor::vector(q0.to_vec()));
    let pv = t.constant(Tensor::vector(p0.to_vec()));
    let fv = t.constant(Tensor::vector(features.to_vec()));
    let out = plan_tape(&mut t, &policy.config, &vars, qv, pv, fv, unit, q_max)?;
    let logits = t.value(out.logits).data().to_vec();
    let ctx = StageContext {
        anchor: t.value(out.anchor).data().to_vec(),
        mode: Mode::argmax(&logits),
        alpha_j_bar: t.scalar_value(out.alpha_j_bar),
        alpha_r_bar: t.scalar_value(out.alpha_r_bar),
        kappa_bar: t.scalar_value(out.kappa_bar),
        horizon: EVENT_HORIZON,
    };
    Ok((ctx, logits))
}

/// Evaluate the controller without recording gradients.
pub fn control(
    policy: &Policy,
    q: &[f64],
    p: &[f64],
    features: &[f64],
    ctx: &StageContext,
    unit: f64,
) -> Result<StructureOps, NumericError> {
    let mut t = Tape::new();
    let vars = policy.register(&mut t, false, false);
    let qv = t.constant(Tensor::vector(q.to_vec()));
    let pv = t.constant(Tensor::vector(p.to_vec()));
    let fv = t.constant(Tensor::vector(features.to_vec()));
    let stage = stage_vars_const(&mut t, ctx)?;
    let ops = control_tape(&mut t, &policy.config, &vars, qv, pv, fv, &stage, unit)?;
    Ok(ops_values(&t, &ops))
}
