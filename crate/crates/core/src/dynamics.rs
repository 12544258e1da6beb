//! Port-Hamiltonian state, structure operators and the semi-implicit step.
//!
//! `p+ = clip(p + h(-e_q + aJ Omega v - aR D v + u_port), p_max)` and
//! `q+ = clip(q + h M^-1 p+, q_max)`, with `v = y = M^-1 p`,
//! `Omega v = U(V^T v) - V(U^T v)`, `D v = B(B^T v) + d * v` and
//! `u_port = u_shp - K_d * y`.

use serde::{Deserialize, Serialize};
use shape_numeric::tensor::{dot, matvec, matvec_t};
use shape_numeric::{NumericError, Tape, Var};

use crate::error::ShapeError;

pub const P_MAX: f64 = 10.0;
pub const DEFAULT_STEP: f64 = 0.05;
pub const LYAPUNOV_EPS: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhasePoint {
    pub fn at_rest(q: Vec<f64>) -> Self {
        let p = vec![0.0; q.len()];
        Self { q, p }
    }
}

/// Stage mode; the declaration order is the argmax tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Settle,
    Refine,
    Escape,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Settle, Mode::Refine, Mode::Escape];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Mode {
        Mode::ALL[i.min(2)]
    }

    /// `(beta_J, beta_R)` multipliers.
    pub fn betas(self) -> (f64, f64) {
        match self {
            Mode::Settle => (0.5, 1.0),
            Mode::Refine => (1.0, 1.0),
            Mode::Escape => (1.0, 0.25),
        }
    }

    /// First maximum wins, so ties resolve settle < refine < escape.
    pub fn argmax(logits: &[f64]) -> Mode {
        let mut best = 0;
        for i in 1..3 {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        Mode::from_index(best)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Settle => "settle",
            Mode::Refine => "refine",
            Mode::Escape => "escape",
        }
    }
}

/// `(alpha_J, alpha_R) = (abar_J beta_J(mode), abar_R beta_R(mode))`.
pub fn mode_scale(alpha_j_bar: f64, alpha_r_bar: f64, mode: Mode) -> (f64, f64) {
    let (bj, br) = mode.betas();
    (alpha_j_bar * bj, alpha_r_bar * br)
}

/// Planner output, frozen for the duration of a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageContext {
    pub anchor: Vec<f64>,
    pub mode: Mode,
    pub alpha_j_bar: f64,
    pub alpha_r_bar: f64,
    pub kappa_bar: f64,
    pub horizon: usize,
}

/// Controller output for a single step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureOps {
    pub rank: usize,
    pub mass: Vec<f64>,
    pub kappa_loc: f64,
    pub u_shp: Vec<f64>,
    pub k_d: Vec<f64>,
    /// Row-major `d x r` factors.
    pub u_omega: Vec<f64>,
    pub v_omega: Vec<f64>,
    pub b_d: Vec<f64>,
    pub d_d: Vec<f64>,
}

impl StructureOps {
    /// Unit mass, unit diagonal damping, no coupling, no ports.
    pub fn plain(dim: usize, rank: usize) -> Self {
        Self {
            rank,
            mass: vec![1.0; dim],
            kappa_loc: 0.0,
            u_shp: vec![0.0; dim],
            k_d: vec![0.0; dim],
            u_omega: vec![0.0; dim * rank],
            v_omega: vec![0.0; dim * rank],
            b_d: vec![0.0; dim * rank],
            d_d: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mass.len()
    }

    pub fn velocity(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.mass).map(|(a, m)| a / m).collect()
    }

    pub fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.mass).map(|(a, m)| a * a / m).sum::<f64>()
    }

    pub fn skew(&self, x: &[f64]) -> Vec<f64> {
        skew_apply(&self.u_omega, &self.v_omega, self.dim(), self.rank, x)
    }

    pub fn psd(&self, x: &[f64]) -> Vec<f64> {
        psd_apply(&self.b_d, &self.d_d, self.dim(), self.rank, x)
    }

    pub fn port(&self, y: &[f64]) -> Vec<f64> {
        port_input(&self.u_shp, &self.k_d, y)
    }
}

/// `U(V^T x) - V(U^T x)`; skew-symmetric for any factors.
pub fn skew_apply(u: &[f64], v: &[f64], d: usize, r: usize, x: &[f64]) -> Vec<f64> {
    let a = matvec(u, d, r, &matvec_t(v, d, r, x));
    let b = matvec(v, d, r, &matvec_t(u, d, r, x));
    a.iter().zip(&b).map(|(p, q)| p - q).collect()
}

/// `B(B^T x) + diag * x`; positive semidefinite when `diag >= 0`.
pub fn psd_apply(b: &[f64], diag: &[f64], d: usize, r: usize, x: &[f64]) -> Vec<f64> {
    let low = matvec(b, d, r, &matvec_t(b, d, r, x));
    low.iter().zip(diag).zip(x).map(|((l, dd), xi)| l + dd * xi).collect()
}

pub fn port_input(u_shp: &[f64], k_d: &[f64], y: &[f64]) -> Vec<f64> {
    u_shp.iter().zip(k_d).zip(y).map(|((u, k), yi)| u - k * yi).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub h: f64,
    pub p_max: f64,
    pub q_max: f64,
}

impl StepConfig {
    pub fn new(h: f64, q_max: f64) -> Self {
        Self { h, p_max: P_MAX, q_max }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: PhasePoint,
    /// State before either clip was applied.
    pub unclipped: PhasePoint,
    pub y: Vec<f64>,
    pub u_port: Vec<f64>,
}

/// One semi-implicit step. `effort_q` is the full position effort
/// `g + grad U_shp(q)`; momentum is updated first.
pub fn step_semi_implicit(
    x: &PhasePoint,
    ops: &StructureOps,
    alpha_j: f64,
    alpha_r: f64,
    effort_q: &[f64],
    cfg: &StepConfig,
) -> Result<StepOutcome, ShapeError> {
    let d = x.q.len();
    if x.p.len() != d || effort_q.len() != d || ops.dim() != d {
        return Err(ShapeError::InvalidConfig(format!(
            "step dimensions disagree: q {d}, p {}, effort {}, ops {}",
            x.p.len(),
            effort_q.len(),
            ops.dim()
        )));
    }
    let v = ops.velocity(&x.p);
    let omega = ops.skew(&v);
    let damp = ops.psd(&v);
    let u_port = ops.port(&v);
    let mut p_raw = vec![0.0; d];
    let mut p_next = vec![0.0; d];
    for i in 0..d {
        let rhs = -effort_q[i] + alpha_j * omega[i] - alpha_r * damp[i] + u_port[i];
        p_raw[i] = x.p[i] + cfg.h * rhs;
        p_next[i] = p_raw[i].clamp(-cfg.p_max, cfg.p_max);
    }
    let mut q_raw = vec![0.0; d];
    let mut q_next = vec![0.0; d];
    for i in 0..d {
        q_raw[i] = x.q[i] + cfg.h * p_next[i] / ops.mass[i];
        q_next[i] = q_raw[i].clamp(-cfg.q_max, cfg.q_max);
    }
    if !p_next.iter().chain(&q_next).all(|v| v.is_finite()) {
        return Err(ShapeError::NonFinite("semi-implicit step"));
    }
    // the unclipped reference integrates with the unclipped momentum
    let q_free: Vec<f64> = (0..d).map(|i| x.q[i] + cfg.h * p_raw[i] / ops.mass[i]).collect();
    Ok(StepOutcome {
        next: PhasePoint { q: q_next, p: p_next },
        unclipped: PhasePoint { q: q_free, p: p_raw },
        y: v,
        u_port,
    })
}

/// Power balance right-hand side `-(e_p)^T aR D e_p - y^T K_d y + y^T u_shp`.
pub fn energy_rate(ops: &StructureOps, alpha_r: f64, p: &[f64]) -> f64 {
    let e = ops.velocity(p);
    let de = ops.psd(&e);
    let diss = alpha_r * dot(&e, &de);
    let kd: f64 = e.iter().zip(&ops.k_d).map(|(y, k)| k * y * y).sum();
    -diss - kd + dot(&e, &ops.u_shp)
}

/// `(H_{n+1} - H_n)/h - rate(x_n)`, the discrete energy-balance residual.
pub fn energy_balance_residual(h_now: f64, h_next: f64, rate: f64, h: f64) -> f64 {
    (h_next - h_now) / h - rate
}

/// `U(q) - U(q*) + 0.5 p^T M^-1 p + eps (q - q*)^T p`.
pub fn lyapunov(u_q: f64, u_star: f64, q: &[f64], q_star: &[f64], p: &[f64], mass: &[f64], eps: f64) -> f64 {
    let kin: f64 = 0.5 * p.iter().zip(mass).map(|(a, m)| a * a / m).sum::<f64>();
    let cross: f64 = q.iter().zip(q_star).zip(p).map(|((a, b), c)| (a - b) * c).sum();
    u_q - u_star + kin + eps * cross
}

/// Structure operators as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct OpsVars {
    pub rank: usize,
    pub mass: Var,
    pub kappa_loc: Var,
    pub u_shp: Var,
    pub k_d: Var,
    /// `d x r` matrices.
    pub u_omega: Var,
    pub v_omega: Var,
    pub b_d: Var,
    pub d_d: Var,
}

/// Recorded step; also returns the quantities the training losses need.
pub struct TapeStep {
    pub q: Var,
    pub p: Var,
    pub y: Var,
    pub u_port: Var,
    pub omega_v: Var,
    pub damp_v: Var,
}

/// Tape version of [`step_semi_implicit`]. The position effort is
/// `effort_const + kappa_goal (q - anchor)`, where `effort_const` holds the
/// oracle gradient and memory terms (no gradient flows through them).
#[allow(clippy::too_many_arguments)]
pub fn step_tape(
    t: &mut Tape,
    q: Var,
    p: Var,
    ops: &OpsVars,
    alpha_j: Var,
    alpha_r: Var,
    kappa_goal: Var,
    anchor: Var,
    effort_const: Var,
    cfg: &StepConfig,
) -> Result<TapeStep, NumericError> {
    let inv_m = t.recip(ops.mass)?;
    let v = t.hadamard(p, inv_m)?;
    let kv = t.hadamard(ops.k_d, v)?;
    let u_port = t.sub(ops.u_shp, kv)?;
    let dq = t.sub(q, anchor)?;
    let spring = t.scale_by(dq, kappa_goal)?;
    let e_q = t.add(effort_const, spring)?;
    let vt = t.matvec_t(ops.v_omega, v)?;
    let a = t.matvec(ops.u_omega, vt)?;
    let ut = t.matvec_t(ops.u_omega, v)?;
    let b = t.matvec(ops.v_omega, ut)?;
    let omega_v = t.sub(a, b)?;
    let bt = t.matvec_t(ops.b_d, v)?;
    let low = t.matvec(ops.b_d, bt)?;
    let dv = t.hadamard(ops.d_d, v)?;
    let damp_v = t.add(low, dv)?;
    let jw = t.scale_by(omega_v, alpha_j)?;
    let rw = t.scale_by(damp_v, alpha_r)?;
    let rhs = t.sub(jw, e_q)?;
    let rhs = t.sub(rhs, rw)?;
    let rhs = t.add(rhs, u_port)?;
    let dp = t.scale(rhs, cfg.h);
    let p_raw = t.add(p, dp)?;
    let p_next = t.clip(p_raw, -cfg.p_max, cfg.p_max);
    let v_next = t.hadamard(p_next, inv_m)?;
    let dq = t.scale(v_next, cfg.h);
    let q_raw = t.add(q, dq)?;
    let q_next = t.clip(q_raw, -cfg.q_max, cfg.q_max);
    Ok(TapeStep { q: q_next, p: p_next, y: v, u_port, omega_v, damp_v })
}
