//! Runtime checks for the frozen-stage theory: structure identities, energy
//! balance under step refinement, hypocoercive Lyapunov decay, discrete defect
//! accounting and the stochastic-oracle floor.
//!
//! All suites run on a linear stage `U(q) = 0.5 (q - q*)^T A (q - q*)` with
//! fixed structure operators, where the continuous decay rate of the modified
//! Lyapunov function is available in closed form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{energy_rate, step_semi_implicit, Mode, PhasePoint, StageContext, StepConfig, StepOutcome, StructureOps};
use crate::error::ShapeError;
use crate::policy::{context_features, control, Policy, PolicyConfig, EVENT_HORIZON};
use crate::tasks::DESCRIPTOR_LEN;

/// Steps discarded before any decay fit.
pub const TRANSIENT_STEPS: usize = 10;
pub const SKEW_REL_TOL: f64 = 1e-9;
pub const PSD_ABS_TOL: f64 = 1e-12;
pub const MIN_R2: f64 = 0.99;
pub const FLOOR_MIN_R2: f64 = 0.9;

/// Random SPD matrix with eigenvalues uniform in `[lo, hi]`.
pub fn random_spd<R: Rng>(d: usize, lo: f64, hi: f64, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let eig = DVector::from_fn(d, |_, _| rng.gen_range(lo..=hi));
    &q * DMatrix::from_diagonal(&eig) * q.transpose()
}

/// Dense matrix of a linear map given by its action.
fn dense(d: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        for (i, v) in f(&e).into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

/// A frozen stage on a quadratic potential.
#[derive(Clone, Debug)]
pub struct LinearStage {
    pub a: DMatrix<f64>,
    pub q_star: Vec<f64>,
    pub ops: StructureOps,
    pub alpha_j: f64,
    pub alpha_r: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRun {
    pub states: Vec<PhasePoint>,
    /// Unclipped successor of `states[n]`.
    pub unclipped: Vec<PhasePoint>,
    /// `|u_port|^2` at step n.
    pub port_power: Vec<f64>,
}

impl LinearStage {
    /// `D = I`, `Omega = 0`, unit mass, ports off.
    pub fn damped(a: DMatrix<f64>) -> Self {
        let d = a.nrows();
        Self { a, q_star: vec![0.0; d], ops: StructureOps::plain(d, 1), alpha_j: 0.0, alpha_r: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.q_star.len()
    }

    fn error(&self, q: &[f64]) -> DVector<f64> {
        DVector::from_iterator(q.len(), q.iter().zip(&self.q_star).map(|(a, b)| a - b))
    }

    pub fn potential(&self, q: &[f64]) -> f64 {
        let e = self.error(q);
        0.5 * e.dot(&(&self.a * &e))
    }

    pub fn gradient(&self, q: &[f64]) -> Vec<f64> {
        (&self.a * self.error(q)).iter().copied().collect()
    }

    pub fn hamiltonian(&self, x: &PhasePoint) -> f64 {
        self.potential(&x.q) + self.ops.kinetic(&x.p)
    }

    /// `U(q) - U(q*) + 0.5 p^T M^-1 p + eps (q - q*)^T p`.
    pub fn lyapunov(&self, x: &PhasePoint, eps: f64) -> f64 {
        let cross: f64 = self.error(&x.q).iter().zip(&x.p).map(|(e, p)| e * p).sum();
        self.hamiltonian(x) + eps * cross
    }

    pub fn step(&self, x: &PhasePoint, noise: Option<&[f64]>, cfg: &StepConfig) -> Result<StepOutcome, ShapeError> {
        let mut effort = self.gradient(&x.q);
        if let Some(xi) = noise {
            effort.iter_mut().zip(xi).for_each(|(e, n)| *e += n);
        }
        step_semi_implicit(x, &self.ops, self.alpha_j, self.alpha_r, &effort, cfg)
    }

    pub fn simulate(&self, x0: &PhasePoint, cfg: &StepConfig, steps: usize) -> Result<StageRun, ShapeError> {
        let mut run = StageRun { states: vec![x0.clone()], unclipped: Vec::new(), port_power: Vec::new() };
        let mut x = x0.clone();
        for _ in 0..steps {
            let out = self.step(&x, None, cfg)?;
            run.port_power.push(out.u_port.iter().map(|u| u * u).sum());
            run.unclipped.push(out.unclipped);
            x = out.next;
            run.states.push(x.clone());
        }
        Ok(run)
    }

    /// `dV/dt` of the continuous frozen-stage flow at `x`, ports included.
    pub fn lyapunov_rate(&self, x: &PhasePoint, eps: f64) -> f64 {
        let v = self.ops.velocity(&x.p);
        let g = self.gradient(&x.q);
        let om = self.ops.skew(&v);
        let dm = self.ops.psd(&v);
        let port = self.ops.port(&v);
        let e = self.error(&x.q);
        (0..self.dim())
            .map(|i| {
                let pdot = -g[i] + self.alpha_j * om[i] - self.alpha_r * dm[i] + port[i];
                (g[i] + eps * x.p[i]) * v[i] + (v[i] + eps * e[i]) * pdot
            })
            .sum()
    }

    /// Largest `c` with `dV/dt <= -c V` along the continuous frozen-stage flow
    /// (ports treated as zero input apart from the `K_d` damping injection).
    /// Negative when the cross term is too large for the given structure.
    pub fn continuous_rate(&self, eps: f64) -> f64 {
        let d = self.dim();
        let minv = DMatrix::from_diagonal(&DVector::from_iterator(d, self.ops.mass.iter().map(|m| 1.0 / m)));
        let omega = dense(d, |x| self.ops.skew(x));
        let damp = dense(d, |x| self.ops.psd(x));
        let kd = DMatrix::from_diagonal(&DVector::from_vec(self.ops.k_d.clone()));
        let pp = (omega * self.alpha_j - damp * self.alpha_r - kd) * &minv;
        let mut f = DMatrix::zeros(2 * d, 2 * d);
        f.view_mut((0, d), (d, d)).copy_from(&minv);
        f.view_mut((d, 0), (d, d)).copy_from(&(-&self.a));
        f.view_mut((d, d), (d, d)).copy_from(&pp);
        let mut p = DMatrix::zeros(2 * d, 2 * d);
        p.view_mut((0, 0), (d, d)).copy_from(&(&self.a * 0.5));
        p.view_mut((0, d), (d, d)).copy_from(&DMatrix::from_diagonal_element(d, d, 0.5 * eps));
        p.view_mut((d, 0), (d, d)).copy_from(&DMatrix::from_diagonal_element(d, d, 0.5 * eps));
        p.view_mut((d, d), (d, d)).copy_from(&(&minv * 0.5));
        let q = -(f.transpose() * &p + &p * f);
        let Some(chol) = p.clone().cholesky() else {
            return f64::NEG_INFINITY;
        };
        let l_inv = chol.l().try_inverse().expect("cholesky factor is invertible");
        let s = &l_inv * q * l_inv.transpose();
        let s = (&s + s.transpose()) * 0.5;
        SymmetricEigen::new(s).eigenvalues.min()
    }
}

/// Ordinary least squares `y = slope x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_stderr: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = if n > 2.0 { (sse / (n - 2.0) / sxx).sqrt() } else { f64::INFINITY };
    LinearFit { slope, intercept, r2, slope_stderr }
}

/// Number of strict increases in a best-so-far column.
pub fn monotone_violations(best: &[f64]) -> usize {
    best.windows(2).filter(|w| w[1] > w[0]).count()
}

// ---------------------------------------------------------------- structure

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub samples: usize,
    /// Worst `|v^T Omega v| / (|v|^2 |U|_F |V|_F)`, the factor product
    /// bounding each term of the cancelling sum.
    pub max_skew_rel: f64,
    pub min_psd: f64,
    pub pass: bool,
}

/// Draws random policies, states and stage contexts, evaluates the controller
/// and checks `v^T Omega v = 0` and `v^T D v >= 0` on a random `v`.
pub fn structure_suite(samples: usize, seed: u64) -> Result<StructureReport, ShapeError> {
    let per_policy = 50;
    let chunks: Vec<(f64, f64)> = (0..samples.div_ceil(per_policy))
        .into_par_iter()
        .map(|c| -> Result<(f64, f64), ShapeError> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let d = rng.gen_range(1..=24);
            let readout = 4 * rng.gen_range(1..=4);
            let policy = Policy::new(PolicyConfig::new(d, 16, readout), &mut rng);
            let mut worst = (0.0f64, f64::INFINITY);
            let n = per_policy.min(samples - c * per_policy);
            for _ in 0..n {
                let mut vec = |s: f64| -> Vec<f64> { (0..d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect() };
                let (q, p, g, v, anchor) = (vec(2.0), vec(3.0), vec(5.0), vec(1.0), vec(2.0));
                let desc: Vec<f64> = (0..DESCRIPTOR_LEN).map(|_| rng.gen_range(0.0..1.0)).collect();
                let read: Vec<f64> = (0..readout).map(|_| rng.gen_range(0.0..3.0)).collect();
                let feats = context_features(&g, rng.gen_range(-10.0..10.0), &desc, &read);
                let ctx = StageContext {
                    anchor,
                    mode: Mode::from_index(rng.gen_range(0..3)),
                    alpha_j_bar: rng.gen_range(0.0..2.0),
                    alpha_r_bar: rng.gen_range(0.0..2.0),
                    kappa_bar: rng.gen_range(0.1..2.0),
                    horizon: EVENT_HORIZON,
                };
                let ops = control(&policy, &q, &p, &feats, &ctx, rng.gen_range(0.1..2.0))?;
                let ov = ops.skew(&v);
                let fro = |m: &[f64]| m.iter().map(|x| x * x).sum::<f64>().sqrt();
                let scale = fro(&v).powi(2) * fro(&ops.u_omega) * fro(&ops.v_omega);
                let s: f64 = v.iter().zip(&ov).map(|(a, b)| a * b).sum();
                let rel = if scale > 0.0 { s.abs() / scale } else { s.abs() };
                let psd: f64 = v.iter().zip(&ops.psd(&v)).map(|(a, b)| a * b).sum();
                worst = (worst.0.max(rel), worst.1.min(psd));
            }
            Ok(worst)
        })
        .collect::<Result<_, _>>()?;
    let max_skew_rel = chunks.iter().map(|c| c.0).fold(0.0, f64::max);
    let min_psd = chunks.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    Ok(StructureReport {
        samples,
        max_skew_rel,
        min_psd,
        pass: max_skew_rel <= SKEW_REL_TOL && min_psd >= -PSD_ABS_TOL,
    })
}

// ------------------------------------------------------------ energy balance

/// `(H_{n+1} - H_n)/h - rate(x_n)` along a simulated window.
pub fn energy_residuals(stage: &LinearStage, run: &StageRun, h: f64) -> Vec<f64> {
    run.states
        .windows(2)
        .map(|w| (stage.hamiltonian(&w[1]) - stage.hamiltonian(&w[0])) / h - energy_rate(&stage.ops, stage.alpha_r, &w[0].p))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyStudy {
    pub steps: Vec<f64>,
    /// Mean `|residual|` over a fixed physical window.
    pub defect: Vec<f64>,
    /// `defect[i] / defect[i + 1]`.
    pub ratios: Vec<f64>,
}

/// Energy-balance residual under successive step refinements over the same
/// physical time `horizon`.
pub fn energy_halving_study(stage: &LinearStage, x0: &PhasePoint, steps: &[f64], horizon: f64) -> Result<EnergyStudy, ShapeError> {
    let mut defect = Vec::new();
    for &h in steps {
        let n = (horizon / h).round() as usize;
        let run = stage.simulate(x0, &StepConfig { h, p_max: f64::INFINITY, q_max: f64::INFINITY }, n)?;
        let r = energy_residuals(stage, &run, h);
        defect.push(r.iter().map(|x| x.abs()).sum::<f64>() / r.len() as f64);
    }
    let ratios = defect.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(EnergyStudy { steps: steps.to_vec(), defect, ratios })
}

// --------------------------------------------------------------- contraction

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub h: f64,
    pub steps: usize,
    /// Fitted `c` in `V(n) ~ V(0) exp(-c n h)`.
    pub rate: f64,
    pub r2: f64,
    /// Rate indistinguishable from zero.
    pub conservative: bool,
    /// No increase of V after the transient.
    pub monotone: bool,
    pub pass: bool,
}

/// Simulates until `V` falls below `1e-10 V(0)` or `max_time` elapses, then
/// fits the log-linear decay after the transient.
pub fn contraction_fit(stage: &LinearStage, x0: &PhasePoint, h: f64, eps: f64, max_time: f64) -> Result<ContractionReport, ShapeError> {
    let cfg = StepConfig { h, p_max: f64::INFINITY, q_max: f64::INFINITY };
    let v0 = stage.lyapunov(x0, eps);
    let max_steps = (max_time / h).round() as usize;
    let mut x = x0.clone();
    let mut values = vec![v0];
    while values.len() <= max_steps {
        x = stage.step(&x, None, &cfg)?.next;
        let v = stage.lyapunov(&x, eps);
        values.push(v);
        if v <= 1e-10 * v0 || v <= 0.0 {
            break;
        }
    }
    let tail = &values[TRANSIENT_STEPS.min(values.len() - 3)..];
    let t0 = values.len() - tail.len();
    let xs: Vec<f64> = (0..tail.len()).map(|i| (t0 + i) as f64 * h).collect();
    let ys: Vec<f64> = tail.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let fit = linear_fit(&xs, &ys);
    let rate = -fit.slope;
    let conservative = rate.abs() <= 3.0 * fit.slope_stderr || rate.abs() < 1e-6;
    let monotone = tail.windows(2).all(|w| w[1] <= w[0]);
    Ok(ContractionReport {
        h,
        steps: values.len() - 1,
        rate,
        r2: fit.r2,
        conservative,
        monotone,
        pass: rate > 0.0 && !conservative && fit.r2 >= MIN_R2,
    })
}

pub fn contraction_suite(stage: &LinearStage, x0: &PhasePoint, steps: &[f64], eps: f64, max_time: f64) -> Result<Vec<ContractionReport>, ShapeError> {
    steps.iter().map(|&h| contraction_fit(stage, x0, h, eps, max_time)).collect()
}

// ------------------------------------------------------------------- defects

/// Per-stage decomposition of the terminal Lyapunov value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectLedger {
    pub h: f64,
    pub steps: usize,
    pub rate: f64,
    /// Fitted constants of the one-step inequality.
    pub c1: f64,
    pub c2: f64,
    /// `C1 h / c`.
    pub truncation: f64,
    /// `C2 sup beta / c`.
    pub port_work: f64,
    /// Discounted sum of positive clipping defects.
    pub projection: f64,
    pub initial: f64,
    pub terminal: f64,
    /// `(1 - c h)^N V(0)`.
    pub prediction: f64,
    /// `prediction + truncation + port_work + projection`.
    pub total_error: f64,
    /// `terminal <= prediction + 2 (truncation + port_work + projection)`.
    pub holds: bool,
}

/// Decomposes a recorded frozen stage against `(1 - c h)` contraction at the
/// supplied rate. Each increment splits into the continuous part `h dV/dt`
/// (whose excess over `-c h V` is charged to port work), the local truncation
/// `V(z_free) - V(z) - h dV/dt`, and the clipping defect `V(z+) - V(z_free)`.
pub fn defect_suite(stage: &LinearStage, run: &StageRun, h: f64, rate: f64, eps: f64) -> Result<DefectLedger, ShapeError> {
    if !(rate > 0.0 && rate * h < 1.0) {
        return Err(ShapeError::InvalidConfig(format!("defect accounting needs 0 < c h < 1, got c = {rate}, h = {h}")));
    }
    let n = run.unclipped.len();
    let v: Vec<f64> = run.states.iter().map(|x| stage.lyapunov(x, eps)).collect();
    let v_free: Vec<f64> = run.unclipped.iter().map(|x| stage.lyapunov(x, eps)).collect();
    let k = 1.0 - rate * h;
    let flow: Vec<f64> = (0..n).map(|i| h * stage.lyapunov_rate(&run.states[i], eps)).collect();
    let c1 = (0..n).map(|i| (v_free[i] - v[i] - flow[i]).max(0.0) / (h * h)).fold(0.0, f64::max);
    let c2 = (0..n)
        .filter(|&i| run.port_power[i] > 0.0)
        .map(|i| (flow[i] + rate * h * v[i]).max(0.0) / (h * run.port_power[i]))
        .fold(0.0, f64::max);
    let proj: Vec<f64> = (0..n).map(|i| (v[i + 1] - v_free[i]).max(0.0)).collect();
    let sup_beta = run.port_power.iter().copied().fold(0.0, f64::max);
    let projection: f64 = (0..n).map(|i| k.powi((n - 1 - i) as i32) * proj[i]).sum();
    let truncation = c1 * h / rate;
    let port_work = c2 * sup_beta / rate;
    let prediction = k.powi(n as i32) * v[0];
    let terminal = v[n];
    let defects = truncation + port_work + projection;
    Ok(DefectLedger {
        h,
        steps: n,
        rate,
        c1,
        c2,
        truncation,
        port_work,
        projection,
        initial: v[0],
        terminal,
        prediction,
        total_error: prediction + defects,
        holds: terminal <= prediction + 2.0 * defects,
    })
}

// ---------------------------------------------------------- stochastic floor

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorReport {
    pub h: f64,
    pub sigmas: Vec<f64>,
    /// Long-run mean Lyapunov value per sigma.
    pub floors: Vec<f64>,
    /// Fit of floor against sigma^2.
    pub fit: LinearFit,
    pub pass: bool,
}

/// Mean `V` over `average` steps after `burn` steps, averaged over `runs`
/// independent noise streams; the oracle adds `sigma xi`, `xi ~ N(0, I)`.
pub fn stochastic_floor(
    stage: &LinearStage,
    x0: &PhasePoint,
    h: f64,
    sigma: f64,
    eps: f64,
    (burn, average, runs): (usize, usize, usize),
    seed: u64,
) -> Result<f64, ShapeError> {
    let cfg = StepConfig { h, p_max: f64::INFINITY, q_max: f64::INFINITY };
    let d = stage.dim();
    let sums: Vec<f64> = (0..runs)
        .into_par_iter()
        .map(|r| -> Result<f64, ShapeError> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
            let mut x = x0.clone();
            let mut acc = 0.0;
            let mut xi = vec![0.0; d];
            for n in 0..burn + average {
                xi.iter_mut().for_each(|z| *z = sigma * rng.sample::<f64, _>(StandardNormal));
                x = stage.step(&x, Some(&xi), &cfg)?.next;
                if n >= burn {
                    acc += stage.lyapunov(&x, eps);
                }
            }
            Ok(acc / average as f64)
        })
        .collect::<Result<_, _>>()?;
    Ok(sums.iter().sum::<f64>() / runs as f64)
}

pub fn stochastic_floor_suite(
    stage: &LinearStage,
    x0: &PhasePoint,
    h: f64,
    sigmas: &[f64],
    eps: f64,
    sizes: (usize, usize, usize),
    seed: u64,
) -> Result<FloorReport, ShapeError> {
    let floors = sigmas
        .iter()
        .map(|&s| stochastic_floor(stage, x0, h, s, eps, sizes, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let s2: Vec<f64> = sigmas.iter().map(|s| s * s).collect();
    let fit = linear_fit(&s2, &floors);
    Ok(FloorReport { h, sigmas: sigmas.to_vec(), floors, fit, pass: fit.slope > 0.0 && fit.r2 >= FLOOR_MIN_R2 })
}

/// Standard normal draw, exposed for suites that build their own starts.
pub fn gaussian_vec<R: Rng>(d: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}
