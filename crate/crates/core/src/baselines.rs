//! Classical first-order optimizers behind one budgeted stepping interface.
//!
//! Each method advances one outer iteration per `step`. Gradients are pulled
//! through a callback so methods that evaluate at a predicted point (NAG),
//! need a second charged evaluation (SAM) or an uncharged curvature probe
//! (Sophia) share the harness that does the accounting.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::ShapeError;
use crate::oracle::{Oracle, OracleKind, OracleSample};
use crate::tasks::{derive_seed, Task};

/// Numerical stabilizer shared by every method.
pub const EPS: f64 = 1e-8;
/// Sophia refreshes its curvature estimate every this many iterations.
pub const SOPHIA_REFRESH: u64 = 10;
/// Finite-difference step of the Hessian-vector product.
pub const HVP_DELTA: f64 = 1e-4;
/// Newton-Schulz quintic coefficients.
pub const NS_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);
pub const NS_ITERS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gd,
    Momentum,
    Nag,
    Adagrad,
    Rmsprop,
    Adadelta,
    Adam,
    Adamw,
    Lookahead,
    Sam,
    Sghmc,
    Shampoo,
    Soap,
    Sophia,
    Lionk,
    Muon,
}

impl Method {
    pub const ALL: [Method; 16] = [
        Method::Gd,
        Method::Momentum,
        Method::Nag,
        Method::Adagrad,
        Method::Rmsprop,
        Method::Adadelta,
        Method::Adam,
        Method::Adamw,
        Method::Lookahead,
        Method::Sam,
        Method::Sghmc,
        Method::Shampoo,
        Method::Soap,
        Method::Sophia,
        Method::Lionk,
        Method::Muon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gd => "gd",
            Method::Momentum => "momentum",
            Method::Nag => "nag",
            Method::Adagrad => "adagrad",
            Method::Rmsprop => "rmsprop",
            Method::Adadelta => "adadelta",
            Method::Adam => "adam",
            Method::Adamw => "adamw",
            Method::Lookahead => "lookahead",
            Method::Sam => "sam",
            Method::Sghmc => "sghmc",
            Method::Shampoo => "shampoo",
            Method::Soap => "soap",
            Method::Sophia => "sophia",
            Method::Lionk => "lionk",
            Method::Muon => "muon",
        }
    }

    /// Charged oracle queries per outer iteration.
    pub fn calls_per_iteration(self) -> u64 {
        if self == Method::Sam {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ShapeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == lower)
            .ok_or_else(|| ShapeError::InvalidConfig(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Hparams {
    Gd { lr: f64 },
    Momentum { lr: f64, beta: f64 },
    Nag { lr: f64, beta: f64 },
    Adagrad { lr: f64 },
    Rmsprop { lr: f64, alpha: f64 },
    Adadelta { rho: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64 },
    Adamw { lr: f64, beta1: f64, beta2: f64, weight_decay: f64 },
    Lookahead { lr: f64, beta1: f64, beta2: f64, k: u64, alpha: f64 },
    Sam { lr: f64, rho: f64 },
    Sghmc { lr: f64, beta: f64 },
    Shampoo { lr: f64 },
    Soap { lr: f64, beta: f64, nu: f64 },
    Sophia { lr: f64, beta1: f64, beta2: f64, rho: f64 },
    Lionk { lr: f64, beta1: f64, beta2: f64, k: u64, gamma_kick: f64 },
    Muon { lr: f64, mu: f64 },
}

impl Hparams {
    pub fn method(&self) -> Method {
        match self {
            Hparams::Gd { .. } => Method::Gd,
            Hparams::Momentum { .. } => Method::Momentum,
            Hparams::Nag { .. } => Method::Nag,
            Hparams::Adagrad { .. } => Method::Adagrad,
            Hparams::Rmsprop { .. } => Method::Rmsprop,
            Hparams::Adadelta { .. } => Method::Adadelta,
            Hparams::Adam { .. } => Method::Adam,
            Hparams::Adamw { .. } => Method::Adamw,
            Hparams::Lookahead { .. } => Method::Lookahead,
            Hparams::Sam { .. } => Method::Sam,
            Hparams::Sghmc { .. } => Method::Sghmc,
            Hparams::Shampoo { .. } => Method::Shampoo,
            Hparams::Soap { .. } => Method::Soap,
            Hparams::Sophia { .. } => Method::Sophia,
            Hparams::Lionk { .. } => Method::Lionk,
            Hparams::Muon { .. } => Method::Muon,
        }
    }
}

/// Table rows in the order ackley, rastrigin, levy, multi_well_barrier,
/// lj_cluster, fallback.
const ROWS: [&str; 6] = ["ackley", "rastrigin", "levy", "multi_well_barrier", "lj_cluster", "fallback"];
const GD_LR: [f64; 6] = [0.030, 0.012, 0.018, 0.014, 0.0025, 0.020];
const MOMENTUM: [(f64, f64); 6] = [(0.028, 0.72), (0.011, 0.65), (0.016, 0.68), (0.012, 0.72), (0.0020, 0.65), (0.018, 0.75)];
const NAG: [(f64, f64); 6] = [(0.026, 0.82), (0.010, 0.78), (0.015, 0.80), (0.011, 0.80), (0.0018, 0.75), (0.016, 0.82)];
const RMSPROP: [(f64, f64); 6] = [(0.020, 0.99), (0.010, 0.99), (0.013, 0.99), (0.010, 0.99), (0.0015, 0.99), (0.012, 0.99)];
const ADAM: [(f64, f64, f64); 6] = [
    (0.025, 0.9, 0.999),
    (0.012, 0.9, 0.999),
    (0.016, 0.9, 0.999),
    (0.012, 0.9, 0.999),
    (0.0020, 0.9, 0.999),
    (0.015, 0.9, 0.999),
];
const LIONK: [(f64, f64, f64, u64, f64); 6] = [
    (0.010, 0.9, 0.99, 5, 1.15),
    (0.006, 0.9, 0.99, 5, 1.10),
    (0.008, 0.9, 0.99, 5, 1.10),
    (0.006, 0.9, 0.99, 5, 1.10),
    (0.0015, 0.9, 0.99, 4, 1.05),
    (0.008, 0.9, 0.99, 5, 1.10),
];
const SHAMPOO_LR: [f64; 6] = [0.020, 0.010, 0.013, 0.010, 0.0015, 0.012];
const SOAP: [(f64, f64, f64); 6] = [
    (0.012, 0.95, 0.99),
    (0.008, 0.95, 0.99),
    (0.010, 0.95, 0.99),
    (0.008, 0.95, 0.99),
    (0.0018, 0.95, 0.99),
    (0.010, 0.95, 0.99),
];
const SOPHIA: [(f64, f64, f64, f64); 6] = [
    (0.030, 0.965, 0.99, 0.030),
    (0.012, 0.965, 0.99, 0.025),
    (0.016, 0.965, 0.99, 0.030),
    (0.012, 0.965, 0.99, 0.025),
    (0.0020, 0.965, 0.99, 0.020),
    (0.016, 0.965, 0.99, 0.030),
];

/// Default hyperparameters for `method` on the task type `key`; unknown keys
/// use the fallback row. Methods without a table column borrow the closest
/// tabled row.
pub fn lookup_hparams(method: Method, key: &str) -> Hparams {
    let i = ROWS.iter().position(|r| *r == key).unwrap_or(5);
    let (alr, b1, b2) = ADAM[i];
    match method {
        Method::Gd => Hparams::Gd { lr: GD_LR[i] },
        Method::Momentum => Hparams::Momentum { lr: MOMENTUM[i].0, beta: MOMENTUM[i].1 },
        Method::Nag => Hparams::Nag { lr: NAG[i].0, beta: NAG[i].1 },
        Method::Adagrad => Hparams::Adagrad { lr: RMSPROP[i].0 },
        Method::Rmsprop => Hparams::Rmsprop { lr: RMSPROP[i].0, alpha: RMSPROP[i].1 },
        Method::Adadelta => Hparams::Adadelta { rho: 0.95 },
        Method::Adam => Hparams::Adam { lr: alr, beta1: b1, beta2: b2 },
        Method::Adamw => Hparams::Adamw { lr: alr, beta1: b1, beta2: b2, weight_decay: 0.01 },
        Method::Lookahead => Hparams::Lookahead { lr: alr, beta1: b1, beta2: b2, k: 5, alpha: 0.5 },
        Method::Sam => Hparams::Sam { lr: GD_LR[i], rho: 0.05 },
        Method::Sghmc => Hparams::Sghmc { lr: MOMENTUM[i].0, beta: MOMENTUM[i].1 },
        Method::Shampoo => Hparams::Shampoo { lr: SHAMPOO_LR[i] },
        Method::Soap => Hparams::Soap { lr: SOAP[i].0, beta: SOAP[i].1, nu: SOAP[i].2 },
        Method::Sophia => {
            let (lr, beta1, beta2, rho) = SOPHIA[i];
            Hparams::Sophia { lr, beta1, beta2, rho }
        }
        Method::Lionk => {
            let (lr, beta1, beta2, k, gamma_kick) = LIONK[i];
            Hparams::Lionk { lr, beta1, beta2, k, gamma_kick }
        }
        Method::Muon => Hparams::Muon { lr: NAG[i].0, mu: 0.95 },
    }
}

/// Whether an oracle query counts against the budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Charge {
    Budget,
    Auxiliary,
}

/// Shape used by the matrix methods: a square reshape when `d` is a perfect
/// square above one, otherwise a single row.
pub fn matrix_shape(d: usize) -> (usize, usize) {
    let s = (d as f64).sqrt().round() as usize;
    if s > 1 && s * s == d {
        (s, s)
    } else {
        (1, d)
    }
}

/// `(A + eps I)^power` for symmetric positive semidefinite `A`.
pub fn sym_power(a: &DMatrix<f64>, power: f64) -> Result<DMatrix<f64>, ShapeError> {
    let n = a.nrows();
    let reg = a + DMatrix::<f64>::identity(n, n) * EPS;
    let eig = SymmetricEigen::new(reg);
    if !eig.eigenvalues.iter().all(|v| v.is_finite()) {
        return Err(ShapeError::NonFinite("matrix root"));
    }
    let lam = eig.eigenvalues.map(|v| v.max(EPS).powf(power));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose())
}

/// Eigenvectors of a symmetric matrix, columns sorted by descending eigenvalue.
pub fn eigenbasis(a: &DMatrix<f64>) -> Result<DMatrix<f64>, ShapeError> {
    let eig = SymmetricEigen::new(a.clone());
    if !eig.eigenvalues.iter().all(|v| v.is_finite()) {
        return Err(ShapeError::NonFinite("eigenbasis"));
    }
    let mut idx: Vec<usize> = (0..a.nrows()).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    Ok(DMatrix::from_fn(a.nrows(), a.nrows(), |r, c| eig.eigenvectors[(r, idx[c])]))
}

/// `L^{-1/4} G R^{-1/4}`.
pub fn shampoo_direction(l: &DMatrix<f64>, r: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>, ShapeError> {
    Ok(sym_power(l, -0.25)? * g * sym_power(r, -0.25)?)
}

/// Diagonal scaling by `v` (row-major, rotated frame) of `G` expressed in the
/// bases `ql`, `qr`, mapped back to the original frame.
pub fn soap_direction(ql: &DMatrix<f64>, qr: &DMatrix<f64>, v: &[f64], g: &DMatrix<f64>) -> DMatrix<f64> {
    let rot = ql.transpose() * g * qr;
    let cols = rot.ncols();
    let scaled = DMatrix::from_fn(rot.nrows(), cols, |i, j| rot[(i, j)] / (v[i * cols + j].sqrt() + EPS));
    ql * scaled * qr.transpose()
}

/// Approximate polar factor by the quintic Newton-Schulz iteration applied to
/// the Frobenius-normalized input.
pub fn newton_schulz(b: &DMatrix<f64>) -> DMatrix<f64> {
    let (a, bb, c) = NS_COEFFS;
    let tall = b.nrows() > b.ncols();
    let mut x = if tall { b.transpose() } else { b.clone() };
    x /= x.norm() + EPS;
    for _ in 0..NS_ITERS {
        let g = &x * x.transpose();
        let poly = &g * bb + &g * &g * c;
        x = &x * a + poly * &x;
    }
    if tall {
        x.transpose()
    } else {
        x
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-run optimizer state. Unused arrays stay empty.
#[derive(Clone, Debug)]
pub struct BaselineState {
    pub hp: Hparams,
    pub q: Vec<f64>,
    /// Completed outer iterations.
    pub k: u64,
    /// Momentum / first moment / Muon buffer.
    pub m: Vec<f64>,
    /// Second moment / accumulator / Sophia curvature.
    pub v: Vec<f64>,
    /// AdaDelta squared-update average or Sophia's held curvature probe.
    pub u: Vec<f64>,
    /// Lookahead slow weights.
    pub slow: Vec<f64>,
    pub left: Option<DMatrix<f64>>,
    pub right: Option<DMatrix<f64>>,
    pub q_max: f64,
    rng: ChaCha8Rng,
}

impl BaselineState {
    pub fn new(hp: Hparams, q0: &[f64], q_max: f64, seed: u64) -> Self {
        let d = q0.len();
        let z = vec![0.0; d];
        let (rows, cols) = matrix_shape(d);
        let (left, right) = match hp.method() {
            Method::Shampoo | Method::Soap => {
                (Some(DMatrix::zeros(rows, rows)), Some(DMatrix::zeros(cols, cols)))
            }
            _ => (None, None),
        };
        let q: Vec<f64> = q0.iter().map(|v| v.clamp(-q_max, q_max)).collect();
        Self {
            hp,
            slow: q.clone(),
            q,
            k: 0,
            m: z.clone(),
            v: z.clone(),
            u: z,
            left,
            right,
            q_max,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 7000)),
        }
    }

    pub fn method(&self) -> Method {
        self.hp.method()
    }

    fn clip(&mut self) {
        let b = self.q_max;
        for x in self.q.iter_mut() {
            *x = x.clamp(-b, b);
        }
    }

    /// Advance one outer iteration. `grad(point, charge)` returns the
    /// oracle sample at `point`.
    pub fn step<F>(&mut self, mut grad: F) -> Result<(), ShapeError>
    where
        F: FnMut(&[f64], Charge) -> Result<OracleSample, ShapeError>,
    {
        let d = self.q.len();
        let t = self.k + 1;
        match self.hp {
            Hparams::Gd { lr } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                for i in 0..d {
                    self.q[i] -= lr * g[i];
                }
            }
            Hparams::Momentum { lr, beta } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                for i in 0..d {
                    self.m[i] = beta * self.m[i] - lr * g[i];
                    self.q[i] += lr * self.m[i];
                }
            }
            Hparams::Nag { lr, beta } => {
                let look: Vec<f64> = (0..d).map(|i| self.q[i] + beta * self.m[i]).collect();
                let g = grad(&look, Charge::Budget)?.g;
                for i in 0..d {
                    self.m[i] = beta * self.m[i] - lr * g[i];
                    self.q[i] += self.m[i];
                }
            }
            Hparams::Adagrad { lr } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                for i in 0..d {
                    self.v[i] += g[i] * g[i];
                    self.q[i] -= lr * g[i] / (self.v[i].sqrt() + EPS);
                }
            }
            Hparams::Rmsprop { lr, alpha } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                for i in 0..d {
                    self.v[i] = alpha * self.v[i] + (1.0 - alpha) * g[i] * g[i];
                    self.q[i] -= lr * g[i] / (self.v[i].sqrt() + EPS);
                }
            }
            Hparams::Adadelta { rho } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                for i in 0..d {
                    self.v[i] = rho * self.v[i] + (1.0 - rho) * g[i] * g[i];
                    let dq = -(self.u[i] + EPS).sqrt() / (self.v[i].sqrt() + EPS) * g[i];
                    self.u[i] = rho * self.u[i] + (1.0 - rho) * dq * dq;
                    self.q[i] += dq;
                }
            }
            Hparams::Adam { lr, beta1, beta2 } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                self.adam(&g, lr, beta1, beta2, t);
            }
            Hparams::Adamw { lr, beta1, beta2, weight_decay } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                let prev = self.q.clone();
                self.adam(&g, lr, beta1, beta2, t);
                for i in 0..d {
                    self.q[i] -= lr * weight_decay * prev[i];
                }
            }
            Hparams::Lookahead { lr, beta1, beta2, k, alpha } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                self.adam(&g, lr, beta1, beta2, t);
                if t % k.max(1) == 0 {
                    self.clip();
                    for i in 0..d {
                        self.slow[i] += alpha * (self.q[i] - self.slow[i]);
                    }
                    self.q.clone_from(&self.slow);
                }
            }
            Hparams::Sam { lr, rho } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                let pert: Vec<f64> = (0..d).map(|i| self.q[i] + rho * g[i] / (n + EPS)).collect();
                let g2 = grad(&pert, Charge::Budget)?.g;
                for i in 0..d {
                    self.q[i] -= lr * g2[i];
                }
            }
            Hparams::Sghmc { lr, beta } => {
                // gamma * eta = 1 - beta; unit mass
                let g = grad(&self.q, Charge::Budget)?.g;
                let noise = (2.0 * (1.0 - beta)).max(0.0).sqrt();
                for i in 0..d {
                    let xi: f64 = self.rng.sample(StandardNormal);
                    self.m[i] = beta * self.m[i] - lr * g[i] + noise * xi;
                    self.q[i] += lr * self.m[i];
                }
            }
            Hparams::Shampoo { lr } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                let (rows, cols) = matrix_shape(d);
                let gm = DMatrix::from_row_slice(rows, cols, &g);
                let l = self.left.as_mut().expect("shampoo state");
                *l += &gm * gm.transpose();
                let r = self.right.as_mut().expect("shampoo state");
                *r += gm.transpose() * &gm;
                let dir = shampoo_direction(self.left.as_ref().unwrap(), self.right.as_ref().unwrap(), &gm)?;
                for (i, x) in row_major(&dir).into_iter().enumerate() {
                    self.q[i] -= lr * x;
                }
            }
            Hparams::Soap { lr, beta, nu } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                let (rows, cols) = matrix_shape(d);
                let gm = DMatrix::from_row_slice(rows, cols, &g);
                let l = self.left.as_mut().expect("soap state");
                *l = &*l * beta + (&gm * gm.transpose()) * (1.0 - beta);
                let r = self.right.as_mut().expect("soap state");
                *r = &*r * beta + (gm.transpose() * &gm) * (1.0 - beta);
                let ql = eigenbasis(self.left.as_ref().unwrap())?;
                let qr = eigenbasis(self.right.as_ref().unwrap())?;
                let rot = row_major(&(ql.transpose() * &gm * &qr));
                for i in 0..d {
                    self.v[i] = nu * self.v[i] + (1.0 - nu) * rot[i] * rot[i];
                }
                let back = soap_direction(&ql, &qr, &self.v, &gm);
                for (i, x) in row_major(&back).into_iter().enumerate() {
                    self.q[i] -= lr * x;
                }
            }
            Hparams::Sophia { lr, beta1, beta2, rho } => {
                let s = grad(&self.q, Charge::Budget)?;
                if self.k % SOPHIA_REFRESH == 0 {
                    // Hutchinson diagonal: z * (H z), H z by a gradient difference
                    let z: Vec<f64> = (0..d).map(|_| if self.rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
                    let probe: Vec<f64> = (0..d).map(|i| self.q[i] + HVP_DELTA * z[i]).collect();
                    let gp = grad(&probe, Charge::Auxiliary)?.g;
                    for i in 0..d {
                        self.u[i] = z[i] * (gp[i] - s.g[i]) / HVP_DELTA;
                    }
                }
                for i in 0..d {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * s.g[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * self.u[i];
                    let step = (self.m[i] / (self.v[i].max(0.0) + EPS)).clamp(-rho, rho);
                    self.q[i] -= lr * step;
                }
            }
            Hparams::Lionk { lr, beta1, beta2, k, gamma_kick } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                let scale = if t % k.max(1) == 0 { lr * gamma_kick } else { lr };
                for i in 0..d {
                    let c = beta1 * self.m[i] + (1.0 - beta1) * g[i];
                    self.q[i] -= scale * sign(c);
                    self.m[i] = beta2 * self.m[i] + (1.0 - beta2) * g[i];
                }
            }
            Hparams::Muon { lr, mu } => {
                let g = grad(&self.q, Charge::Budget)?.g;
                for i in 0..d {
                    self.m[i] = mu * self.m[i] + g[i];
                }
                let (rows, cols) = matrix_shape(d);
                let o = newton_schulz(&DMatrix::from_row_slice(rows, cols, &self.m));
                for (i, x) in row_major(&o).into_iter().enumerate() {
                    self.q[i] -= lr * x;
                }
            }
        }
        self.k = t;
        self.clip();
        if !self.q.iter().all(|x| x.is_finite()) {
            return Err(ShapeError::NonFinite("baseline iterate"));
        }
        Ok(())
    }

    fn adam(&mut self, g: &[f64], lr: f64, beta1: f64, beta2: f64, t: u64) {
        let c1 = 1.0 - beta1.powi(t as i32);
        let c2 = 1.0 - beta2.powi(t as i32);
        for i in 0..g.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            self.q[i] -= lr * mh / (vh.sqrt() + EPS);
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// One charged oracle query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub q: Vec<f64>,
    /// Oracle value (an estimate for noisy oracles).
    pub f: f64,
    /// Cumulative charged calls after this query.
    pub calls: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrace {
    pub method: Method,
    pub rows: Vec<QueryRow>,
    pub iterations: u64,
    pub budget_total: u64,
    pub calls_used: u64,
    /// Charged calls beyond one per iteration (SAM's second gradient).
    pub surcharge_calls: u64,
    /// Uncharged probe calls (Sophia's curvature estimate).
    pub aux_calls: u64,
    pub shortfall: u64,
    pub diverged: bool,
    pub final_q: Vec<f64>,
}

/// Run a baseline until the budget cannot pay for another full iteration.
pub fn run_baseline(
    task: &Task,
    hp: Hparams,
    oracle_kind: OracleKind,
    budget: u64,
    q0: &[f64],
    stream: u64,
) -> Result<BaselineTrace, ShapeError> {
    if q0.len() != task.dim {
        return Err(ShapeError::InvalidConfig(format!("start dimension {} for task dimension {}", q0.len(), task.dim)));
    }
    let method = hp.method();
    let mut oracle = Oracle::new(oracle_kind, budget, task.seed, stream)?;
    let mut state = BaselineState::new(hp, q0, task.q_max(), derive_seed(task.seed, 900 + stream));
    let mut trace = BaselineTrace {
        method,
        rows: Vec::new(),
        iterations: 0,
        budget_total: budget,
        calls_used: 0,
        surcharge_calls: 0,
        aux_calls: 0,
        shortfall: budget,
        diverged: false,
        final_q: state.q.clone(),
    };
    let per_iter = method.calls_per_iteration() * oracle_kind.cost();
    while oracle.budget.can_afford(per_iter) {
        let mut charged = 0u64;
        let res = {
            let rows = &mut trace.rows;
            let aux = &mut trace.aux_calls;
            let oracle = &mut oracle;
            state.step(|point, charge| match charge {
                Charge::Budget => {
                    let s = oracle.query(task, point)?;
                    charged += 1;
                    rows.push(QueryRow { q: point.to_vec(), f: s.f, calls: oracle.budget.used });
                    Ok(s)
                }
                Charge::Auxiliary => {
                    *aux += oracle_kind.cost();
                    Ok(oracle.query_uncharged(task, point)?)
                }
            })
        };
        match res {
            Ok(()) => {}
            Err(e) if e.is_numerical() => {
                trace.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        trace.iterations += 1;
        trace.surcharge_calls += charged.saturating_sub(1) * oracle_kind.cost();
    }
    trace.final_q = state.q;
    trace.calls_used = oracle.budget.used;
    trace.shortfall = oracle.budget.remaining();
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        assert_eq!(lookup_hparams(Method::Gd, "ackley"), Hparams::Gd { lr: 0.030 });
        assert_eq!(lookup_hparams(Method::Adam, "lj_cluster"), Hparams::Adam { lr: 0.0020, beta1: 0.9, beta2: 0.999 });
        assert_eq!(
            lookup_hparams(Method::Sophia, "levy"),
            Hparams::Sophia { lr: 0.016, beta1: 0.965, beta2: 0.99, rho: 0.030 }
        );
        assert_eq!(lookup_hparams(Method::Gd, "phase"), lookup_hparams(Method::Gd, "fallback"));
    }

    #[test]
    fn heavy_ball_first_step() {
        let mut s = BaselineState::new(Hparams::Momentum { lr: 0.1, beta: 1.0 }, &[0.0], 10.0, 0);
        s.step(|_, _| Ok(OracleSample { f: 0.0, g: vec![1.0], calls: 1 })).unwrap();
        assert!((s.m[0] + 0.1).abs() < 1e-15);
        assert!((s.q[0] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn newton_schulz_is_near_orthogonal() {
        let b = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 0.5, 2.0]);
        let o = newton_schulz(&b);
        let sv = o.clone().svd(false, false).singular_values;
        // the quintic iteration drives singular values into roughly [0.7, 1.2]
        assert!(sv.iter().all(|s| *s > 0.6 && *s < 1.3), "{sv}");
    }
}
