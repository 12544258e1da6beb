//! Budgeted first-order oracles: exact, noisy, two-point zeroth-order and
//! minibatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::OracleError;
use crate::tasks::{derive_seed, Task};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleKind {
    Exact,
    Stochastic { sigma: f64 },
    ZerothOrder { eps: f64, k: usize },
    Minibatch { batch: usize },
}

impl Default for OracleKind {
    fn default() -> Self {
        OracleKind::Exact
    }
}

impl OracleKind {
    pub fn zeroth_order_default() -> Self {
        OracleKind::ZerothOrder { eps: 1e-3, k: 4 }
    }

    /// Calls charged per query.
    pub fn cost(&self) -> u64 {
        match self {
            OracleKind::ZerothOrder { k, .. } => 2 * *k as u64,
            _ => 1,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            OracleKind::Exact => "exact",
            OracleKind::Stochastic { .. } => "stochastic",
            OracleKind::ZerothOrder { .. } => "zeroth_order",
            OracleKind::Minibatch { .. } => "minibatch",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub total: u64,
    pub used: u64,
}

impl Budget {
    pub fn new(total: u64) -> Self {
        Self { total, used: 0 }
    }

    pub fn remaining(&self) -> u64 {
        self.total - self.used
    }

    pub fn can_afford(&self, calls: u64) -> bool {
        self.used + calls <= self.total
    }

    pub fn charge(&mut self, calls: u64) -> Result<(), OracleError> {
        if !self.can_afford(calls) {
            return Err(OracleError::BudgetExhausted { used: self.used, total: self.total, requested: calls });
        }
        self.used += calls;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSample {
    pub f: f64,
    pub g: Vec<f64>,
    pub calls: u64,
}

pub fn query_exact(task: &Task, q: &[f64], budget: &mut Budget) -> Result<OracleSample, OracleError> {
    budget.charge(1)?;
    let (f, g) = task.value_grad(q)?;
    Ok(OracleSample { f, g, calls: 1 })
}

/// Exact value with gradient perturbed by `sigma * xi`, `xi ~ N(0, I)`.
pub fn query_stochastic<R: Rng>(
    task: &Task,
    q: &[f64],
    sigma: f64,
    rng: &mut R,
    budget: &mut Budget,
) -> Result<OracleSample, OracleError> {
    budget.charge(1)?;
    let (f, mut g) = task.value_grad(q)?;
    for gi in g.iter_mut() {
        *gi += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(OracleSample { f, g, calls: 1 })
}

/// Two-point estimator averaged over `k` directions drawn uniformly from the
/// unit sphere; charges `2k` value calls. The reported value is the mean of
/// the probe values.
pub fn query_zeroth_order<R: Rng>(
    task: &Task,
    q: &[f64],
    eps: f64,
    k: usize,
    rng: &mut R,
    budget: &mut Budget,
) -> Result<OracleSample, OracleError> {
    if k == 0 || eps <= 0.0 {
        return Err(OracleError::InvalidConfig(format!("zeroth-order needs k >= 1 and eps > 0 (k={k}, eps={eps})")));
    }
    let cost = 2 * k as u64;
    budget.charge(cost)?;
    let d = q.len();
    let mut g = vec![0.0; d];
    let mut fsum = 0.0;
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    for _ in 0..k {
        let u = unit_direction(d, rng);
        for i in 0..d {
            plus[i] = q[i] + eps * u[i];
            minus[i] = q[i] - eps * u[i];
        }
        let fp = task.value(&plus)?;
        let fm = task.value(&minus)?;
        fsum += fp + fm;
        let c = (fp - fm) / (2.0 * eps * k as f64);
        for i in 0..d {
            g[i] += c * u[i];
        }
    }
    Ok(OracleSample { f: fsum / cost as f64, g, calls: cost })
}

pub fn unit_direction<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return u.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Minibatch estimate for phase retrieval; one call regardless of batch size.
pub fn query_minibatch<R: Rng>(
    task: &Task,
    q: &[f64],
    batch: usize,
    rng: &mut R,
    budget: &mut Budget,
) -> Result<OracleSample, OracleError> {
    let phase = task
        .phase()
        .ok_or_else(|| OracleError::InvalidConfig(format!("minibatch oracle needs a phase task, got {}", task.family)))?;
    if q.len() != task.dim {
        return Err(crate::error::TaskError::DimensionMismatch { expected: task.dim, got: q.len() }.into());
    }
    budget.charge(1)?;
    let (f, g) = phase.minibatch(q, batch, rng);
    Ok(OracleSample { f, g, calls: 1 })
}

/// Oracle with its own noise stream and budget.
///
/// The noise stream is a function of `(seed, stream)` only, so methods run on
/// the same task and particle see identical draws at identical call indices.
#[derive(Clone, Debug)]
pub struct Oracle {
    pub kind: OracleKind,
    pub budget: Budget,
    rng: ChaCha8Rng,
}

impl Oracle {
    pub fn new(kind: OracleKind, total: u64, seed: u64, stream: u64) -> Result<Self, OracleError> {
        match kind {
            OracleKind::Stochastic { sigma } if !(sigma >= 0.0) => {
                return Err(OracleError::InvalidConfig(format!("noise level must be non-negative, got {sigma}")))
            }
            OracleKind::ZerothOrder { eps, k } if k == 0 || !(eps > 0.0) => {
                return Err(OracleError::InvalidConfig(format!("zeroth-order needs k >= 1 and eps > 0 (k={k}, eps={eps})")))
            }
            OracleKind::Minibatch { batch } if batch == 0 => {
                return Err(OracleError::InvalidConfig("minibatch size must be positive".into()))
            }
            _ => {}
        }
        Ok(Self { kind, budget: Budget::new(total), rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 5000 + stream)) })
    }

    pub fn can_query(&self) -> bool {
        self.budget.can_afford(self.kind.cost())
    }

    pub fn query(&mut self, task: &Task, q: &[f64]) -> Result<OracleSample, OracleError> {
        match self.kind {
            OracleKind::Exact => query_exact(task, q, &mut self.budget),
            OracleKind::Stochastic { sigma } => query_stochastic(task, q, sigma, &mut self.rng, &mut self.budget),
            OracleKind::ZerothOrder { eps, k } => query_zeroth_order(task, q, eps, k, &mut self.rng, &mut self.budget),
            OracleKind::Minibatch { batch } => query_minibatch(task, q, batch, &mut self.rng, &mut self.budget),
        }
    }

    /// Gradient estimate outside the budget (reported in a separate column).
    pub fn query_uncharged(&mut self, task: &Task, q: &[f64]) -> Result<OracleSample, OracleError> {
        let mut free = Budget::new(u64::MAX);
        let mut s = match self.kind {
            OracleKind::Exact => query_exact(task, q, &mut free),
            OracleKind::Stochastic { sigma } => query_stochastic(task, q, sigma, &mut self.rng, &mut free),
            OracleKind::ZerothOrder { eps, k } => query_zeroth_order(task, q, eps, k, &mut self.rng, &mut free),
            OracleKind::Minibatch { batch } => query_minibatch(task, q, batch, &mut self.rng, &mut free),
        }?;
        s.calls = 0;
        Ok(s)
    }
}
