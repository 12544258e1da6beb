//! Task families: objective value, analytic gradient, domain, start
//! distribution and reference optimum.

pub mod benchmarks;
pub mod control;
pub mod lj;
pub mod multiwell;
pub mod phase;

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TaskError;
use crate::local_opt::lbfgs;
pub use benchmarks::{BaseFunction, Benchmark};
pub use control::{ControlSystem, ControlTask};
pub use lj::LjCluster;
pub use multiwell::Multiwell;
pub use phase::PhaseRetrieval;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Multiwell,
    Ackley,
    Levy,
    Rastrigin,
    Lj,
    Phase,
    Control,
    /// Convex quadratic used by diagnostics and tests.
    Quadratic,
}

impl Family {
    pub const BENCHMARK: [Family; 7] = [
        Family::Multiwell,
        Family::Ackley,
        Family::Levy,
        Family::Rastrigin,
        Family::Lj,
        Family::Phase,
        Family::Control,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Multiwell => "multiwell",
            Family::Ackley => "ackley",
            Family::Levy => "levy",
            Family::Rastrigin => "rastrigin",
            Family::Lj => "lj",
            Family::Phase => "phase",
            Family::Control => "control",
            Family::Quadratic => "quadratic",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Row label used by the baseline hyperparameter tables.
    pub fn table_key(self) -> &'static str {
        match self {
            Family::Ackley => "ackley",
            Family::Rastrigin => "rastrigin",
            Family::Levy => "levy",
            Family::Multiwell => "multi_well_barrier",
            Family::Lj => "lj_cluster",
            _ => "fallback",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = TaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Ok(match lower.as_str() {
            "multiwell" | "multi_well" | "multi_well_barrier" => Family::Multiwell,
            "ackley" => Family::Ackley,
            "levy" => Family::Levy,
            "rastrigin" => Family::Rastrigin,
            "lj" | "lj_cluster" => Family::Lj,
            "phase" | "phase_retrieval" => Family::Phase,
            "control" => Family::Control,
            "quadratic" => Family::Quadratic,
            _ => return Err(TaskError::UnknownFamily(s.to_string())),
        })
    }
}

/// Family-specific generation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskOptions {
    pub wells: usize,
    pub rotation: bool,
    pub lj_epsilon: f64,
    pub lj_sigma: f64,
    pub phase_noise: f64,
    pub control_system: ControlSystem,
}

impl Default for TaskOptions {
    fn default() -> Self {
        Self {
            wells: 3,
            rotation: false,
            lj_epsilon: 1.0,
            lj_sigma: 1.0,
            phase_noise: 0.0,
            control_system: ControlSystem::DoubleIntegrator,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    /// Row-major symmetric positive definite matrix.
    pub a: Vec<f64>,
    pub center: Vec<f64>,
    pub half_width: f64,
}

impl Quadratic {
    pub fn value_grad(&self, q: &[f64]) -> (f64, Vec<f64>) {
        let n = q.len();
        let z: Vec<f64> = q.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let g = shape_numeric::tensor::matvec(&self.a, n, n, &z);
        let f = 0.5 * shape_numeric::tensor::dot(&z, &g);
        (f, g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TaskKind {
    Multiwell(Multiwell),
    Benchmark(Benchmark),
    Lj(LjCluster),
    Phase(PhaseRetrieval),
    Control(ControlTask),
    Quadratic(Quadratic),
}

/// Reference optimum; `proxy` marks values found by an offline multistart
/// search rather than known in closed form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub q: Vec<f64>,
    pub f: f64,
    pub proxy: bool,
}

#[derive(Clone, Debug)]
pub struct Task {
    pub family: Family,
    pub dim: usize,
    pub seed: u64,
    pub kind: TaskKind,
    reference: OnceLock<Reference>,
}

/// Deterministic seed derived from a base seed and a stream label.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Instantiate a task of `family` and dimension `dim` from `seed`.
pub fn make_task(family: Family, dim: usize, seed: u64, opts: &TaskOptions) -> Result<Task, TaskError> {
    if dim == 0 {
        return Err(TaskError::InvalidConfig("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 + family.index() as u64));
    let kind = match family {
        Family::Multiwell => {
            if dim != 1 {
                return Err(TaskError::InvalidConfig(format!("multiwell is one-dimensional, got d={dim}")));
            }
            TaskKind::Multiwell(Multiwell::sample(opts.wells, &mut rng)?)
        }
        Family::Ackley | Family::Levy | Family::Rastrigin => {
            let base = match family {
                Family::Ackley => BaseFunction::Ackley,
                Family::Levy => BaseFunction::Levy,
                _ => BaseFunction::Rastrigin,
            };
            TaskKind::Benchmark(Benchmark::sample(base, dim, opts.rotation, &mut rng))
        }
        Family::Lj => {
            if dim % 3 != 0 {
                return Err(TaskError::InvalidConfig(format!("lj dimension {dim} is not a multiple of 3")));
            }
            TaskKind::Lj(LjCluster::new(dim / 3, opts.lj_epsilon, opts.lj_sigma)?)
        }
        Family::Phase => TaskKind::Phase(PhaseRetrieval::sample(dim, opts.phase_noise, &mut rng)),
        Family::Control => TaskKind::Control(ControlTask::sample(opts.control_system, dim, &mut rng)),
        Family::Quadratic => {
            let a = random_spd(dim, 0.5, 4.0, &mut rng);
            let center = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            TaskKind::Quadratic(Quadratic { a, center, half_width: 5.0 })
        }
    };
    Ok(Task::from_kind(family, dim, seed, kind))
}

/// Random SPD matrix `Q diag(lambda) Q^T` with eigenvalues uniform in `[lo, hi]`.
pub fn random_spd<R: Rng>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let q = benchmarks::random_rotation(n, rng);
    let lam: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| q[i * n + k] * lam[k] * q[j * n + k]).sum();
        }
    }
    a
}

impl Task {
    pub fn from_kind(family: Family, dim: usize, seed: u64, kind: TaskKind) -> Self {
        Self { family, dim, seed, kind, reference: OnceLock::new() }
    }

    pub fn id(&self) -> String {
        format!("{}-d{}-s{}", self.family, self.dim, self.seed)
    }

    fn check_dim(&self, q: &[f64]) -> Result<(), TaskError> {
        if q.len() != self.dim {
            return Err(TaskError::DimensionMismatch { expected: self.dim, got: q.len() });
        }
        Ok(())
    }

    pub fn value_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>), TaskError> {
        self.check_dim(q)?;
        Ok(match &self.kind {
            TaskKind::Multiwell(m) => {
                let (f, g) = m.value_grad(q[0]);
                (f, vec![g])
            }
            TaskKind::Benchmark(b) => b.value_grad(q),
            TaskKind::Lj(l) => l.value_grad(q)?,
            TaskKind::Phase(p) => p.value_grad(q),
            TaskKind::Control(c) => c.value_grad(q)?,
            TaskKind::Quadratic(a) => a.value_grad(q),
        })
    }

    pub fn value(&self, q: &[f64]) -> Result<f64, TaskError> {
        self.check_dim(q)?;
        Ok(match &self.kind {
            TaskKind::Multiwell(m) => m.value_grad(q[0]).0,
            TaskKind::Control(c) => c.value(q),
            _ => self.value_grad(q)?.0,
        })
    }

    pub fn grad(&self, q: &[f64]) -> Result<Vec<f64>, TaskError> {
        Ok(self.value_grad(q)?.1)
    }

    /// Half-width of the nominal box domain.
    pub fn half_width(&self) -> f64 {
        match &self.kind {
            TaskKind::Multiwell(_) => multiwell::HALF_WIDTH,
            TaskKind::Benchmark(_) => benchmarks::HALF_WIDTH,
            TaskKind::Lj(l) => l.half_width(),
            TaskKind::Phase(_) => phase::HALF_WIDTH,
            TaskKind::Control(_) => control::HALF_WIDTH,
            TaskKind::Quadratic(a) => a.half_width,
        }
    }

    /// Position clip used by every optimizer.
    pub fn q_max(&self) -> f64 {
        1.2 * self.half_width()
    }

    /// Length scale for trust radii and probe radii (1 on the benchmark box).
    pub fn unit(&self) -> f64 {
        self.half_width() / 5.0
    }

    pub fn sample_start<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let box_start = |rng: &mut R, hw: f64| -> Vec<f64> { (0..self.dim).map(|_| rng.gen_range(-hw..hw)).collect() };
        match &self.kind {
            TaskKind::Lj(l) => l.sample_start(rng),
            TaskKind::Phase(_) | TaskKind::Control(_) => box_start(rng, 1.0),
            _ => box_start(rng, self.half_width()),
        }
    }

    /// Start for particle `particle`, reproducible across methods.
    pub fn start_for(&self, particle: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 1000 + particle));
        self.sample_start(&mut rng)
    }

    pub fn phase(&self) -> Option<&PhaseRetrieval> {
        match &self.kind {
            TaskKind::Phase(p) => Some(p),
            _ => None,
        }
    }

    pub fn reference(&self) -> &Reference {
        self.reference.get_or_init(|| self.compute_reference())
    }

    fn compute_reference(&self) -> Reference {
        match &self.kind {
            TaskKind::Multiwell(m) => {
                let (x, v) = m.global_min();
                Reference { q: vec![x], f: v, proxy: false }
            }
            TaskKind::Benchmark(b) => Reference { q: b.shift.clone(), f: 0.0, proxy: false },
            TaskKind::Quadratic(a) => Reference { q: a.center.clone(), f: 0.0, proxy: false },
            TaskKind::Phase(p) => {
                let f = p.value_grad(&p.x_star).0;
                Reference { q: p.x_star.clone(), f, proxy: p.noise > 0.0 }
            }
            TaskKind::Lj(l) if l.atoms == 2 => {
                let r = l.pair_distance();
                Reference { q: vec![-0.5 * r, 0.0, 0.0, 0.5 * r, 0.0, 0.0], f: -l.epsilon, proxy: false }
            }
            TaskKind::Lj(l) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 77));
                let starts: Vec<Vec<f64>> = (0..32).map(|_| l.sample_start(&mut rng)).collect();
                self.multistart(starts, 3000)
            }
            TaskKind::Control(_) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 78));
                let mut starts = vec![vec![0.0; self.dim]];
                starts.extend((0..11).map(|_| (0..self.dim).map(|_| rng.gen_range(-3.0..3.0)).collect()));
                self.multistart(starts, 1000)
            }
        }
    }

    fn multistart(&self, starts: Vec<Vec<f64>>, iters: usize) -> Reference {
        let bound = self.q_max();
        let mut best: Option<(Vec<f64>, f64)> = None;
        for s in starts {
            if let Some((x, f)) = lbfgs(&s, iters, bound, |x| self.value_grad(x)) {
                if best.as_ref().map_or(true, |(_, bf)| f < *bf) {
                    best = Some((x, f));
                }
            }
        }
        let (q, f) = best.unwrap_or_else(|| (vec![0.0; self.dim], f64::INFINITY));
        Reference { q, f, proxy: true }
    }

    /// Family-specific distance to the reference solution set.
    pub fn distance(&self, q: &[f64]) -> f64 {
        match &self.kind {
            TaskKind::Lj(_) => lj::aligned_rmsd(q, &self.reference().q),
            TaskKind::Phase(p) => p.distance(q),
            TaskKind::Control(c) => c.terminal_distance(q),
            _ => {
                let r = &self.reference().q;
                q.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            }
        }
    }

    /// Gap threshold below which a run counts as a hit.
    pub fn hit_tolerance(&self, initial_gap: f64) -> f64 {
        match &self.kind {
            TaskKind::Multiwell(_) => 0.1,
            TaskKind::Benchmark(_) => 0.5,
            TaskKind::Lj(l) => 0.05 * l.epsilon,
            TaskKind::Phase(_) => 1e-2,
            TaskKind::Control(_) => 0.05 * initial_gap.max(0.0),
            TaskKind::Quadratic(_) => 1e-3,
        }
    }

    /// Whether visited minima can be counted by hashing positions into cells.
    pub fn supports_minima_count(&self) -> bool {
        !matches!(self.kind, TaskKind::Lj(_))
    }

    /// Fixed-length descriptor: family one-hot followed by a log-dimension feature.
    pub fn descriptor(&self) -> Vec<f64> {
        let mut d = vec![0.0; DESCRIPTOR_LEN];
        d[self.family.index()] = 1.0;
        d[DESCRIPTOR_LEN - 1] = (1.0 + self.dim as f64).ln() / 501f64.ln();
        d
    }
}

pub const DESCRIPTOR_LEN: usize = 9;
