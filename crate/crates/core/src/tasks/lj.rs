//! Lennard-Jones clusters in three dimensions.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::TaskError;

pub const SINGULAR_DISTANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LjCluster {
    pub atoms: usize,
    pub epsilon: f64,
    pub sigma: f64,
}

impl LjCluster {
    pub fn new(atoms: usize, epsilon: f64, sigma: f64) -> Result<Self, TaskError> {
        if atoms < 2 || epsilon <= 0.0 || sigma <= 0.0 {
            return Err(TaskError::InvalidConfig(format!(
                "lj needs >= 2 atoms and positive parameters (atoms {atoms}, eps {epsilon}, sigma {sigma})"
            )));
        }
        Ok(Self { atoms, epsilon, sigma })
    }

    pub fn half_width(&self) -> f64 {
        self.sigma * (1.0 + 0.5 * (self.atoms as f64).cbrt())
    }

    /// Equilibrium pair distance `2^(1/6) sigma`.
    pub fn pair_distance(&self) -> f64 {
        2f64.powf(1.0 / 6.0) * self.sigma
    }

    pub fn value_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>), TaskError> {
        let n = self.atoms;
        let s6 = self.sigma.powi(6);
        let mut f = 0.0;
        let mut g = vec![0.0; 3 * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = [q[3 * i] - q[3 * j], q[3 * i + 1] - q[3 * j + 1], q[3 * i + 2] - q[3 * j + 2]];
                let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let r = r2.sqrt();
                if r < SINGULAR_DISTANCE {
                    return Err(TaskError::SingularConfiguration { i, j, r });
                }
                let ir6 = s6 / (r2 * r2 * r2);
                f += 4.0 * self.epsilon * (ir6 * ir6 - ir6);
                // dE/dr / r
                let de = 4.0 * self.epsilon * (-12.0 * ir6 * ir6 + 6.0 * ir6) / r2;
                for k in 0..3 {
                    g[3 * i + k] += de * d[k];
                    g[3 * j + k] -= de * d[k];
                }
            }
        }
        Ok((f, g))
    }

    /// Uniform positions in the box, rejecting pairs closer than `0.7 sigma`.
    pub fn sample_start<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let hw = 0.8 * self.half_width();
        let min_d = 0.7 * self.sigma;
        let mut pos: Vec<[f64; 3]> = Vec::with_capacity(self.atoms);
        let mut tries = 0;
        while pos.len() < self.atoms {
            tries += 1;
            let p = [rng.gen_range(-hw..hw), rng.gen_range(-hw..hw), rng.gen_range(-hw..hw)];
            let ok = pos.iter().all(|o| {
                let d2: f64 = (0..3).map(|k| (o[k] - p[k]).powi(2)).sum();
                d2 >= min_d * min_d
            });
            if ok || tries > 10_000 {
                pos.push(p);
            }
        }
        pos.into_iter().flatten().collect()
    }
}

fn centered(q: &[f64]) -> Vec<Vector3<f64>> {
    let n = q.len() / 3;
    let pts: Vec<Vector3<f64>> = (0..n).map(|i| Vector3::new(q[3 * i], q[3 * i + 1], q[3 * i + 2])).collect();
    let c = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n as f64;
    pts.into_iter().map(|p| p - c).collect()
}

/// Kabsch RMSD between two equally ordered point sets after centering.
fn kabsch_rmsd(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let mut h = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        h += x * y.transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = vt.transpose() * d * u.transpose();
    let s: f64 = a.iter().zip(b).map(|(x, y)| (rot * x - y).norm_squared()).sum();
    (s / a.len() as f64).sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut v = p.clone();
            v.insert(i, n - 1);
            out.push(v);
        }
    }
    out
}

/// RMSD after optimal translation and rotation; atom relabelling is searched
/// exhaustively for up to seven atoms.
pub fn aligned_rmsd(q: &[f64], reference: &[f64]) -> f64 {
    let a = centered(q);
    let b = centered(reference);
    if a.len() <= 7 {
        permutations(a.len())
            .into_iter()
            .map(|perm| {
                let pa: Vec<Vector3<f64>> = perm.iter().map(|&i| a[i]).collect();
                kabsch_rmsd(&pa, &b)
            })
            .fold(f64::INFINITY, f64::min)
    } else {
        kabsch_rmsd(&a, &b)
    }
}
