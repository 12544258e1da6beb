//! Real phase retrieval with a Gaussian sensing matrix.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const HALF_WIDTH: f64 = 3.0;
pub const RIDGE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRetrieval {
    pub n: usize,
    pub m: usize,
    /// Row-major `m x n` sensing matrix.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub x_star: Vec<f64>,
    pub ridge: f64,
    pub noise: f64,
}

impl PhaseRetrieval {
    /// `m = 4n` rows with `N(0, 1/n)` entries so each row has unit expected norm.
    pub fn sample<R: Rng>(n: usize, noise: f64, rng: &mut R) -> Self {
        let m = 4 * n;
        let scale = 1.0 / (n as f64).sqrt();
        let a: Vec<f64> = (0..m * n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let x_star: Vec<f64> =
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal).clamp(-2.5, 2.5)).collect();
        let b = (0..m)
            .map(|i| {
                let z = dot_row(&a, n, i, &x_star);
                z * z + noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        Self { n, m, a, b, x_star, ridge: RIDGE, noise }
    }

    fn value_grad_rows(&self, x: &[f64], rows: &[usize]) -> (f64, Vec<f64>) {
        let k = rows.len() as f64;
        let mut f = 0.0;
        let mut g = vec![0.0; self.n];
        for &i in rows {
            let z = dot_row(&self.a, self.n, i, x);
            let r = z * z - self.b[i];
            f += r * r;
            let c = 4.0 * r * z / k;
            for (gj, aj) in g.iter_mut().zip(&self.a[i * self.n..(i + 1) * self.n]) {
                *gj += c * aj;
            }
        }
        let x2: f64 = x.iter().map(|v| v * v).sum();
        for (gj, xj) in g.iter_mut().zip(x) {
            *gj += self.ridge * xj;
        }
        (f / k + 0.5 * self.ridge * x2, g)
    }

    pub fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let rows: Vec<usize> = (0..self.m).collect();
        self.value_grad_rows(x, &rows)
    }

    /// Unbiased estimate from `batch` rows drawn without replacement.
    pub fn minibatch<R: Rng>(&self, x: &[f64], batch: usize, rng: &mut R) -> (f64, Vec<f64>) {
        let batch = batch.clamp(1, self.m);
        let rows = sample(rng, self.m, batch).into_vec();
        self.value_grad_rows(x, &rows)
    }

    /// Distance to the solution set `{x*, -x*}`.
    pub fn distance(&self, x: &[f64]) -> f64 {
        let dp: f64 = x.iter().zip(&self.x_star).map(|(a, b)| (a - b).powi(2)).sum();
        let dm: f64 = x.iter().zip(&self.x_star).map(|(a, b)| (a + b).powi(2)).sum();
        dp.min(dm).sqrt()
    }
}

fn dot_row(a: &[f64], n: usize, i: usize, x: &[f64]) -> f64 {
    a[i * n..(i + 1) * n].iter().zip(x).map(|(p, q)| p * q).sum()
}
