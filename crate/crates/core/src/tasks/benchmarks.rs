//! Shifted (optionally rotated) Ackley, Rastrigin and Levy functions.

use std::f64::consts::{E, PI};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const HALF_WIDTH: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseFunction {
    Ackley,
    Rastrigin,
    Levy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub base: BaseFunction,
    pub shift: Vec<f64>,
    /// Row-major orthogonal matrix, when rotation is enabled.
    pub rotation: Option<Vec<f64>>,
}

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix.
pub fn random_rotation<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = q[(i, j)];
        }
    }
    out
}

impl Benchmark {
    pub fn sample<R: Rng>(base: BaseFunction, dim: usize, rotate: bool, rng: &mut R) -> Self {
        let shift = (0..dim).map(|_| rng.gen_range(-HALF_WIDTH..HALF_WIDTH)).collect();
        let rotation = rotate.then(|| random_rotation(dim, rng));
        Self { base, shift, rotation }
    }

    fn to_local(&self, q: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = q.iter().zip(&self.shift).map(|(a, s)| a - s).collect();
        match &self.rotation {
            None => z,
            Some(r) => shape_numeric::tensor::matvec(r, z.len(), z.len(), &z),
        }
    }

    pub fn value_grad(&self, q: &[f64]) -> (f64, Vec<f64>) {
        let x = self.to_local(q);
        let (f, gx) = match self.base {
            BaseFunction::Ackley => ackley(&x),
            BaseFunction::Rastrigin => rastrigin(&x),
            BaseFunction::Levy => levy(&x),
        };
        let g = match &self.rotation {
            None => gx,
            Some(r) => shape_numeric::tensor::matvec_t(r, x.len(), x.len(), &gx),
        };
        (f, g)
    }
}

pub fn ackley(x: &[f64]) -> (f64, Vec<f64>) {
    let (a, b, c) = (20.0, 0.2, 2.0 * PI);
    let n = x.len() as f64;
    let r = (x.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let cs = x.iter().map(|v| (c * v).cos()).sum::<f64>() / n;
    let e1 = (-b * r).exp();
    let e2 = cs.exp();
    let f = -a * e1 - e2 + a + E;
    let g = x
        .iter()
        .map(|&v| {
            let t1 = if r > 0.0 { a * b * e1 * v / (n * r) } else { 0.0 };
            t1 + e2 * c * (c * v).sin() / n
        })
        .collect();
    (f, g)
}

pub fn rastrigin(x: &[f64]) -> (f64, Vec<f64>) {
    let w = 2.0 * PI;
    let f = 10.0 * x.len() as f64 + x.iter().map(|v| v * v - 10.0 * (w * v).cos()).sum::<f64>();
    let g = x.iter().map(|v| 2.0 * v + 10.0 * w * (w * v).sin()).collect();
    (f, g)
}

/// Levy function in the `w = 1 + x/4` convention, minimised at the origin.
pub fn levy(x: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len();
    let w: Vec<f64> = x.iter().map(|v| 1.0 + v / 4.0).collect();
    let mut dw = vec![0.0; n];
    let s1 = (PI * w[0]).sin();
    let mut f = s1 * s1;
    dw[0] += PI * (2.0 * PI * w[0]).sin();
    for i in 0..n - 1 {
        let a = w[i] - 1.0;
        let s = (PI * w[i] + 1.0).sin();
        f += a * a * (1.0 + 10.0 * s * s);
        dw[i] += 2.0 * a * (1.0 + 10.0 * s * s) + a * a * 10.0 * PI * (2.0 * (PI * w[i] + 1.0)).sin();
    }
    let a = w[n - 1] - 1.0;
    let s = (2.0 * PI * w[n - 1]).sin();
    f += a * a * (1.0 + s * s);
    dw[n - 1] += 2.0 * a * (1.0 + s * s) + a * a * 2.0 * PI * (4.0 * PI * w[n - 1]).sin();
    (f, dw.into_iter().map(|d| d / 4.0).collect())
}
