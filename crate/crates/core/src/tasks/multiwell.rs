//! One-dimensional multi-well landscape built from zero-slope Hermite pieces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::TaskError;

pub const HALF_WIDTH: f64 = 5.0;
pub const WALL_CURVATURE: f64 = 50.0;
pub const GLOBAL_MARGIN: f64 = 0.5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Multiwell {
    /// Knot locations including the two boundary knots at `-K` and `K`.
    pub knots: Vec<f64>,
    /// Knot values; valleys sit at odd indices.
    pub values: Vec<f64>,
    pub wells: usize,
    /// Index into `knots` of the global valley.
    pub global: usize,
}

impl Multiwell {
    pub fn sample<R: Rng>(wells: usize, rng: &mut R) -> Result<Self, TaskError> {
        if wells == 0 {
            return Err(TaskError::InvalidConfig("multiwell needs at least one well".into()));
        }
        let k = HALF_WIDTH;
        let interior = 2 * wells - 1;
        let sep = 2.0 * k / (4 * wells) as f64;
        // interior knots x_i = -K + i*sep + u_(i) with sorted u in [0, K]
        let mut u: Vec<f64> = (0..interior).map(|_| rng.gen_range(0.0..k)).collect();
        u.sort_by(|a, b| a.total_cmp(b));
        let mut knots = vec![-k];
        for (i, ui) in u.iter().enumerate() {
            knots.push(-k + (i + 1) as f64 * sep + ui);
        }
        knots.push(k);

        let mut values = vec![0.0; interior + 2];
        let mut max_barrier: f64 = 0.0;
        for i in 1..=interior {
            values[i] = if i % 2 == 1 {
                rng.gen_range(0.0..2.0)
            } else {
                let b = rng.gen_range(3.0..6.0);
                max_barrier = max_barrier.max(b);
                b
            };
        }
        let valleys: Vec<usize> = (1..=interior).step_by(2).collect();
        let global = valleys[rng.gen_range(0..valleys.len())];
        let others = valleys
            .iter()
            .filter(|&&i| i != global)
            .map(|&i| values[i])
            .fold(f64::INFINITY, f64::min);
        if others.is_finite() {
            values[global] = others - GLOBAL_MARGIN;
        }
        let wall = max_barrier.max(values[1..=interior].iter().cloned().fold(0.0, f64::max)) + 1.0;
        values[0] = wall;
        values[interior + 1] = wall;
        Ok(Self { knots, values, wells, global })
    }

    pub fn valley_locations(&self) -> Vec<f64> {
        (1..self.knots.len() - 1).step_by(2).map(|i| self.knots[i]).collect()
    }

    pub fn global_min(&self) -> (f64, f64) {
        (self.knots[self.global], self.values[self.global])
    }

    fn piece(&self, x: f64) -> usize {
        let i = self.knots.partition_point(|&k| k <= x);
        i.clamp(1, self.knots.len() - 1) - 1
    }

    pub fn value_grad(&self, x: f64) -> (f64, f64) {
        let k = HALF_WIDTH;
        let wall = self.values[0];
        if x < -k {
            let e = x + k;
            return (wall + 0.5 * WALL_CURVATURE * e * e, WALL_CURVATURE * e);
        }
        if x > k {
            let e = x - k;
            return (wall + 0.5 * WALL_CURVATURE * e * e, WALL_CURVATURE * e);
        }
        let i = self.piece(x);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let dx = x1 - x0;
        let t = (x - x0) / dx;
        let h00 = 2.0 * t * t * t - 3.0 * t * t + 1.0;
        let h01 = -2.0 * t * t * t + 3.0 * t * t;
        let slope = (y1 - y0) * (6.0 * t - 6.0 * t * t) / dx;
        (y0 * h00 + y1 * h01, slope)
    }
}
