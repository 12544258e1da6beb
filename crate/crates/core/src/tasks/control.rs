//! Finite-horizon control by direct shooting: the decision variable is the
//! control sequence, the objective is the rolled-out quadratic cost.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use shape_numeric::{NumericError, Tape, Tensor, Var};

pub const HALF_WIDTH: f64 = 5.0;
pub const HORIZON_TIME: f64 = 2.0;
pub const GRAVITY: f64 = 9.81;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControlSystem {
    #[default]
    DoubleIntegrator,
    Pendulum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlTask {
    pub system: ControlSystem,
    pub horizon: usize,
    pub dt: f64,
    pub x0: [f64; 2],
    pub target: [f64; 2],
    pub damping: f64,
    pub state_weight: f64,
    pub terminal_weight: f64,
    pub control_weight: f64,
}

impl ControlTask {
    pub fn new(system: ControlSystem, horizon: usize, x0: [f64; 2], target: [f64; 2]) -> Self {
        Self {
            system,
            horizon,
            dt: HORIZON_TIME / horizon as f64,
            x0,
            target,
            damping: 0.1,
            state_weight: 1.0,
            terminal_weight: 10.0,
            control_weight: 1e-2,
        }
    }

    pub fn sample<R: Rng>(system: ControlSystem, horizon: usize, rng: &mut R) -> Self {
        match system {
            ControlSystem::DoubleIntegrator => {
                let x0 = [rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)];
                Self::new(system, horizon, x0, [0.0, 0.0])
            }
            ControlSystem::Pendulum => {
                let x0 = [rng.gen_range(-0.2..0.2), 0.0];
                let mut t = Self::new(system, horizon, x0, [PI, 0.0]);
                t.damping = rng.gen_range(0.05..0.2);
                t
            }
        }
    }

    fn step(&self, x: [f64; 2], u: f64) -> [f64; 2] {
        match self.system {
            ControlSystem::DoubleIntegrator => [x[0] + self.dt * x[1], x[1] + self.dt * u],
            ControlSystem::Pendulum => [
                x[0] + self.dt * x[1],
                x[1] + self.dt * (-GRAVITY * x[0].sin() - self.damping * x[1] + u),
            ],
        }
    }

    pub fn terminal_state(&self, u: &[f64]) -> [f64; 2] {
        u.iter().fold(self.x0, |x, &ut| self.step(x, ut))
    }

    fn dev2(&self, x: [f64; 2]) -> f64 {
        (x[0] - self.target[0]).powi(2) + (x[1] - self.target[1]).powi(2)
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        let mut x = self.x0;
        let mut f = 0.0;
        for &ut in u {
            f += self.state_weight * self.dt * self.dev2(x) + self.control_weight * ut * ut;
            x = self.step(x, ut);
        }
        f + self.terminal_weight * self.dev2(x)
    }

    /// Value and gradient by reverse-mode differentiation of the rollout.
    pub fn value_grad(&self, u: &[f64]) -> Result<(f64, Vec<f64>), NumericError> {
        let mut t = Tape::new();
        let uv = t.leaf(Tensor::vector(u.to_vec()));
        let mut pos = t.scalar(self.x0[0]);
        let mut vel = t.scalar(self.x0[1]);
        let mut cost = t.scalar(0.0);
        for k in 0..u.len() {
            let ut = t.slice(uv, k, 1)?;
            let ut = t.sum(ut);
            let dev = self.deviation(&mut t, pos, vel)?;
            let run = t.scale(dev, self.state_weight * self.dt);
            let u2 = t.hadamard(ut, ut)?;
            let u2 = t.scale(u2, self.control_weight);
            cost = t.add(cost, run)?;
            cost = t.add(cost, u2)?;
            let dpos = t.scale(vel, self.dt);
            let acc = match self.system {
                ControlSystem::DoubleIntegrator => ut,
                ControlSystem::Pendulum => {
                    let s = t.sin(pos);
                    let s = t.scale(s, -GRAVITY);
                    let d = t.scale(vel, -self.damping);
                    let a = t.add(s, d)?;
                    t.add(a, ut)?
                }
            };
            let dvel = t.scale(acc, self.dt);
            pos = t.add(pos, dpos)?;
            vel = t.add(vel, dvel)?;
        }
        let dev = self.deviation(&mut t, pos, vel)?;
        let term = t.scale(dev, self.terminal_weight);
        cost = t.add(cost, term)?;
        let g = t.backward(cost)?;
        let grad = g.get_or_zeros(uv, t.value(uv)).into_data();
        Ok((t.scalar_value(cost), grad))
    }

    fn deviation(&self, t: &mut Tape, pos: Var, vel: Var) -> Result<Var, NumericError> {
        let ep = t.add_const(pos, -self.target[0]);
        let ev = t.add_const(vel, -self.target[1]);
        let a = t.hadamard(ep, ep)?;
        let b = t.hadamard(ev, ev)?;
        t.add(a, b)
    }

    pub fn terminal_distance(&self, u: &[f64]) -> f64 {
        self.dev2(self.terminal_state(u)).sqrt()
    }
}
