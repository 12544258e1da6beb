//! Two-layer `affine -> tanh -> affine` networks.

use rand::Rng;

use crate::error::NumericError;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Tape handles for the four parameter tensors of an [`Mlp`].
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

const NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl Mlp {
    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::matrix(rows, cols, data).expect("sized by construction")
        };
        let w1 = uniform(hidden, input);
        let w2 = uniform(output, hidden);
        Self { w1, b1: Tensor::zeros(&[hidden]), w2, b2: Tensor::zeros(&[output]) }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[hidden, input]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[output, hidden]),
            b2: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// `(prefix.name, tensor)` pairs in a fixed order.
    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        NAMES
            .iter()
            .zip(self.params())
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect()
    }

    /// Rebuild from `named` output; shapes must match `self`.
    pub fn load_named(&mut self, prefix: &str, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<(), NumericError> {
        for (n, slot) in NAMES.iter().zip(self.params_mut()) {
            let key = format!("{prefix}.{n}");
            let t = lookup(&key).ok_or_else(|| NumericError::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape() != slot.shape() {
                return Err(NumericError::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NumericError> {
        if x.len() != self.input_dim() {
            return Err(NumericError::ShapeMismatch {
                op: "mlp_forward",
                left: self.w1.shape().to_vec(),
                right: vec![x.len()],
            });
        }
        let (h, i, o) = (self.hidden_dim(), self.input_dim(), self.output_dim());
        let mut hid = tensor::matvec(self.w1.data(), h, i, x);
        for (a, b) in hid.iter_mut().zip(self.b1.data()) {
            *a = (*a + b).tanh();
        }
        let mut out = tensor::matvec(self.w2.data(), o, h, &hid);
        for (a, b) in out.iter_mut().zip(self.b2.data()) {
            *a += b;
        }
        Ok(out)
    }

    /// Put the parameters on `tape` as differentiable leaves.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    /// Put the parameters on `tape` as constants.
    pub fn register_frozen(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
        }
    }
}

/// Recorded forward pass.
pub fn forward_tape(tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var, NumericError> {
    let a = tape.matvec(vars.w1, x)?;
    let a = tape.add(a, vars.b1)?;
    let h = tape.tanh(a);
    let o = tape.matvec(vars.w2, h)?;
    tape.add(o, vars.b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::init(5, 7, 3, &mut rng);
        let x = vec![0.1, -0.2, 0.3, 0.4, -0.5];
        let plain = mlp.forward(&x).unwrap();
        let mut tape = Tape::new();
        let vars = mlp.register(&mut tape);
        let xv = tape.constant(Tensor::vector(x));
        let out = forward_tape(&mut tape, &vars, xv).unwrap();
        for (a, b) in plain.iter().zip(tape.value(out).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn init_respects_bounds_and_zero_bias() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::init(16, 4, 2, &mut rng);
        assert!(mlp.w1.data().iter().all(|w| w.abs() <= 0.25));
        assert!(mlp.w2.data().iter().all(|w| w.abs() <= 0.5));
        assert!(mlp.b1.data().iter().chain(mlp.b2.data()).all(|&b| b == 0.0));
    }
}
