//! Numeric substrate: dense `f64` tensors, a reverse-mode tape over tensor
//! operations, two-layer MLPs, Adam and a plain-text checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod mlp;
pub mod tape;
pub mod tensor;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use error::NumericError;
pub use mlp::{Mlp, MlpVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
