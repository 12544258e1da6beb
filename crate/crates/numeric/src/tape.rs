//! Reverse-mode automatic differentiation over tensor-valued nodes.
//!
//! Nodes are appended in evaluation order, so parents always have smaller
//! indices than their children and a single reverse sweep suffices.

use crate::error::NumericError;
use crate::tensor::{self, Tensor};
use crate::{sigmoid, softplus};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy(Var, Var),
    MatVec(Var, Var),
    MatVecT(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Dot(Var, Var),
    Norm2(Var),
    Tanh(Var),
    Softplus(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Recip(Var),
    Clip(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    External(Var, Tensor),
    LogSumExp(Var),
    Huber(Var, f64),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of tensor operations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros of `like`'s shape when `v` received none.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros_like(like))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericError {
    NumericError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(1024) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Hadamard(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Elementwise `a + c`.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(value, Op::AddConst(a), ng)
    }

    /// `s * a` where `s` is a single-element node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, NumericError> {
        let sv = self.value(s).item()?;
        let value = self.value(a).scale(sv);
        let ng = self.ng(&[a, s]);
        Ok(self.push(value, Op::ScaleBy(a, s), ng))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var, NumericError> {
        let value = self.value(m).matvec(self.value(v))?;
        let ng = self.ng(&[m, v]);
        Ok(self.push(value, Op::MatVec(m, v), ng))
    }

    /// `m^T v` without materialising the transpose.
    pub fn matvec_t(&mut self, m: Var, v: Var) -> Result<Var, NumericError> {
        let value = self.value(m).matvec_t(self.value(v))?;
        let ng = self.ng(&[m, v]);
        Ok(self.push(value, Op::MatVecT(m, v), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericError> {
        let value = self.value(a).transpose()?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let value = Tensor::scalar(self.value(a).dot(self.value(b))?);
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Dot(a, b), ng))
    }

    /// Euclidean norm; the adjoint at the origin is taken to be zero.
    pub fn norm2(&mut self, a: Var) -> Result<Var, NumericError> {
        self.value(a).check_finite("norm2")?;
        let value = Tensor::scalar(self.value(a).norm2());
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Norm2(a), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(value, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, NumericError> {
        if self.value(a).data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(NumericError::NonFinite { op: "sqrt" });
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var, NumericError> {
        if self.value(a).data().iter().any(|&x| x == 0.0) {
            return Err(NumericError::NonFinite { op: "recip" });
        }
        Ok(self.unary(a, |x| 1.0 / x, Op::Recip(a)))
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only inside the box.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clip(a, lo, hi))
    }

    /// Concatenate rank-0/1 nodes into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), ng)
    }

    /// `a[start..start + len]` of a flattened node, as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let src = self.value(a);
        if start + len > src.len() {
            return Err(NumericError::Invalid {
                op: "slice",
                msg: format!("{}..{} out of {}", start, start + len, src.len()),
            });
        }
        let value = Tensor::vector(src.data()[start..start + len].to_vec());
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Slice(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericError> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Scalar computed outside the tape with known gradient `grad` w.r.t. `input`.
    pub fn external(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var, NumericError> {
        if grad.len() != self.value(input).len() {
            return Err(mismatch("external", self.value(input), &grad));
        }
        let ng = self.ng(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::External(input, grad), ng))
    }

    pub fn logsumexp(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = x.iter().map(|v| (v - m).exp()).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(m + s.ln()), Op::LogSumExp(a), ng)
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        self.unary(
            a,
            move |x| {
                if x.abs() <= delta {
                    0.5 * x * x
                } else {
                    delta * (x.abs() - 0.5 * delta)
                }
            },
            Op::Huber(a, delta),
        )
    }

    /// Adjoints of every node with respect to the single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, NumericError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(NumericError::NotScalar(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NumericError> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Tensor| -> Result<(), NumericError> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    if existing.len() != d.len() {
                        return Err(mismatch("backward", existing, &d));
                    }
                    for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                        *e += x;
                    }
                }
                slot @ None => {
                    let shape = val(v).shape().to_vec();
                    *slot = Some(Tensor::new(shape, d.into_data())?);
                }
            }
            Ok(())
        };
        let gs = || g.data()[0];
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Hadamard(a, b) => {
                acc(*a, g.hadamard(val(*b))?)?;
                acc(*b, g.hadamard(val(*a))?)?;
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::AddConst(a) => acc(*a, g.clone())?,
            Op::ScaleBy(a, s) => {
                let sv = val(*s).data()[0];
                acc(*a, g.scale(sv))?;
                let ds = tensor::dot(val(*a).data(), g.data());
                acc(*s, Tensor::vector(vec![ds]))?;
            }
            Op::MatVec(m, v) => {
                let mv = val(*m);
                let (r, c) = (mv.shape()[0], mv.shape()[1]);
                if self.nodes[m.0].needs_grad {
                    let x = val(*v).data();
                    let mut dm = vec![0.0; r * c];
                    for i in 0..r {
                        let gi = g.data()[i];
                        for j in 0..c {
                            dm[i * c + j] = gi * x[j];
                        }
                    }
                    acc(*m, Tensor::vector(dm))?;
                }
                acc(*v, Tensor::vector(tensor::matvec_t(mv.data(), r, c, g.data())))?;
            }
            Op::MatVecT(m, v) => {
                let mv = val(*m);
                let (r, c) = (mv.shape()[0], mv.shape()[1]);
                if self.nodes[m.0].needs_grad {
                    let x = val(*v).data();
                    let mut dm = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] = x[i] * g.data()[j];
                        }
                    }
                    acc(*m, Tensor::vector(dm))?;
                }
                acc(*v, Tensor::vector(tensor::matvec(mv.data(), r, c, g.data())))?;
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, g.matmul(&bv.transpose()?)?)?;
                acc(*b, av.transpose()?.matmul(g)?)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose()?)?,
            Op::Sum(a) => {
                let n = val(*a).len();
                acc(*a, Tensor::vector(vec![gs(); n]))?;
            }
            Op::Dot(a, b) => {
                acc(*a, val(*b).scale(gs()))?;
                acc(*b, val(*a).scale(gs()))?;
            }
            Op::Norm2(a) => {
                let n = node.value.data()[0];
                if n > 0.0 {
                    acc(*a, val(*a).scale(gs() / n))?;
                }
            }
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, "tanh", |g, y| g * (1.0 - y * y))?)?,
            Op::Softplus(a) => acc(*a, g.zip_map(val(*a), "softplus", |g, x| g * sigmoid(x))?)?,
            Op::Sigmoid(a) => {
                acc(*a, g.zip_map(&node.value, "sigmoid", |g, y| g * y * (1.0 - y))?)?
            }
            Op::Relu(a) => {
                acc(*a, g.zip_map(val(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?)?
            }
            Op::Exp(a) => acc(*a, g.hadamard(&node.value)?)?,
            Op::Sin(a) => acc(*a, g.zip_map(val(*a), "sin", |g, x| g * x.cos())?)?,
            Op::Cos(a) => acc(*a, g.zip_map(val(*a), "cos", |g, x| -g * x.sin())?)?,
            Op::Sqrt(a) => acc(
                *a,
                g.zip_map(&node.value, "sqrt", |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 })?,
            )?,
            Op::Recip(a) => acc(*a, g.zip_map(&node.value, "recip", |g, y| -g * y * y)?)?,
            Op::Clip(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *a,
                    g.zip_map(val(*a), "clip", |g, x| if x >= lo && x <= hi { g } else { 0.0 })?,
                )?
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, Tensor::vector(g.data()[off..off + n].to_vec()))?;
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                let mut d = vec![0.0; val(*a).len()];
                d[*start..*start + g.len()].copy_from_slice(g.data());
                acc(*a, Tensor::vector(d))?;
            }
            Op::Reshape(a) => acc(*a, Tensor::vector(g.data().to_vec()))?,
            Op::External(a, grad) => acc(*a, grad.scale(gs()))?,
            Op::LogSumExp(a) => {
                let y = node.value.data()[0];
                acc(*a, val(*a).map(|x| gs() * (x - y).exp()))?;
            }
            Op::Huber(a, delta) => {
                let d = *delta;
                acc(*a, g.zip_map(val(*a), "huber", |g, x| g * x.clamp(-d, d))?)?
            }
        }
        Ok(())
    }
}
