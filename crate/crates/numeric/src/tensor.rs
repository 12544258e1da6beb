//! Dense row-major `f64` tensors of rank 0, 1 or 2.

use crate::error::NumericError;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericError> {
        let n: usize = shape.iter().product();
        if shape.len() > 2 || n != data.len() {
            return Err(NumericError::ShapeMismatch {
                op: "new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => 1,
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64, NumericError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(NumericError::NotScalar(self.shape.clone()))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, NumericError> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), NumericError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NumericError::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), NumericError> {
        let both_single = self.data.len() == 1 && other.data.len() == 1;
        if self.shape != other.shape && !both_single {
            return Err(NumericError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericError> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, NumericError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, NumericError> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor, NumericError> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<(), NumericError> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64, NumericError> {
        self.same_shape(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm2(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn transpose(&self) -> Result<Tensor, NumericError> {
        if self.shape.len() != 2 {
            return Err(NumericError::Invalid {
                op: "transpose",
                msg: format!("rank {} tensor", self.shape.len()),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    /// Matrix-vector product `A x`.
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor, NumericError> {
        if self.shape.len() != 2 || x.shape.len() != 1 || self.shape[1] != x.shape[0] {
            return Err(NumericError::ShapeMismatch {
                op: "matvec",
                left: self.shape.clone(),
                right: x.shape.clone(),
            });
        }
        Ok(Tensor::vector(matvec(&self.data, self.shape[0], self.shape[1], &x.data)))
    }

    /// Transposed matrix-vector product `A^T x`.
    pub fn matvec_t(&self, x: &Tensor) -> Result<Tensor, NumericError> {
        if self.shape.len() != 2 || x.shape.len() != 1 || self.shape[0] != x.shape[0] {
            return Err(NumericError::ShapeMismatch {
                op: "matvec_t",
                left: self.shape.clone(),
                right: x.shape.clone(),
            });
        }
        Ok(Tensor::vector(matvec_t(&self.data, self.shape[0], self.shape[1], &x.data)))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NumericError> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(NumericError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[l * m..(l + 1) * m];
                let dst = &mut out[i * m..(i + 1) * m];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![n, m], data: out })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `A x` for a row-major `rows x cols` matrix.
pub fn matvec(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows).map(|i| dot(&a[i * cols..(i + 1) * cols], x)).collect()
}

/// `A^T x` for a row-major `rows x cols` matrix.
pub fn matvec_t(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let xi = x[i];
        if xi == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(&a[i * cols..(i + 1) * cols]) {
            *o += xi * v;
        }
    }
    out
}
