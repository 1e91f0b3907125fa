use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array.
///
/// Every tensor in the pipeline is at most rank 2; vectors are carried as
/// `1 × n` row matrices so that all kernels can treat them uniformly.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: fmt::Debug> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a `rows × cols` matrix; panics if the data length is wrong.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn row_vector(data: Vec<F>) -> Self {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn column_vector(data: Vec<F>) -> Self {
        let n = data.len();
        Self::matrix(n, 1, data)
    }

    pub fn scalar(x: F) -> Self {
        Self::matrix(1, 1, vec![x])
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self::matrix(r, c, rows.concat()))
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as a matrix: rank 0 → 1×1, rank 1 → 1×n.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("tensor of rank {} used as a matrix", self.shape.len()),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = self.dims();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims();
        let (k2, n) = other.dims();
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                m, k, k2, n
            )));
        }
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                if a == F::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::matrix(m, n, out))
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum::<F>()
    }

    pub fn norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum::<F>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::fmax)
    }

    /// Converts element type, e.g. `f64` → `f32`.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::lit(x.to_f64_lossy())).collect(),
        }
    }
}
