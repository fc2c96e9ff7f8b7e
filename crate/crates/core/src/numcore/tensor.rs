use std::fmt;

use super::kernels;
use super::Scalar;
use crate::error::{dim_err, Error, Result};

/// Dense row-major array with an optional gradient buffer.
///
/// Rank 0 is a scalar. Every extent is at least one, so `data.len()` is
/// always the product of the shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("zero extent in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![v; numel]).expect("nonzero extents")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count of a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix (last extent).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, g: Vec<S>) {
        debug_assert_eq!(g.len(), self.data.len());
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value copy without gradient state.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_matmul(self.shape(), other.shape())?;
        let (p, q, s) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![S::zero(); p * s];
        kernels::matmul(&self.data, &other.data, &mut out, p, q, s);
        Self::new(vec![p, s], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return dim_err(format!("transpose needs a matrix, got {:?}", self.shape));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        if self.rank() != 2 || bias.numel() != self.cols() {
            return dim_err(format!(
                "row bias {:?} does not fit matrix {:?}",
                bias.shape, self.shape
            ));
        }
        let mut out = self.detached();
        for row in out.data.chunks_mut(self.cols()) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        Ok(self
            .zip_with(other, |a, b| (a - b).abs())?
            .data
            .into_iter()
            .fold(S::zero(), S::max))
    }

    /// Frobenius norm squared.
    pub fn sq_norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Stacks matrices with identical column counts along rows.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let cols = match parts.first() {
            Some(p) => p.cols(),
            None => return dim_err("concat_rows of nothing"),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != 2 || p.cols() != cols {
                return dim_err(format!("cannot stack {:?} under width {cols}", p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![rows, cols], data)
    }

    /// Selects a subset of columns, in the order given.
    /// Means over consecutive blocks of `factor` rows, keeping `rows` blocks.
    pub fn mean_pool_rows(&self, factor: usize, rows: usize) -> Result<Self> {
        if factor == 0 || rows == 0 || self.rank() != 2 || rows * factor > self.rows() {
            return dim_err(format!("cannot pool {:?} by {factor} into {rows} rows", self.shape));
        }
        let c = self.cols();
        let inv = S::one() / S::of_usize(factor);
        let mut data = vec![S::zero(); rows * c];
        for (r, orow) in data.chunks_mut(c).enumerate() {
            for k in 0..factor {
                for (o, &v) in orow.iter_mut().zip(self.row(r * factor + k)) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        Self::new(vec![rows, c], data)
    }

    pub fn select_cols(&self, cols: &[usize]) -> Result<Self> {
        if self.rank() != 2 {
            return dim_err(format!("column selection needs a matrix, got {:?}", self.shape));
        }
        let c = self.cols();
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return dim_err(format!("column {bad} out of range for width {c}"));
        }
        let mut data = Vec::with_capacity(self.rows() * cols.len());
        for row in self.data.chunks(c) {
            data.extend(cols.iter().map(|&j| row[j]));
        }
        Self::new(vec![self.rows(), cols.len()], data)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

pub(crate) fn check_matmul(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Dimension(format!(
            "matmul needs [p x q] x [q x s], got {a:?} x {b:?}"
        )));
    }
    Ok(())
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}
