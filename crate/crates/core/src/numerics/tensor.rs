use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with one or two extents.
///
/// One-dimensional tensors behave as a single row (`1 × n`) wherever a
/// matrix view is needed. Scalars are `[1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::contract(format!(
                "tensor must be 1-D or 2-D, got {} extents",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![i, cols],
                    right: vec![i, row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
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
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one extent")
    }

    /// Matrix view of the extents: `(rows, cols)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn reshaped(mut self, shape: Vec<usize>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(
                op,
                format!("non-finite value {} at flat index {i}", self.data[i]),
            )),
        }
    }

    /// Gathers rows by index into a new `indices.len() × cols` matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::contract(format!("row index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), cols, data)
    }

    pub fn l2_normalized_rows(&self) -> Tensor {
        let mut out = self.clone();
        let cols = self.cols();
        for row in out.data.chunks_mut(cols.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        out
    }
}

/// Floor applied to row norms before division.
pub const NORM_EPS: f64 = 1e-12;

/// `C = op(A) · op(B)` into a fresh buffer using strided dgemm.
///
/// `a` is `m × k` with strides `(rsa, csa)`, `b` is `k × n` with strides
/// `(rsb, csb)`. The output is row-major `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the strides describe in-bounds views of `a` (m×k) and `b`
    // (k×n), and `c` is an owned m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}
