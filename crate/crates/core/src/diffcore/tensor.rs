use std::fmt;

use crate::error::{shape_err, LdmError, Result};

/// Dense row-major array of `f64`.
///
/// `Tensor` is a plain value. Gradient bookkeeping lives on the [`Tape`](super::Tape),
/// which hands out [`Var`](super::Var) handles for tensors that take part in
/// differentiation.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} {:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(shape_err("Tensor::from_rows", &[r, c], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data,
        })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(v: &[f64]) -> Self {
        let n = v.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, x) in v.iter().enumerate() {
            t.data[i * n + i] = *x;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(shape_err(op, &self.shape, &[0, 0]));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn require_square(&self, op: &'static str) -> Result<usize> {
        let (r, c) = self.require_matrix(op)?;
        if r != c {
            return Err(shape_err(op, &self.shape, &[r, r]));
        }
        Ok(r)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: matmul_raw(&self.data, &other.data, m, k, n),
        })
    }

    /// Symmetrizes a square matrix in place: `(A + Aᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        let n = self.shape[0];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let n = self.shape[0].min(self.shape[1]);
        (0..n).map(|i| self.get(i, i)).collect()
    }

    /// Column `j` of a matrix.
    pub fn col(&self, j: usize) -> Vec<f64> {
        let (r, c) = (self.shape[0], self.shape[1]);
        (0..r).map(|i| self.data[i * c + j]).collect()
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hcat(parts: &[&Tensor]) -> Result<Tensor> {
        let r = parts.first().map_or(0, |p| p.shape[0]);
        let mut cols = 0;
        for p in parts {
            let (pr, pc) = p.require_matrix("hcat")?;
            if pr != r {
                return Err(shape_err("hcat", &[r, cols], &p.shape));
            }
            cols += pc;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor {
            shape: vec![r, cols],
            data,
        })
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vcat(parts: &[&Tensor]) -> Result<Tensor> {
        let c = parts.first().map_or(0, |p| p.shape[1]);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pr, pc) = p.require_matrix("vcat")?;
            if pc != c {
                return Err(shape_err("vcat", &[rows, c], &p.shape));
            }
            rows += pr;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, c],
            data,
        })
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.shape[1];
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Column means of an `N x d` matrix.
    pub fn col_means(&self) -> Vec<f64> {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut m = vec![0.0; c];
        for i in 0..r {
            for (j, mj) in m.iter_mut().enumerate() {
                *mj += self.data[i * c + j];
            }
        }
        m.iter_mut().for_each(|x| *x /= r as f64);
        m
    }

    /// Sample covariance with the `1/(N-1)` normalization.
    pub fn covariance(&self) -> Tensor {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mu = self.col_means();
        let mut cov = vec![0.0; c * c];
        for i in 0..r {
            let row = self.row(i);
            for a in 0..c {
                let da = row[a] - mu[a];
                for b in a..c {
                    cov[a * c + b] += da * (row[b] - mu[b]);
                }
            }
        }
        let denom = (r as f64 - 1.0).max(1.0);
        for a in 0..c {
            for b in a..c {
                let v = cov[a * c + b] / denom;
                cov[a * c + b] = v;
                cov[b * c + a] = v;
            }
        }
        Tensor {
            shape: vec![c, c],
            data: cov,
        }
    }
}

/// Row-major `m x k` times `k x n`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Row-major `a (m x k)` times `bᵀ` where `b` is `n x k`.
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Row-major `aᵀ` times `b` where `a` is `k x m` and `b` is `k x n`.
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &aval) in arow.iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aval * bv;
            }
        }
    }
    out
}

impl TryFrom<&[Vec<f64>]> for Tensor {
    type Error = LdmError;
    fn try_from(rows: &[Vec<f64>]) -> Result<Self> {
        Tensor::from_rows(rows)
    }
}
