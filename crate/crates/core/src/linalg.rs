//! Small dense row-major matrices over any [`Scalar`].
//!
//! Dimensions here never exceed a few hundred, so the algorithms are the
//! plain triple loops; there is no blocking or SIMD.

use std::ops::{Index, IndexMut, Range};

use serde::{Deserialize, Serialize};

use crate::scalar::{Real, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn column(v: &[T]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)].clone()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].clone())
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = &self[(i, k)];
                if a.is_zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    let prod = a.clone() * rhs[(k, j)].clone();
                    let cell = &mut out.data[i * rhs.cols + j];
                    *cell = cell.clone() + prod;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec dimension");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ v` without materialising the transpose.
    pub fn tr_matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len(), "tr_matvec dimension");
        let mut out = vec![T::zero(); self.cols];
        for (i, vi) in v.iter().enumerate() {
            if vi.is_zero() {
                continue;
            }
            for (j, o) in out.iter_mut().enumerate() {
                *o = o.clone() + self[(i, j)].clone() * vi.clone();
            }
        }
        out
    }

    pub fn scale(&self, c: &T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x.clone() * c.clone()).collect() }
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "add shape");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a.clone() + b.clone()).collect(),
        }
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "sub shape");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a.clone() - b.clone()).collect(),
        }
    }

    /// Frobenius inner product.
    pub fn frob_dot(&self, rhs: &Self) -> T {
        assert_eq!(self.shape(), rhs.shape(), "frob_dot shape");
        dot(&self.data, &rhs.data)
    }

    pub fn frob_norm_sq(&self) -> T {
        self.frob_dot(self)
    }

    /// Copy of the sub-block `rows × cols`.
    pub fn block(&self, rows: Range<usize>, cols: Range<usize>) -> Self {
        assert!(rows.end <= self.rows && cols.end <= self.cols, "block out of range");
        let r0 = rows.start;
        let c0 = cols.start;
        Self::from_fn(rows.len(), cols.len(), |i, j| self[(r0 + i, c0 + j)].clone())
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Self) {
        assert!(r0 + src.rows <= self.rows && c0 + src.cols <= self.cols, "set_block out of range");
        for i in 0..src.rows {
            for j in 0..src.cols {
                self[(r0 + i, c0 + j)] = src[(i, j)].clone();
            }
        }
    }

    /// Rank-one update `self += c · u vᵀ`.
    pub fn add_outer(&mut self, c: &T, u: &[T], v: &[T]) {
        assert_eq!((self.rows, self.cols), (u.len(), v.len()), "outer shape");
        if c.is_zero() {
            return;
        }
        // c·(u_i v_j) rather than (c·u_i)·v_j keeps u uᵀ updates exactly symmetric
        for (i, ui) in u.iter().enumerate() {
            if ui.is_zero() {
                continue;
            }
            for (j, vj) in v.iter().enumerate() {
                let cell = &mut self.data[i * self.cols + j];
                *cell = cell.clone() + c.clone() * (ui.clone() * vj.clone());
            }
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&T) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        self.map(|x| U::lit(x.to_f64_lossy()))
    }
}

impl<T: Real> Matrix<T> {
    pub fn frob_norm(&self) -> T {
        self.frob_norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> T {
        assert_eq!(self.shape(), rhs.shape());
        self.data.iter().zip(&rhs.data).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }
}

impl Matrix<f64> {
    /// Eigenvalues of the symmetric part, ascending.
    pub fn symmetric_eigenvalues(&self) -> Vec<f64> {
        assert_eq!(self.rows, self.cols, "eigenvalues of a non-square matrix");
        let n = self.rows;
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]));
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_symmetric_eigenvalue(&self) -> f64 {
        self.symmetric_eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// Solves `self · x = b` by Gaussian elimination with partial pivoting.
    /// Returns `None` when a pivot vanishes.
    pub fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        assert_eq!(self.rows, self.cols);
        assert_eq!(self.rows, b.len());
        let n = self.rows;
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))?;
            if a[piv * n + k].abs() < 1e-300 {
                return None;
            }
            if piv != k {
                for j in 0..n {
                    a.swap(k * n + j, piv * n + j);
                }
                x.swap(k, piv);
            }
            for i in k + 1..n {
                let f = a[i * n + k] / a[k * n + k];
                if f == 0.0 {
                    continue;
                }
                for j in k..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
                x[i] -= f * x[k];
            }
        }
        for k in (0..n).rev() {
            let s: f64 = (k + 1..n).map(|j| a[k * n + j] * x[j]).sum();
            x[k] = (x[k] - s) / a[k * n + k];
        }
        Some(x)
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "dot length");
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + x.clone() * y.clone())
}

pub fn axpy<T: Scalar>(alpha: &T, x: &[T], y: &mut [T]) {
    assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = yi.clone() + alpha.clone() * xi.clone();
    }
}

pub fn norm<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}
