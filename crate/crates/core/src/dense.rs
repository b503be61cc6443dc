//! Small dense matrices for the block Krylov recurrences (block sizes and
//! Hessenberg systems are tiny, so plain loops are fine here).

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn adjoint(&self) -> Mat<T> {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn scaled(&self, s: T) -> Mat<T> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v * s).collect() }
    }

    pub fn neg(&self) -> Mat<T> {
        self.scaled(-T::one())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Copy `block` into this matrix with its top-left corner at (r0, c0).
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Mat<T>) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn sub_matrix(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat<T> {
        Mat::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    /// Solve `self * X = rhs` by LU with partial pivoting. Fails when a pivot
    /// falls below `1e-13` relative to the largest entry.
    pub fn lu_solve(&self, rhs: &Mat<T>) -> Result<Mat<T>> {
        let n = self.rows;
        assert_eq!(n, self.cols, "lu_solve needs a square matrix");
        assert_eq!(n, rhs.rows, "right-hand side has wrong row count");
        let scale = self.max_abs();
        if scale == 0.0 {
            return Err(Error::Factorization("zero matrix".into()));
        }
        let mut a = self.clone();
        let mut b = rhs.clone();
        let nr = b.cols;
        for k in 0..n {
            let (p, pv) = (k..n)
                .map(|i| (i, a[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pv <= 1e-13 * scale {
                return Err(Error::Factorization(format!("pivot {k} is numerically zero")));
            }
            if p != k {
                for j in 0..n {
                    a.data.swap(k * n + j, p * n + j);
                }
                for j in 0..nr {
                    b.data.swap(k * nr + j, p * nr + j);
                }
            }
            let piv = a[(k, k)];
            for i in k + 1..n {
                let f = a[(i, k)] / piv;
                if f == T::zero() {
                    continue;
                }
                for j in k..n {
                    let akj = a[(k, j)];
                    a[(i, j)] -= f * akj;
                }
                for j in 0..nr {
                    let bkj = b[(k, j)];
                    b[(i, j)] -= f * bkj;
                }
            }
        }
        for k in (0..n).rev() {
            let piv = a[(k, k)];
            for j in 0..nr {
                let mut s = b[(k, j)];
                for l in k + 1..n {
                    s -= a[(k, l)] * b[(l, j)];
                }
                b[(k, j)] = s / piv;
            }
        }
        Ok(b)
    }

    /// Column-wise least squares `min ||rhs - self * Y||` via Householder QR.
    /// Returns `Y` and the residual norm of every column. Directions with a
    /// negligible R diagonal are dropped (their coefficients are zero).
    pub fn least_squares(&self, rhs: &Mat<T>) -> (Mat<T>, Vec<f64>) {
        let (m, n) = (self.rows, self.cols);
        assert!(m >= n, "least squares needs a tall matrix");
        assert_eq!(m, rhs.rows);
        let nr = rhs.cols;
        let mut r = self.clone();
        let mut qb = rhs.clone();
        for k in 0..n {
            let norm = (k..m).map(|i| r[(i, k)].norm_sqr()).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let x0 = r[(k, k)];
            let phase = if x0.abs() > 0.0 { x0.scale(1.0 / x0.abs()) } else { T::one() };
            let alpha = -(phase.scale(norm));
            let mut v: Vec<T> = (k..m).map(|i| r[(i, k)]).collect();
            v[0] -= alpha;
            let vn2: f64 = v.iter().map(|x| x.norm_sqr()).sum();
            if vn2 == 0.0 {
                continue;
            }
            let f = 2.0 / vn2;
            for j in k..n {
                let s: T = v.iter().enumerate().map(|(t, vi)| vi.conj() * r[(k + t, j)]).sum();
                for (t, vi) in v.iter().enumerate() {
                    r[(k + t, j)] -= (*vi * s).scale(f);
                }
            }
            for j in 0..nr {
                let s: T = v.iter().enumerate().map(|(t, vi)| vi.conj() * qb[(k + t, j)]).sum();
                for (t, vi) in v.iter().enumerate() {
                    qb[(k + t, j)] -= (*vi * s).scale(f);
                }
            }
        }
        let dmax = (0..n).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
        let tol = 1e-13 * dmax.max(f64::MIN_POSITIVE);
        let mut y = Mat::zeros(n, nr);
        let mut res = vec![0.0; nr];
        for c in 0..nr {
            for k in (0..n).rev() {
                let mut s = qb[(k, c)];
                for l in k + 1..n {
                    s -= r[(k, l)] * y[(l, c)];
                }
                if r[(k, k)].abs() <= tol {
                    res[c] += s.norm_sqr();
                } else {
                    y[(k, c)] = s / r[(k, k)];
                }
            }
            res[c] += (n..m).map(|i| qb[(i, c)].norm_sqr()).sum::<f64>();
            res[c] = res[c].sqrt();
        }
        (y, res)
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}
