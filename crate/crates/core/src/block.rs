//! Blocks of vectors (multiple right-hand sides).
//!
//! Storage is node-major: the `ncols` entries of one grid node are contiguous,
//! so sparse products stream the matrix once for the whole block. Reductions
//! are computed over fixed-size row chunks and summed in chunk order, which
//! makes every result independent of the rayon thread count.

use rayon::prelude::*;

use crate::dense::Mat;
use crate::scalar::Scalar;

pub(crate) const CHUNK_ROWS: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    nrows: usize,
    ncols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Block<T> {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Block { nrows, ncols, data: vec![T::zero(); nrows * ncols] }
    }

    pub fn from_vec(nrows: usize, ncols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), nrows * ncols, "block data has wrong length");
        Block { nrows, ncols, data }
    }

    pub fn from_columns(cols: &[Vec<T>]) -> Self {
        assert!(!cols.is_empty(), "need at least one column");
        let n = cols[0].len();
        let k = cols.len();
        let mut data = vec![T::zero(); n * k];
        for (j, c) in cols.iter().enumerate() {
            assert_eq!(c.len(), n, "columns differ in length");
            for (i, v) in c.iter().enumerate() {
                data[i * k + j] = *v;
            }
        }
        Block { nrows: n, ncols: k, data }
    }

    pub fn from_column(col: &[T]) -> Self {
        Block { nrows: col.len(), ncols: 1, data: col.to_vec() }
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.nrows).map(|i| self.data[i * self.ncols + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, col: &[T]) {
        assert_eq!(col.len(), self.nrows);
        for (i, v) in col.iter().enumerate() {
            self.data[i * self.ncols + j] = *v;
        }
    }

    pub fn columns(&self) -> Vec<Vec<T>> {
        (0..self.ncols).map(|j| self.column(j)).collect()
    }

    /// Sub-block made of the listed columns.
    pub fn select_columns(&self, idx: &[usize]) -> Block<T> {
        let k = idx.len();
        let mut out = Block::zeros(self.nrows, k);
        for i in 0..self.nrows {
            let src = self.row(i);
            let dst = &mut out.data[i * k..(i + 1) * k];
            for (d, &j) in dst.iter_mut().zip(idx) {
                *d = src[j];
            }
        }
        out
    }

    pub fn set_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn copy_from(&mut self, other: &Block<T>) {
        assert_eq!(self.shape(), other.shape());
        self.data.copy_from_slice(&other.data);
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    fn chunk_len(&self) -> usize {
        CHUNK_ROWS * self.ncols.max(1)
    }

    /// Euclidean norm of every column.
    pub fn col_norms(&self) -> Vec<f64> {
        let k = self.ncols;
        let partials: Vec<Vec<f64>> = self
            .data
            .par_chunks(self.chunk_len())
            .map(|chunk| {
                let mut acc = vec![0.0; k];
                for row in chunk.chunks_exact(k) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v.norm_sqr();
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; k];
        for p in partials {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out.into_iter().map(f64::sqrt).collect()
    }

    /// Small matrix `self^H * other`.
    pub fn gram(&self, other: &Block<T>) -> Mat<T> {
        assert_eq!(self.nrows, other.nrows);
        let (ka, kb) = (self.ncols, other.ncols);
        let partials: Vec<Vec<T>> = self
            .data
            .par_chunks(CHUNK_ROWS * ka)
            .zip(other.data.par_chunks(CHUNK_ROWS * kb))
            .map(|(ca, cb)| {
                let mut acc = vec![T::zero(); ka * kb];
                for (ra, rb) in ca.chunks_exact(ka).zip(cb.chunks_exact(kb)) {
                    for (i, a) in ra.iter().enumerate() {
                        let ac = a.conj();
                        let dst = &mut acc[i * kb..(i + 1) * kb];
                        for (d, b) in dst.iter_mut().zip(rb) {
                            *d += ac * *b;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![T::zero(); ka * kb];
        for p in partials {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        Mat::from_fn(ka, kb, |i, j| out[i * kb + j])
    }

    /// Frobenius inner product `trace(self^H other)`.
    pub fn frob_dot(&self, other: &Block<T>) -> T {
        assert_eq!(self.shape(), other.shape());
        let partials: Vec<T> = self
            .data
            .par_chunks(self.chunk_len())
            .zip(other.data.par_chunks(self.chunk_len()))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.conj() * *y).sum())
            .collect();
        partials.into_iter().sum()
    }

    /// `self * s` with `s` a small `ncols x m` matrix.
    pub fn mul_small(&self, s: &Mat<T>) -> Block<T> {
        let mut out = Block::zeros(self.nrows, s.cols());
        out.add_mul_small(self, s, T::one());
        out
    }

    /// `self += alpha * x * s`.
    pub fn add_mul_small(&mut self, x: &Block<T>, s: &Mat<T>, alpha: T) {
        assert_eq!(x.nrows, self.nrows);
        assert_eq!(x.ncols, s.rows());
        assert_eq!(self.ncols, s.cols());
        let (kx, ko) = (x.ncols, self.ncols);
        let sm: Vec<T> = s.as_slice().iter().map(|&v| v * alpha).collect();
        self.data
            .par_chunks_mut(CHUNK_ROWS * ko)
            .zip(x.data.par_chunks(CHUNK_ROWS * kx))
            .for_each(|(co, cx)| {
                for (ro, rx) in co.chunks_exact_mut(ko).zip(cx.chunks_exact(kx)) {
                    for (i, xv) in rx.iter().enumerate() {
                        let srow = &sm[i * ko..(i + 1) * ko];
                        for (o, sv) in ro.iter_mut().zip(srow) {
                            *o += *xv * *sv;
                        }
                    }
                }
            });
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: T, x: &Block<T>) {
        assert_eq!(self.shape(), x.shape());
        let len = self.chunk_len();
        self.data.par_chunks_mut(len).zip(x.data.par_chunks(len)).for_each(|(a, b)| {
            for (y, v) in a.iter_mut().zip(b) {
                *y += alpha * *v;
            }
        });
    }

    /// `self = x + beta * self`.
    pub fn xpby(&mut self, x: &Block<T>, beta: T) {
        assert_eq!(self.shape(), x.shape());
        let len = self.chunk_len();
        self.data.par_chunks_mut(len).zip(x.data.par_chunks(len)).for_each(|(a, b)| {
            for (y, v) in a.iter_mut().zip(b) {
                *y = *v + beta * *y;
            }
        });
    }

    pub fn scale_by(&mut self, alpha: T) {
        let len = self.chunk_len();
        self.data.par_chunks_mut(len).for_each(|a| a.iter_mut().for_each(|v| *v *= alpha));
    }

    /// Multiply column `j` by `s[j]`.
    pub fn scale_columns(&mut self, s: &[T]) {
        assert_eq!(s.len(), self.ncols);
        let k = self.ncols;
        let len = self.chunk_len();
        self.data.par_chunks_mut(len).for_each(|c| {
            for row in c.chunks_exact_mut(k) {
                for (v, f) in row.iter_mut().zip(s) {
                    *v *= *f;
                }
            }
        });
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Block<T>) -> Block<T> {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out
    }
}
