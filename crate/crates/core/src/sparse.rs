//! Compressed sparse row matrices and the kernels the solvers need.

use rayon::prelude::*;

use crate::block::{Block, CHUNK_ROWS};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Csr<T> {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<T>,
}

/// Row-by-row assembly. Entries within a row may arrive in any order and
/// duplicates are summed when the row is closed.
pub struct CsrBuilder<T> {
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<T>,
    row: Vec<(u32, T)>,
}

impl<T: Scalar> CsrBuilder<T> {
    pub fn new(ncols: usize, nnz_hint: usize) -> Self {
        CsrBuilder {
            ncols,
            indptr: vec![0],
            indices: Vec::with_capacity(nnz_hint),
            values: Vec::with_capacity(nnz_hint),
            row: Vec::new(),
        }
    }

    #[inline]
    pub fn push(&mut self, col: usize, v: T) {
        debug_assert!(col < self.ncols);
        self.row.push((col as u32, v));
    }

    pub fn finish_row(&mut self) {
        self.row.sort_unstable_by_key(|e| e.0);
        let mut last: Option<u32> = None;
        for &(c, v) in &self.row {
            if last == Some(c) {
                *self.values.last_mut().unwrap() += v;
            } else {
                self.indices.push(c);
                self.values.push(v);
                last = Some(c);
            }
        }
        self.row.clear();
        self.indptr.push(self.indices.len());
    }

    pub fn build(self) -> Csr<T> {
        Csr {
            nrows: self.indptr.len() - 1,
            ncols: self.ncols,
            indptr: self.indptr,
            indices: self.indices,
            values: self.values,
        }
    }
}

impl<T: Scalar> Csr<T> {
    pub fn from_dense_rows(rows: &[Vec<T>]) -> Self {
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut b = CsrBuilder::new(ncols, 0);
        for r in rows {
            for (j, &v) in r.iter().enumerate() {
                if v != T::zero() {
                    b.push(j, v);
                }
            }
            b.finish_row();
        }
        b.build()
    }

    pub fn identity(n: usize) -> Self {
        let mut b = CsrBuilder::new(n, n);
        for i in 0..n {
            b.push(i, T::one());
            b.finish_row();
        }
        b.build()
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> (&[u32], &[T]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&(j as u32)) {
            Ok(p) => vals[p],
            Err(_) => T::zero(),
        }
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Csr<U> {
        Csr {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Csr<T> {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.indices {
            counts[c as usize + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut indices = vec![0u32; self.nnz()];
        let mut values = vec![T::zero(); self.nnz()];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                let p = next[c as usize];
                indices[p] = i as u32;
                values[p] = v;
                next[c as usize] += 1;
            }
        }
        Csr { nrows: self.ncols, ncols: self.nrows, indptr: counts, indices, values }
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut out = vec![vec![T::zero(); self.ncols]; self.nrows];
        for (i, row) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c as usize] += v;
            }
        }
        out
    }

    /// `y = A x` for a single vector.
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![T::zero(); self.nrows];
        y.par_chunks_mut(CHUNK_ROWS).enumerate().for_each(|(c, chunk)| {
            let base = c * CHUNK_ROWS;
            for (r, out) in chunk.iter_mut().enumerate() {
                let (cols, vals) = self.row(base + r);
                let mut s = T::zero();
                for (&j, &a) in cols.iter().zip(vals) {
                    s += a * x[j as usize];
                }
                *out = s;
            }
        });
        y
    }

    /// `y = A x` on a block.
    pub fn spmm(&self, x: &Block<T>, y: &mut Block<T>) {
        self.spmm_impl(x, y, None);
    }

    /// `r = b - A x` on a block.
    pub fn residual(&self, b: &Block<T>, x: &Block<T>) -> Block<T> {
        let mut r = Block::zeros(self.nrows, x.ncols());
        self.spmm_impl(x, &mut r, Some(b));
        r
    }

    fn spmm_impl(&self, x: &Block<T>, y: &mut Block<T>, minus_from: Option<&Block<T>>) {
        assert_eq!(x.nrows(), self.ncols, "block rows do not match matrix columns");
        assert_eq!(y.nrows(), self.nrows);
        assert_eq!(x.ncols(), y.ncols());
        let k = x.ncols();
        let xs = x.as_slice();
        y.as_mut_slice().par_chunks_mut(CHUNK_ROWS * k).enumerate().for_each(|(c, chunk)| {
            let base = c * CHUNK_ROWS;
            for (r, out) in chunk.chunks_exact_mut(k).enumerate() {
                let i = base + r;
                out.iter_mut().for_each(|v| *v = T::zero());
                let (cols, vals) = self.row(i);
                if k == 1 {
                    let mut s = T::zero();
                    for (&j, &a) in cols.iter().zip(vals) {
                        s += a * xs[j as usize];
                    }
                    out[0] = s;
                } else {
                    for (&j, &a) in cols.iter().zip(vals) {
                        let xr = &xs[j as usize * k..(j as usize + 1) * k];
                        for (o, xv) in out.iter_mut().zip(xr) {
                            *o += a * *xv;
                        }
                    }
                }
                if let Some(b) = minus_from {
                    for (o, bv) in out.iter_mut().zip(b.row(i)) {
                        *o = *bv - *o;
                    }
                }
            }
        });
    }

    /// General sparse product `self * other`.
    pub fn matmul(&self, other: &Csr<T>) -> Csr<T> {
        assert_eq!(self.ncols, other.nrows);
        let mut acc = vec![T::zero(); other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut touched = Vec::new();
        let mut b = CsrBuilder::new(other.ncols, self.nnz());
        for i in 0..self.nrows {
            let (ca, va) = self.row(i);
            for (&k, &a) in ca.iter().zip(va) {
                let (cb, vb) = other.row(k as usize);
                for (&j, &bv) in cb.iter().zip(vb) {
                    let j = j as usize;
                    if mark[j] != i {
                        mark[j] = i;
                        acc[j] = T::zero();
                        touched.push(j);
                    }
                    acc[j] += a * bv;
                }
            }
            for &j in &touched {
                b.push(j, acc[j]);
            }
            touched.clear();
            b.finish_row();
        }
        b.build()
    }
}

impl Csr<f64> {
    /// `y = A x` where the matrix is real and the block may be complex.
    pub fn spmm_mixed<T: Scalar>(&self, x: &Block<T>, y: &mut Block<T>) {
        assert_eq!(x.nrows(), self.ncols);
        assert_eq!(y.nrows(), self.nrows);
        assert_eq!(x.ncols(), y.ncols());
        let k = x.ncols();
        let xs = x.as_slice();
        y.as_mut_slice().par_chunks_mut(CHUNK_ROWS * k).enumerate().for_each(|(c, chunk)| {
            let base = c * CHUNK_ROWS;
            for (r, out) in chunk.chunks_exact_mut(k).enumerate() {
                out.iter_mut().for_each(|v| *v = T::zero());
                let (cols, vals) = self.row(base + r);
                for (&j, &a) in cols.iter().zip(vals) {
                    let xr = &xs[j as usize * k..(j as usize + 1) * k];
                    for (o, xv) in out.iter_mut().zip(xr) {
                        *o += xv.scale(a);
                    }
                }
            }
        });
    }

    /// Fused Galerkin product `P^T A P` with `pt` the explicit transpose of `p`.
    pub fn galerkin<T: Scalar>(p: &Csr<f64>, pt: &Csr<f64>, a: &Csr<T>) -> Csr<T> {
        assert_eq!(a.nrows, p.nrows);
        assert_eq!(a.ncols, p.nrows);
        assert_eq!(pt.nrows, p.ncols);
        let nc = p.ncols;
        let rows: Vec<(Vec<u32>, Vec<T>)> = (0..nc)
            .into_par_iter()
            .chunks(256)
            .flat_map_iter(|chunk| {
                let mut acc = vec![T::zero(); nc];
                let mut mark = vec![usize::MAX; nc];
                let mut touched: Vec<usize> = Vec::new();
                chunk
                    .into_iter()
                    .map(|ic| {
                        let (fi, wi) = pt.row(ic);
                        for (&f, &w) in fi.iter().zip(wi) {
                            let (ca, va) = a.row(f as usize);
                            for (&j, &av) in ca.iter().zip(va) {
                                let wa = av.scale(w);
                                let (cp, vp) = p.row(j as usize);
                                for (&jc, &pv) in cp.iter().zip(vp) {
                                    let jc = jc as usize;
                                    if mark[jc] != ic {
                                        mark[jc] = ic;
                                        acc[jc] = T::zero();
                                        touched.push(jc);
                                    }
                                    acc[jc] += wa.scale(pv);
                                }
                            }
                        }
                        touched.sort_unstable();
                        let cols: Vec<u32> = touched.iter().map(|&c| c as u32).collect();
                        let vals: Vec<T> = touched.iter().map(|&c| acc[c]).collect();
                        touched.clear();
                        (cols, vals)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut indptr = Vec::with_capacity(nc + 1);
        indptr.push(0);
        let nnz: usize = rows.iter().map(|r| r.0.len()).sum();
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for (c, v) in rows {
            indices.extend(c);
            values.extend(v);
            indptr.push(indices.len());
        }
        Csr { nrows: nc, ncols: nc, indptr, indices, values }
    }
}
