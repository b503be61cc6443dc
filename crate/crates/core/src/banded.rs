//! Banded LU with partial pivoting (column-major band storage in the style of
//! LAPACK `gbtrf`). Used for the coarsest multigrid level, for the small-grid
//! direct Helmholtz solver and for the regularizer preconditioner.

use crate::block::Block;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::Csr;

#[derive(Clone, Debug)]
pub struct BandedLu<T> {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<T>,
    ipiv: Vec<usize>,
    /// `perm[new] = old`
    perm: Option<Vec<usize>>,
}

/// Lower and upper bandwidth of `a` after reordering with `perm[new] = old`.
pub fn bandwidths<T: Scalar>(a: &Csr<T>, perm: Option<&[usize]>) -> (usize, usize) {
    let inv = perm.map(invert_permutation);
    let map = |i: usize| inv.as_ref().map_or(i, |v| v[i]);
    let (mut kl, mut ku) = (0usize, 0usize);
    for i in 0..a.nrows() {
        let r = map(i);
        for &j in a.row(i).0 {
            let c = map(j as usize);
            if r > c {
                kl = kl.max(r - c);
            } else {
                ku = ku.max(c - r);
            }
        }
    }
    (kl, ku)
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (new, &old) in p.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

/// Bytes needed to factor an `n`-unknown system with the given bandwidths.
pub fn factor_bytes<T>(n: usize, kl: usize, ku: usize) -> usize {
    n * (2 * kl + ku + 1) * std::mem::size_of::<T>()
}

/// Node ordering for a tensor grid that puts the longest axis slowest, which
/// minimises the bandwidth of nearest-neighbour couplings. Returns
/// `perm[new] = old` for a grid stored first-axis-fastest.
pub fn grid_band_ordering(dims: &[usize]) -> Vec<usize> {
    let nd = dims.len();
    let mut axes: Vec<usize> = (0..nd).collect();
    axes.sort_by_key(|&a| (dims[a], a));
    let strides: Vec<usize> = (0..nd).map(|a| dims[..a].iter().product()).collect();
    let total: usize = dims.iter().product();
    let mut perm = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        perm.push((0..nd).map(|a| idx[a] * strides[a]).sum());
        for &a in &axes {
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    perm
}

impl<T: Scalar> BandedLu<T> {
    pub fn factor(a: &Csr<T>, perm: Option<Vec<usize>>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::InvalidArgument("banded LU needs a square matrix".into()));
        }
        if let Some(p) = &perm {
            if p.len() != n {
                return Err(Error::InvalidArgument("permutation length differs from matrix size".into()));
            }
        }
        let (kl, ku) = bandwidths(a, perm.as_deref());
        let kv = kl + ku;
        let ldab = 2 * kl + ku + 1;
        let mut ab = vec![T::zero(); ldab * n];
        let inv = perm.as_deref().map(invert_permutation);
        let mut scale = 0.0f64;
        for i in 0..n {
            let r = inv.as_ref().map_or(i, |v| v[i]);
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let c = inv.as_ref().map_or(j as usize, |p| p[j as usize]);
                ab[kv + r - c + c * ldab] += v;
                scale = scale.max(v.abs());
            }
        }
        let mut lu = BandedLu { n, kl, ku, ldab, ab, ipiv: vec![0; n], perm };
        lu.factorize(scale)?;
        Ok(lu)
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> usize {
        self.kl + self.ku + r - c + c * self.ldab
    }

    fn factorize(&mut self, scale: f64) -> Result<()> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let tiny = 1e-14 * scale;
        let mut ju = 0usize;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut jp = 0;
            let mut best = self.ab[self.at(j, j)].abs();
            for i in 1..=km {
                let v = self.ab[self.at(j + i, j)].abs();
                if v > best {
                    best = v;
                    jp = i;
                }
            }
            self.ipiv[j] = j + jp;
            if best <= tiny || best == 0.0 {
                return Err(Error::Factorization(format!("zero pivot in column {j}")));
            }
            ju = ju.max((j + ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    let (x, y) = (self.at(j, c), self.at(j + jp, c));
                    self.ab.swap(x, y);
                }
            }
            let inv = T::one() / self.ab[self.at(j, j)];
            let base = self.at(j, j);
            for i in 1..=km {
                self.ab[base + i] *= inv;
            }
            for c in j + 1..=ju {
                let f = self.ab[self.at(j, c)];
                if f == T::zero() {
                    continue;
                }
                let dst = self.at(j + 1, c);
                for i in 0..km {
                    let l = self.ab[base + 1 + i];
                    self.ab[dst + i] -= l * f;
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    pub fn storage_bytes(&self) -> usize {
        self.ab.len() * std::mem::size_of::<T>()
    }

    pub fn solve_vec(&self, b: &[T]) -> Vec<T> {
        self.solve(&Block::from_column(b)).into_vec()
    }

    /// Solve for every column of `b` with the stored factors.
    pub fn solve(&self, b: &Block<T>) -> Block<T> {
        assert_eq!(b.nrows(), self.n, "right-hand side has wrong length");
        let k = b.ncols();
        let mut y = match &self.perm {
            Some(p) => {
                let mut y = Block::zeros(self.n, k);
                for (new, &old) in p.iter().enumerate() {
                    y.row_mut(new).copy_from_slice(b.row(old));
                }
                y
            }
            None => b.clone(),
        };
        let data = y.as_mut_slice();
        let (n, kl) = (self.n, self.kl);
        let kv = self.kl + self.ku;
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                for t in 0..k {
                    data.swap(j * k + t, p * k + t);
                }
            }
            let km = kl.min(n - 1 - j);
            let base = self.at(j, j);
            let (head, tail) = data.split_at_mut((j + 1) * k);
            let src = &head[j * k..];
            for i in 0..km {
                let l = self.ab[base + 1 + i];
                if l == T::zero() {
                    continue;
                }
                let dst = &mut tail[i * k..(i + 1) * k];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d -= l * *s;
                }
            }
        }
        for j in (0..n).rev() {
            let inv = T::one() / self.ab[self.at(j, j)];
            let (head, tail) = data.split_at_mut(j * k);
            let src = &mut tail[..k];
            src.iter_mut().for_each(|v| *v *= inv);
            let lo = j.saturating_sub(kv);
            let col = self.at(lo, j);
            for (off, i) in (lo..j).enumerate() {
                let u = self.ab[col + off];
                if u == T::zero() {
                    continue;
                }
                let dst = &mut head[i * k..(i + 1) * k];
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d -= u * *s;
                }
            }
        }
        match &self.perm {
            Some(p) => {
                let mut x = Block::zeros(self.n, k);
                for (new, &old) in p.iter().enumerate() {
                    x.row_mut(old).copy_from_slice(y.row(new));
                }
                x
            }
            None => y,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Complex64;
    use crate::sparse::CsrBuilder;

    fn laplace_2d(nx: usize, ny: usize, shift: Complex64) -> Csr<Complex64> {
        let n = nx * ny;
        let mut b = CsrBuilder::new(n, 5 * n);
        for j in 0..ny {
            for i in 0..nx {
                let id = i + nx * j;
                b.push(id, Complex64::new(-4.0, 0.0) + shift);
                if i > 0 {
                    b.push(id - 1, Complex64::new(1.0, 0.0));
                }
                if i + 1 < nx {
                    b.push(id + 1, Complex64::new(1.0, 0.0));
                }
                if j > 0 {
                    b.push(id - nx, Complex64::new(1.0, 0.0));
                }
                if j + 1 < ny {
                    b.push(id + nx, Complex64::new(1.0, 0.0));
                }
                b.finish_row();
            }
        }
        b.build()
    }

    #[test]
    fn solves_indefinite_system_with_pivoting() {
        // strongly indefinite: needs row interchanges
        let a = laplace_2d(7, 5, Complex64::new(3.9, 0.01));
        let x: Vec<Complex64> = (0..35).map(|i| Complex64::new((i as f64).sin(), (i as f64 * 0.3).cos())).collect();
        let b = a.mul_vec(&x);
        for perm in [None, Some(grid_band_ordering(&[7, 5]))] {
            let lu = BandedLu::factor(&a, perm).unwrap();
            let got = lu.solve_vec(&b);
            let err: f64 = got.iter().zip(&x).map(|(g, w)| (g - w).norm()).fold(0.0, f64::max);
            assert!(err < 1e-10, "err {err}");
        }
    }

    #[test]
    fn ordering_reduces_bandwidth() {
        let a = laplace_2d(20, 6, Complex64::new(0.0, 0.0));
        assert_eq!(bandwidths(&a, None), (20, 20));
        let p = grid_band_ordering(&[20, 6]);
        assert_eq!(bandwidths(&a, Some(&p)), (6, 6));
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = Csr::from_dense_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(BandedLu::factor(&a, None), Err(Error::Factorization(_))));
    }
}
