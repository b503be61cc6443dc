//! Geometric multigrid for the shifted Helmholtz operator: Galerkin coarse
//! operators `P^T A P` with (bi/tri)linear prolongation, weighted Jacobi
//! relaxation, V/W/K cycles acting on whole blocks, and a banded LU on the
//! coarsest level that is factored once and reused for every cycle.

use rayon::prelude::*;

use crate::banded::{grid_band_ordering, BandedLu};
use crate::block::{Block, CHUNK_ROWS};
use crate::error::{invalid, Result};
use crate::helmholtz::HelmholtzProblem;
use crate::krylov::{block_fgmres, Preconditioner};
use crate::scalar::{Complex64, Scalar};
use crate::sparse::{Csr, CsrBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CycleKind {
    V,
    W,
    K,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CycleSpec {
    pub kind: CycleKind,
    pub pre_relax: usize,
    pub post_relax: usize,
    pub jacobi_weight: f64,
    /// Block FGMRES iterations per coarse visit of a K-cycle.
    pub k_inner: usize,
}

impl CycleSpec {
    pub fn new(kind: CycleKind) -> Self {
        CycleSpec { kind, pre_relax: 2, post_relax: 2, jacobi_weight: 0.8, k_inner: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pre_relax == 0 || self.post_relax == 0 {
            return Err(invalid("relaxation counts must be at least 1"));
        }
        if !(self.jacobi_weight > 0.0 && self.jacobi_weight <= 1.0) {
            return Err(invalid(format!("Jacobi weight {} outside (0, 1]", self.jacobi_weight)));
        }
        if self.kind == CycleKind::K && self.k_inner == 0 {
            return Err(invalid("K-cycle needs at least one inner iteration"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Level<T> {
    pub dims: Vec<usize>,
    pub a: Csr<T>,
    /// Prolongation from the next coarser level (absent on the coarsest).
    pub p: Option<Csr<f64>>,
    pub pt: Option<Csr<f64>>,
    pub inv_diag: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct MgHierarchy<T> {
    levels: Vec<Level<T>>,
    coarse: BandedLu<T>,
}

/// Node counts of every level for `nlevels` standard coarsenings.
pub fn level_dims(dims: &[usize], nlevels: usize) -> Result<Vec<Vec<usize>>> {
    if nlevels == 0 {
        return Err(invalid("need at least one level"));
    }
    let mut out = vec![dims.to_vec()];
    for l in 1..nlevels {
        let prev = &out[l - 1];
        let mut next = Vec::with_capacity(prev.len());
        for (axis, &n) in prev.iter().enumerate() {
            if n % 2 == 0 {
                return Err(invalid(format!("axis {axis} has {n} nodes on level {}; coarsening needs an odd count", l - 1)));
            }
            let c = (n - 1) / 2 + 1;
            if c < 3 {
                return Err(invalid(format!("axis {axis} would have {c} nodes on level {l}; need at least 3")));
            }
            next.push(c);
        }
        out.push(next);
    }
    Ok(out)
}

/// Smallest node count `>= n` that allows `nlevels - 1` coarsenings.
pub fn coarsenable_size(n: usize, nlevels: usize) -> usize {
    let f = 1usize << nlevels.saturating_sub(1);
    let cells = n.saturating_sub(1).max(2 * f);
    cells.div_ceil(f) * f + 1
}

/// Linear interpolation from the coarse grid of `fine_dims` (first axis fastest).
pub fn prolongation(fine_dims: &[usize]) -> Result<Csr<f64>> {
    let coarse: Vec<usize> = level_dims(fine_dims, 2)?.pop().unwrap();
    let nd = fine_dims.len();
    let nf: usize = fine_dims.iter().product();
    let mut b = CsrBuilder::new(coarse.iter().product(), nf * (1 << nd));
    let mut idx = vec![0usize; nd];
    for _ in 0..nf {
        // per-axis (coarse index, weight) pairs
        let axes: Vec<Vec<(usize, f64)>> = idx
            .iter()
            .map(|&i| if i % 2 == 0 { vec![(i / 2, 1.0)] } else { vec![((i - 1) / 2, 0.5), ((i + 1) / 2, 0.5)] })
            .collect();
        let mut combos: Vec<(usize, f64)> = vec![(0, 1.0)];
        let mut stride = 1;
        for (a, opts) in axes.iter().enumerate() {
            combos = combos.iter().flat_map(|&(c, w)| opts.iter().map(move |&(ci, wi)| (c + ci * stride, w * wi))).collect();
            stride *= coarse[a];
        }
        for (c, w) in combos {
            b.push(c, w);
        }
        b.finish_row();
        for a in 0..nd {
            idx[a] += 1;
            if idx[a] < fine_dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(b.build())
}

/// `sweeps` steps of `x += w D^{-1} (b - A x)` on every column.
pub fn weighted_jacobi<T: Scalar>(a: &Csr<T>, inv_diag: &[T], b: &Block<T>, x: &mut Block<T>, w: f64, sweeps: usize) {
    let k = x.ncols();
    for _ in 0..sweeps {
        let r = a.residual(b, x);
        x.as_mut_slice()
            .par_chunks_mut(CHUNK_ROWS * k)
            .zip(r.as_slice().par_chunks(CHUNK_ROWS * k))
            .enumerate()
            .for_each(|(c, (xs, rs))| {
                let base = c * CHUNK_ROWS;
                for (i, (xr, rr)) in xs.chunks_exact_mut(k).zip(rs.chunks_exact(k)).enumerate() {
                    let d = inv_diag[base + i].scale(w);
                    for (xv, rv) in xr.iter_mut().zip(rr) {
                        *xv += d * *rv;
                    }
                }
            });
    }
}

impl<T: Scalar> MgHierarchy<T> {
    /// Hierarchy for `a` discretized on a tensor grid with `dims` nodes.
    pub fn from_operator(a: Csr<T>, dims: &[usize], nlevels: usize) -> Result<Self> {
        let all = level_dims(dims, nlevels)?;
        let n: usize = dims.iter().product();
        if a.nrows() != n || a.ncols() != n {
            return Err(invalid(format!("operator size {} does not match grid of {n} nodes", a.nrows())));
        }
        let mut levels: Vec<Level<T>> = Vec::with_capacity(nlevels);
        let mut cur = a;
        for (l, d) in all.iter().enumerate() {
            let inv_diag = inverse_diagonal(&cur, l)?;
            if l + 1 < nlevels {
                let p = prolongation(d)?;
                let pt = p.transpose();
                let next = Csr::galerkin(&p, &pt, &cur);
                levels.push(Level { dims: d.clone(), a: cur, p: Some(p), pt: Some(pt), inv_diag });
                cur = next;
            } else {
                levels.push(Level { dims: d.clone(), a: cur.clone(), p: None, pt: None, inv_diag });
            }
        }
        let last = levels.last().unwrap();
        let coarse = BandedLu::factor(&last.a, Some(grid_band_ordering(&last.dims)))?;
        Ok(MgHierarchy { levels, coarse })
    }

    pub fn nlevels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &Level<T> {
        &self.levels[l]
    }

    pub fn size(&self) -> usize {
        self.levels[0].a.nrows()
    }

    pub fn coarse_factor(&self) -> &BandedLu<T> {
        &self.coarse
    }

    /// Direct solve on the coarsest level for every column of `b`.
    pub fn coarse_solve(&self, b: &Block<T>) -> Block<T> {
        self.coarse.solve(b)
    }

    /// One cycle of the given kind, updating `x` in place.
    pub fn cycle(&self, spec: &CycleSpec, b: &Block<T>, x: &mut Block<T>) -> Result<()> {
        spec.validate()?;
        if b.nrows() != self.size() || x.shape() != b.shape() {
            return Err(invalid(format!(
                "cycle shapes {:?} and {:?} do not match operator size {}",
                b.shape(),
                x.shape(),
                self.size()
            )));
        }
        self.cycle_level(0, spec, b, x);
        Ok(())
    }

    fn cycle_level(&self, l: usize, spec: &CycleSpec, b: &Block<T>, x: &mut Block<T>) {
        let lev = &self.levels[l];
        if l + 1 == self.levels.len() {
            *x = self.coarse.solve(b);
            return;
        }
        let w = spec.jacobi_weight;
        weighted_jacobi(&lev.a, &lev.inv_diag, b, x, w, spec.pre_relax);
        let r = lev.a.residual(b, x);
        let pt = lev.pt.as_ref().unwrap();
        let p = lev.p.as_ref().unwrap();
        let mut bc = Block::zeros(pt.nrows(), r.ncols());
        pt.spmm_mixed(&r, &mut bc);
        let coarsest_next = l + 2 == self.levels.len();
        let xc = if coarsest_next {
            self.coarse.solve(&bc)
        } else {
            match spec.kind {
                CycleKind::V => {
                    let mut xc = Block::zeros(bc.nrows(), bc.ncols());
                    self.cycle_level(l + 1, spec, &bc, &mut xc);
                    xc
                }
                CycleKind::W => {
                    let mut xc = Block::zeros(bc.nrows(), bc.ncols());
                    self.cycle_level(l + 1, spec, &bc, &mut xc);
                    self.cycle_level(l + 1, spec, &bc, &mut xc);
                    xc
                }
                CycleKind::K => self.k_correction(l + 1, spec, &bc),
            }
        };
        let mut corr = Block::zeros(p.nrows(), xc.ncols());
        p.spmm_mixed(&xc, &mut corr);
        x.axpy(T::one(), &corr);
        weighted_jacobi(&lev.a, &lev.inv_diag, b, x, w, spec.post_relax);
    }

    /// A few flexible block FGMRES steps on level `l`, preconditioned by the
    /// level-`l` cycle.
    fn k_correction(&self, l: usize, spec: &CycleSpec, bc: &Block<T>) -> Block<T> {
        let prec = |r: &Block<T>| {
            let mut z = Block::zeros(r.nrows(), r.ncols());
            self.cycle_level(l, spec, r, &mut z);
            z
        };
        let a = &self.levels[l].a;
        match block_fgmres(a, &prec, bc, spec.k_inner, f64::MIN_POSITIVE, spec.k_inner, true) {
            Ok((x, _)) => x,
            Err(_) => prec(bc),
        }
    }
}

fn inverse_diagonal<T: Scalar>(a: &Csr<T>, level: usize) -> Result<Vec<T>> {
    a.diagonal()
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            if d == T::zero() {
                Err(invalid(format!("zero diagonal at row {i} on level {level}")))
            } else {
                Ok(T::one() / d)
            }
        })
        .collect()
}

/// Hierarchy for the shifted operator (`gamma + shift_factor * omega`).
pub fn build_hierarchy(problem: &HelmholtzProblem, nlevels: usize, shift_factor: f64) -> Result<MgHierarchy<Complex64>> {
    if !(shift_factor >= 0.0) {
        return Err(invalid("shift factor must be nonnegative"));
    }
    let a = problem.shifted_matrix(shift_factor);
    MgHierarchy::from_operator(a, problem.grid().dims(), nlevels)
}

/// One multigrid cycle from a zero initial guess, as a Krylov preconditioner.
pub struct MgPreconditioner<'a, T> {
    pub hierarchy: &'a MgHierarchy<T>,
    pub spec: CycleSpec,
}

impl<T: Scalar> Preconditioner<T> for MgPreconditioner<'_, T> {
    fn apply(&self, r: &Block<T>) -> Block<T> {
        let mut x = Block::zeros(r.nrows(), r.ncols());
        self.hierarchy.cycle_level(0, &self.spec, r, &mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poisson(dims: &[usize]) -> Csr<f64> {
        let n: usize = dims.iter().product();
        let mut b = CsrBuilder::new(n, 7 * n);
        let strides: Vec<usize> = (0..dims.len()).map(|a| dims[..a].iter().product()).collect();
        for i in 0..n {
            let mut diag = 0.0;
            let mut nb = vec![];
            for a in 0..dims.len() {
                let c = i / strides[a] % dims[a];
                diag -= 2.0;
                if c > 0 {
                    nb.push(i - strides[a]);
                }
                if c + 1 < dims[a] {
                    nb.push(i + strides[a]);
                }
            }
            b.push(i, diag);
            for j in nb {
                b.push(j, 1.0);
            }
            b.finish_row();
        }
        b.build()
    }

    #[test]
    fn level_dims_halve() {
        let d = level_dims(&[129, 65], 3).unwrap();
        assert_eq!(d, vec![vec![129, 65], vec![65, 33], vec![33, 17]]);
        let e = level_dims(&[128, 65], 2).unwrap_err().to_string();
        assert!(e.contains("axis 0"));
        assert!(level_dims(&[5, 5], 3).is_err());
    }

    #[test]
    fn coarsenable_sizes() {
        assert_eq!(coarsenable_size(129, 3), 129);
        assert_eq!(coarsenable_size(130, 3), 133);
        assert_eq!(coarsenable_size(4, 3), 9);
    }

    #[test]
    fn prolongation_rows_sum_to_one() {
        let p = prolongation(&[9, 5, 7]).unwrap();
        assert_eq!(p.ncols(), 5 * 3 * 4);
        let ones = vec![1.0; p.ncols()];
        assert!(p.mul_vec(&ones).iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn galerkin_1d_poisson() {
        let a = poisson(&[9]);
        let h = MgHierarchy::from_operator(a.clone(), &[9], 2).unwrap();
        let p = prolongation(&[9]).unwrap();
        let want = p.transpose().matmul(&a).matmul(&p);
        let got = &h.level(1).a;
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(got.get(i, j), want.get(i, j));
            }
        }
        // classical coarse stencil is half the fine one for linear interpolation
        assert_eq!(got.get(2, 2), -1.0);
        assert_eq!(got.get(2, 1), 0.5);
    }

    #[test]
    fn jacobi_arithmetic() {
        let a = Csr::from_dense_rows(&[vec![2.0]]);
        let b = Block::from_column(&[0.0]);
        let mut x = Block::from_column(&[1.0]);
        weighted_jacobi(&a, &[0.5], &b, &mut x, 0.8, 1);
        assert!((x.as_slice()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_is_fixed_point() {
        let h = MgHierarchy::from_operator(poisson(&[17, 9]), &[17, 9], 3).unwrap();
        let b = Block::zeros(17 * 9, 3);
        for kind in [CycleKind::V, CycleKind::W, CycleKind::K] {
            let mut x = Block::zeros(17 * 9, 3);
            h.cycle(&CycleSpec::new(kind), &b, &mut x).unwrap();
            assert!(x.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn coarse_solve_recovers_known_block() {
        let h = MgHierarchy::from_operator(poisson(&[17, 17]), &[17, 17], 2).unwrap();
        let ac = &h.level(1).a;
        let n = ac.nrows();
        let cols: Vec<Vec<f64>> = (0..8).map(|j| (0..n).map(|i| ((i * (j + 1)) as f64 * 0.1).sin()).collect()).collect();
        let x = Block::from_columns(&cols);
        let mut b = Block::zeros(n, 8);
        ac.spmm(&x, &mut b);
        let got = h.coarse_solve(&b);
        let err = got.sub(&x).col_norms();
        let xn = x.col_norms();
        for j in 0..8 {
            assert!(err[j] / xn[j] < 1e-10);
            let single = h.coarse_solve(&Block::from_column(&b.column(j)));
            assert_eq!(single.as_slice(), &got.column(j)[..]);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let h = MgHierarchy::from_operator(poisson(&[9, 9]), &[9, 9], 2).unwrap();
        let b = Block::<f64>::zeros(80, 1);
        let mut x = Block::zeros(80, 1);
        assert!(h.cycle(&CycleSpec::new(CycleKind::V), &b, &mut x).is_err());
    }
}
