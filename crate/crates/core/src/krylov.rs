//! Block Krylov solvers for many right-hand sides (block BiCGSTAB and block
//! FGMRES, both right-preconditioned) and (projected) PCG for the real
//! Gauss-Newton systems.
//!
//! Iteration counts are reported in preconditioner applications ("cycles"
//! when the preconditioner is one multigrid cycle).

use std::time::Instant;

use crate::block::Block;
use crate::dense::Mat;
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};
use crate::sparse::Csr;

pub trait LinearOperator<T: Scalar>: Sync {
    fn size(&self) -> usize;
    fn apply(&self, x: &Block<T>) -> Block<T>;
}

pub trait Preconditioner<T: Scalar>: Sync {
    fn apply(&self, r: &Block<T>) -> Block<T>;
}

impl<T: Scalar> LinearOperator<T> for Csr<T> {
    fn size(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &Block<T>) -> Block<T> {
        let mut y = Block::zeros(self.nrows(), x.ncols());
        self.spmm(x, &mut y);
        y
    }
}

/// Operator given by a closure.
pub struct FnOperator<F> {
    pub size: usize,
    pub f: F,
}

impl<T: Scalar, F: Fn(&Block<T>) -> Block<T> + Sync> LinearOperator<T> for FnOperator<F> {
    fn size(&self) -> usize {
        self.size
    }

    fn apply(&self, x: &Block<T>) -> Block<T> {
        (self.f)(x)
    }
}

pub struct Identity;

impl<T: Scalar> Preconditioner<T> for Identity {
    fn apply(&self, r: &Block<T>) -> Block<T> {
        r.clone()
    }
}

impl<T: Scalar, F: Fn(&Block<T>) -> Block<T> + Sync> Preconditioner<T> for F {
    fn apply(&self, r: &Block<T>) -> Block<T> {
        self(r)
    }
}

#[derive(Clone, Debug, Default)]
pub struct SolveReport {
    /// Preconditioner applications.
    pub iterations: usize,
    /// Cycles spent on each column (zero right-hand sides cost nothing).
    pub column_cycles: Vec<usize>,
    /// Relative residuals recomputed from the returned solution.
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
    /// Worst relative residual of the recursion after every iteration.
    pub history: Vec<f64>,
    pub wall_time: f64,
    pub restarts: usize,
    /// Thin QR factorizations of block Krylov vectors (FGMRES only).
    pub qr_factorizations: usize,
    pub negative_curvature: bool,
}

impl SolveReport {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    pub fn cycles_mean(&self) -> f64 {
        if self.column_cycles.is_empty() {
            return 0.0;
        }
        self.column_cycles.iter().sum::<usize>() as f64 / self.column_cycles.len() as f64
    }
}

struct Nonzero<T> {
    active: Vec<usize>,
    b: Block<T>,
    norms: Vec<f64>,
}

fn split_zero_columns<T: Scalar>(b: &Block<T>) -> Nonzero<T> {
    let all = b.col_norms();
    let active: Vec<usize> = (0..b.ncols()).filter(|&j| all[j] > 0.0).collect();
    let norms = active.iter().map(|&j| all[j]).collect();
    let sub = if active.len() == b.ncols() { b.clone() } else { b.select_columns(&active) };
    Nonzero { active, b: sub, norms }
}

fn scatter_columns<T: Scalar>(n: usize, k: usize, active: &[usize], x: &Block<T>) -> Block<T> {
    if active.len() == k {
        return x.clone();
    }
    let mut out = Block::zeros(n, k);
    for (c, &j) in active.iter().enumerate() {
        out.set_column(j, &x.column(c));
    }
    out
}

fn relative(norms: &[f64], bn: &[f64]) -> Vec<f64> {
    norms.iter().zip(bn).map(|(r, b)| r / b).collect()
}

fn worst(v: &[f64]) -> f64 {
    v.iter().cloned().fold(0.0, f64::max)
}

fn finish<T: Scalar>(
    op: &dyn LinearOperator<T>,
    b: &Block<T>,
    nz: &Nonzero<T>,
    x: &Block<T>,
    tol: f64,
    mut report: SolveReport,
    start: Instant,
) -> (Block<T>, SolveReport) {
    let k = b.ncols();
    let full = scatter_columns(b.nrows(), k, &nz.active, x);
    let r = b.sub(&op.apply(&full));
    let rn = r.col_norms();
    let bn = b.col_norms();
    report.residuals = (0..k).map(|j| if bn[j] > 0.0 { rn[j] / bn[j] } else { rn[j] }).collect();
    report.converged = report.residuals.iter().zip(&bn).map(|(&res, &b)| b == 0.0 && res == 0.0 || res <= tol).collect();
    report.column_cycles = (0..k).map(|j| if bn[j] > 0.0 { report.iterations } else { 0 }).collect();
    report.wall_time = start.elapsed().as_secs_f64();
    (full, report)
}

fn check_shapes<T: Scalar>(op: &dyn LinearOperator<T>, b: &Block<T>, tol: f64) -> Result<()> {
    if b.nrows() != op.size() {
        return Err(Error::InvalidArgument(format!(
            "right-hand side has {} rows, operator has size {}",
            b.nrows(),
            op.size()
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    Ok(())
}

/// Right-preconditioned block BiCGSTAB. `maxit` caps preconditioner
/// applications. Breakdowns restart from the current iterate at most twice.
pub fn block_bicgstab<T: Scalar>(
    op: &dyn LinearOperator<T>,
    prec: &dyn Preconditioner<T>,
    b: &Block<T>,
    tol: f64,
    maxit: usize,
) -> Result<(Block<T>, SolveReport)> {
    check_shapes(op, b, tol)?;
    let start = Instant::now();
    let mut report = SolveReport::default();
    let nz = split_zero_columns(b);
    let n = b.nrows();
    let s = nz.active.len();
    let mut x = Block::zeros(n, s);
    if s == 0 {
        return Ok(finish(op, b, &nz, &x, tol, report, start));
    }
    let bb = &nz.b;
    // the recursion solves A dx = b - A x on the columns in `cols`
    let mut cols: Vec<usize> = (0..s).collect();
    let mut norms = nz.norms.clone();
    let mut dx = Block::zeros(n, s);
    let mut r = bb.clone();
    let mut rt = r.clone();
    let mut p = r.clone();
    let mut breakdowns = 0;
    let scatter = |x: &mut Block<T>, dx: &Block<T>, cols: &[usize]| {
        for (c, &j) in cols.iter().enumerate() {
            let col: Vec<T> = x.column(j).iter().zip(dx.column(c)).map(|(a, b)| *a + b).collect();
            x.set_column(j, &col);
        }
    };
    while report.iterations + 2 <= maxit {
        let step = (|| -> std::result::Result<bool, String> {
            let phat = prec.apply(&p);
            let v = op.apply(&phat);
            report.iterations += 1;
            let g = rt.gram(&v);
            let alpha = g.lu_solve(&rt.gram(&r)).map_err(|e| e.to_string())?;
            let mut sv = r.clone();
            sv.add_mul_small(&v, &alpha, -T::one());
            let srel = relative(&sv.col_norms(), &norms);
            if worst(&srel) <= tol {
                dx.add_mul_small(&phat, &alpha, T::one());
                report.history.push(worst(&srel));
                return Ok(true);
            }
            let shat = prec.apply(&sv);
            let t = op.apply(&shat);
            report.iterations += 1;
            let tt = t.frob_dot(&t).re();
            if tt == 0.0 {
                return Err("vanishing stabilization block".into());
            }
            let omega = t.frob_dot(&sv).scale(1.0 / tt);
            if omega == T::zero() {
                return Err("zero stabilization parameter".into());
            }
            dx.add_mul_small(&phat, &alpha, T::one());
            dx.axpy(omega, &shat);
            r = sv;
            r.axpy(-omega, &t);
            let rel = relative(&r.col_norms(), &norms);
            report.history.push(worst(&rel));
            if worst(&rel) <= tol {
                return Ok(true);
            }
            let beta = g.lu_solve(&rt.gram(&t)).map_err(|e| e.to_string())?.neg();
            let mut q = p.clone();
            q.axpy(-omega, &v);
            p = r.clone();
            p.add_mul_small(&q, &beta, T::one());
            Ok(false)
        })();
        let failure = match step {
            Ok(false) => continue,
            Ok(true) => None,
            Err(msg) => Some(msg),
        };
        scatter(&mut x, &dx, &cols);
        let rfull = bb.sub(&op.apply(&x));
        let rel = relative(&rfull.col_norms(), &nz.norms);
        if worst(&rel) <= tol {
            dx = Block::zeros(n, 0);
            break;
        }
        if let Some(msg) = failure {
            breakdowns += 1;
            let open: Vec<usize> = (0..s).filter(|&j| rel[j] > tol).collect();
            if open.len() > 1 {
                // the block Krylov space is exhausted: finish column by column
                for &j in &open {
                    let rj = rfull.select_columns(&[j]);
                    let left = maxit.saturating_sub(report.iterations);
                    let (d, rep) = block_bicgstab(op, prec, &rj, tol / rel[j], left)?;
                    report.iterations += rep.iterations;
                    report.restarts += rep.restarts;
                    report.history.extend(rep.history.iter().map(|h| h * rel[j]));
                    let col: Vec<T> = x.column(j).iter().zip(d.column(0)).map(|(a, b)| *a + b).collect();
                    x.set_column(j, &col);
                }
                dx = Block::zeros(n, 0);
                break;
            }
            if breakdowns > 2 {
                return Err(Error::Breakdown { iteration: report.iterations, message: msg });
            }
        }
        // restart on the columns that have not converged
        report.restarts += 1;
        cols = (0..s).filter(|&j| rel[j] > tol).collect();
        norms = cols.iter().map(|&j| nz.norms[j]).collect();
        r = rfull.select_columns(&cols);
        rt = r.clone();
        p = r.clone();
        dx = Block::zeros(n, cols.len());
    }
    if dx.ncols() > 0 {
        scatter(&mut x, &dx, &cols);
    }
    Ok(finish(op, b, &nz, &x, tol, report, start))
}

fn cdot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| x.conj() * *y).sum()
}

/// Thin QR by classical Gram-Schmidt with one full reorthogonalization.
/// Numerically dependent columns come back as zero columns with a zero
/// diagonal entry in R.
pub fn thin_qr<T: Scalar>(w: &Block<T>) -> (Block<T>, Mat<T>) {
    let k = w.ncols();
    let mut cols = w.columns();
    let mut r = Mat::zeros(k, k);
    for c in 0..k {
        let orig = cols[c].iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        for _ in 0..2 {
            let coef: Vec<T> = (0..c).map(|i| cdot(&cols[i], &cols[c])).collect();
            let (done, rest) = cols.split_at_mut(c);
            for (i, &h) in coef.iter().enumerate() {
                if h == T::zero() {
                    continue;
                }
                for (y, q) in rest[0].iter_mut().zip(&done[i]) {
                    *y -= h * *q;
                }
                r[(i, c)] += h;
            }
        }
        let norm = cols[c].iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if norm <= 1e-12 * orig || norm == 0.0 {
            cols[c].iter_mut().for_each(|v| *v = T::zero());
        } else {
            let inv = 1.0 / norm;
            cols[c].iter_mut().for_each(|v| *v = v.scale(inv));
            r[(c, c)] = T::from_real(norm);
        }
    }
    (Block::from_columns(&cols), r)
}

/// Block FGMRES(`restart`), right-preconditioned. With `flexible = false`
/// only the Krylov basis is stored and the preconditioner is applied once more
/// to form the update, which requires a fixed preconditioner.
pub fn block_fgmres<T: Scalar>(
    op: &dyn LinearOperator<T>,
    prec: &dyn Preconditioner<T>,
    b: &Block<T>,
    restart: usize,
    tol: f64,
    maxit: usize,
    flexible: bool,
) -> Result<(Block<T>, SolveReport)> {
    check_shapes(op, b, tol)?;
    if restart == 0 {
        return Err(Error::InvalidArgument("restart length must be at least 1".into()));
    }
    let start = Instant::now();
    let mut report = SolveReport::default();
    let nz = split_zero_columns(b);
    let n = b.nrows();
    let s = nz.active.len();
    let mut x = Block::zeros(n, s);
    if s == 0 {
        return Ok(finish(op, b, &nz, &x, tol, report, start));
    }
    let bb = &nz.b;
    let mut r = bb.clone();
    loop {
        if report.iterations >= maxit {
            break;
        }
        let (v0, r0) = thin_qr(&r);
        report.qr_factorizations += 1;
        let m = restart;
        let mut h = Mat::zeros((m + 1) * s, m * s);
        let mut e = Mat::zeros((m + 1) * s, s);
        e.set_block(0, 0, &r0);
        let mut basis = vec![v0];
        let mut zs: Vec<Block<T>> = Vec::new();
        let mut y = Mat::zeros(0, s);
        for j in 0..m {
            if report.iterations >= maxit {
                break;
            }
            let z = prec.apply(&basis[j]);
            report.iterations += 1;
            let mut w = op.apply(&z);
            if flexible {
                zs.push(z);
            }
            let before = w.frob_dot(&w).re().sqrt();
            for (i, vi) in basis.iter().enumerate() {
                let hij = vi.gram(&w);
                w.add_mul_small(vi, &hij, -T::one());
                h.set_block(i * s, j * s, &hij);
            }
            let after = w.frob_dot(&w).re().sqrt();
            if after < 0.7 * before {
                let mut worst_ortho = 0.0f64;
                for (i, vi) in basis.iter().enumerate() {
                    let corr = vi.gram(&w);
                    w.add_mul_small(vi, &corr, -T::one());
                    let old = h.sub_matrix(i * s, j * s, s, s);
                    h.set_block(i * s, j * s, &Mat::from_fn(s, s, |a, c| old[(a, c)] + corr[(a, c)]));
                }
                let wn = w.frob_dot(&w).re().sqrt();
                if wn > 1e-10 * before {
                    for vi in basis.iter() {
                        worst_ortho = worst_ortho.max(vi.gram(&w).max_abs() / wn);
                    }
                }
                if worst_ortho > 1e-6 {
                    return Err(Error::Breakdown {
                        iteration: report.iterations,
                        message: format!("loss of orthogonality {worst_ortho:.2e} after reorthogonalization"),
                    });
                }
            }
            let (q, rj) = thin_qr(&w);
            report.qr_factorizations += 1;
            h.set_block((j + 1) * s, j * s, &rj);
            basis.push(q);
            let hk = h.sub_matrix(0, 0, (j + 2) * s, (j + 1) * s);
            let ek = e.sub_matrix(0, 0, (j + 2) * s, s);
            let (yk, res) = hk.least_squares(&ek);
            y = yk;
            let rel = relative(&res, &nz.norms);
            report.history.push(worst(&rel));
            if worst(&rel) <= tol {
                break;
            }
        }
        let used = y.rows() / s;
        if used == 0 {
            break;
        }
        if flexible {
            for (i, z) in zs.iter().enumerate().take(used) {
                x.add_mul_small(z, &y.sub_matrix(i * s, 0, s, s), T::one());
            }
        } else {
            let mut t = Block::zeros(n, s);
            for (i, vi) in basis.iter().enumerate().take(used) {
                t.add_mul_small(vi, &y.sub_matrix(i * s, 0, s, s), T::one());
            }
            x.axpy(T::one(), &prec.apply(&t));
            report.iterations += 1;
        }
        r = bb.sub(&op.apply(&x));
        let rel = relative(&r.col_norms(), &nz.norms);
        if worst(&rel) <= tol {
            break;
        }
        report.restarts += 1;
    }
    Ok(finish(op, b, &nz, &x, tol, report, start))
}

fn apply_mask(v: &mut [f64], mask: Option<&[bool]>) {
    if let Some(m) = mask {
        for (x, &keep) in v.iter_mut().zip(m) {
            if !keep {
                *x = 0.0;
            }
        }
    }
}

/// Preconditioned conjugate gradients on a real symmetric system.
pub fn pcg(
    op: &dyn Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    prec: &dyn Fn(&[f64]) -> Vec<f64>,
    tol: f64,
    maxit: usize,
) -> (Vec<f64>, SolveReport) {
    pcg_impl(op, b, prec, None, tol, maxit)
}

/// PCG restricted to the coordinates where `inactive` is true; every other
/// coordinate is held at zero in every vector operation.
pub fn projected_pcg(
    op: &dyn Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    prec: &dyn Fn(&[f64]) -> Vec<f64>,
    inactive: &[bool],
    tol: f64,
    maxit: usize,
) -> (Vec<f64>, SolveReport) {
    assert_eq!(inactive.len(), b.len());
    pcg_impl(op, b, prec, Some(inactive), tol, maxit)
}

fn pcg_impl(
    op: &dyn Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    prec: &dyn Fn(&[f64]) -> Vec<f64>,
    mask: Option<&[bool]>,
    tol: f64,
    maxit: usize,
) -> (Vec<f64>, SolveReport) {
    let start = Instant::now();
    let n = b.len();
    let masked_op = |v: &[f64]| {
        let mut y = op(v);
        apply_mask(&mut y, mask);
        y
    };
    let masked_prec = |v: &[f64]| {
        let mut y = prec(v);
        apply_mask(&mut y, mask);
        y
    };
    let mut report = SolveReport::default();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    apply_mask(&mut r, mask);
    let bn = dot(&r, &r).sqrt();
    if bn > 0.0 {
        let mut z = masked_prec(&r);
        let mut rz = dot(&r, &z);
        report.history.push(rz.max(0.0).sqrt());
        let mut p = z.clone();
        while report.iterations < maxit {
            let q = masked_op(&p);
            let pq = dot(&p, &q);
            if pq <= 0.0 {
                report.negative_curvature = true;
                break;
            }
            let alpha = rz / pq;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            report.iterations += 1;
            z = masked_prec(&r);
            let rz_new = dot(&r, &z);
            report.history.push(rz_new.max(0.0).sqrt());
            if dot(&r, &r).sqrt() <= tol * bn {
                break;
            }
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
    }
    let ax = masked_op(&x);
    let mut rb = b.to_vec();
    apply_mask(&mut rb, mask);
    let res: f64 = rb.iter().zip(&ax).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    let rel = if bn > 0.0 { res / bn } else { res };
    report.residuals = vec![rel];
    report.converged = vec![rel <= tol];
    report.column_cycles = vec![report.iterations];
    report.wall_time = start.elapsed().as_secs_f64();
    (x, report)
}
