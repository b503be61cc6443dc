//! Quadratic smoothing regularizers and the preconditioner built from their
//! Hessian.

use serde::{Deserialize, Serialize};

use crate::banded::{bandwidths, factor_bytes, grid_band_ordering, BandedLu};
use crate::block::Block;
use crate::error::{invalid, Result};
use crate::mesh::RegularGrid;
use crate::multigrid::{level_dims, CycleKind, CycleSpec, MgHierarchy};
use crate::scalar::dot;
use crate::sparse::{Csr, CsrBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    /// `‖Δ_h (m - m_ref)‖²`, spline smoothing.
    R1Biharmonic,
    /// `‖∇_h (m - m_ref)‖²`.
    R2Gradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub alpha: f64,
    pub m_ref: Vec<f64>,
}

/// `R(m) = ‖D (m - m_ref)‖²` with `D` the mirrored Laplacian or the
/// forward-difference gradient.
#[derive(Clone, Debug)]
pub struct Regularizer {
    kind: RegularizerKind,
    alpha: f64,
    m_ref: Vec<f64>,
    d: Csr<f64>,
    dt: Csr<f64>,
    dims: Vec<usize>,
}

/// Discrete Laplacian with mirrored ghost nodes (`m[-1] = m[1]`).
pub fn mirrored_laplacian(grid: &RegularGrid) -> Csr<f64> {
    let n = grid.dims3();
    let h = grid.spacing3();
    let nd = grid.ndim();
    let st = grid.strides();
    let mut b = CsrBuilder::new(grid.len(), grid.len() * (2 * nd + 1));
    for idx in 0..grid.len() {
        let c = grid.coords(idx);
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(2 * nd + 1);
        let mut diag = 0.0;
        for k in 0..nd {
            let w = 1.0 / (h[k] * h[k]);
            diag -= 2.0 * w;
            let lo = if c[k] == 0 { idx + st[k] } else { idx - st[k] };
            let hi = if c[k] + 1 == n[k] { idx - st[k] } else { idx + st[k] };
            row.push((lo, w));
            row.push((hi, w));
        }
        row.push((idx, diag));
        row.sort_by_key(|e| e.0);
        let mut last = usize::MAX;
        let mut acc = 0.0;
        for (j, v) in row {
            if j != last && last != usize::MAX {
                b.push(last, acc);
                acc = 0.0;
            }
            last = j;
            acc += v;
        }
        b.push(last, acc);
        b.finish_row();
    }
    b.build()
}

/// Forward differences along every axis, one row per grid edge.
pub fn forward_gradient(grid: &RegularGrid) -> Csr<f64> {
    let n = grid.dims3();
    let h = grid.spacing3();
    let st = grid.strides();
    let mut b = CsrBuilder::new(grid.len(), 2 * grid.len() * grid.ndim());
    for k in 0..grid.ndim() {
        for idx in 0..grid.len() {
            if grid.coords(idx)[k] + 1 == n[k] {
                continue;
            }
            b.push(idx, -1.0 / h[k]);
            b.push(idx + st[k], 1.0 / h[k]);
            b.finish_row();
        }
    }
    b.build()
}

impl Regularizer {
    pub fn new(grid: &RegularGrid, config: RegularizerConfig) -> Result<Self> {
        if config.m_ref.len() != grid.len() {
            return Err(invalid(format!("reference model has {} values for {} nodes", config.m_ref.len(), grid.len())));
        }
        if !(config.alpha >= 0.0) {
            return Err(invalid("alpha must be nonnegative"));
        }
        let d = match config.kind {
            RegularizerKind::R1Biharmonic => mirrored_laplacian(grid),
            RegularizerKind::R2Gradient => forward_gradient(grid),
        };
        let dt = d.transpose();
        Ok(Regularizer {
            kind: config.kind,
            alpha: config.alpha,
            m_ref: config.m_ref,
            d,
            dt,
            dims: grid.dims().to_vec(),
        })
    }

    pub fn kind(&self) -> RegularizerKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn m_ref(&self) -> &[f64] {
        &self.m_ref
    }

    pub fn operator(&self) -> &Csr<f64> {
        &self.d
    }

    fn diff(&self, m: &[f64]) -> Vec<f64> {
        assert_eq!(m.len(), self.m_ref.len(), "model length differs from the regularizer grid");
        let x: Vec<f64> = m.iter().zip(&self.m_ref).map(|(a, b)| a - b).collect();
        self.d.mul_vec(&x)
    }

    /// `R(m)`, without the `alpha` factor.
    pub fn value(&self, m: &[f64]) -> f64 {
        let r = self.diff(m);
        dot(&r, &r)
    }

    pub fn gradient(&self, m: &[f64]) -> Vec<f64> {
        let r = self.diff(m);
        self.dt.mul_vec(&r).into_iter().map(|v| 2.0 * v).collect()
    }

    /// `∇²R v`.
    pub fn hessian_vec(&self, v: &[f64]) -> Vec<f64> {
        let r = self.d.mul_vec(v);
        self.dt.mul_vec(&r).into_iter().map(|x| 2.0 * x).collect()
    }

    /// Assembled `∇²R`.
    pub fn hessian(&self) -> Csr<f64> {
        self.dt.matmul(&self.d).map(|v| 2.0 * v)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }
}

#[derive(Clone, Debug)]
enum Inner {
    Banded(BandedLu<f64>),
    Multigrid(MgHierarchy<f64>),
    Diagonal(Vec<f64>),
}

/// Approximate inverse of `scale · ∇²R + shift · I`, with `shift` equal to
/// `1e-8` times the mean diagonal. Uses a banded factorization when it fits
/// in `max_bytes`, otherwise two V-cycles when the grid coarsens, otherwise
/// the diagonal.
#[derive(Clone, Debug)]
pub struct RegularizerPreconditioner {
    inner: Inner,
}

pub const DEFAULT_PRECONDITIONER_BYTES: usize = 1 << 30;

impl RegularizerPreconditioner {
    pub fn new(reg: &Regularizer, scale: f64, max_bytes: usize) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(invalid("preconditioner scale must be positive"));
        }
        let h = reg.hessian();
        let n = h.nrows();
        let diag = h.diagonal();
        let shift = 1e-8 * diag.iter().sum::<f64>() / n as f64;
        let mut b = CsrBuilder::new(n, h.nnz() + n);
        for i in 0..n {
            let (cols, vals) = h.row(i);
            let mut seen = false;
            for (&j, &v) in cols.iter().zip(vals) {
                let mut v = scale * v;
                if j as usize == i {
                    v += scale * shift;
                    seen = true;
                }
                b.push(j as usize, v);
            }
            if !seen {
                b.push(i, scale * shift);
            }
            b.finish_row();
        }
        let a = b.build();
        let perm = grid_band_ordering(reg.dims());
        let (kl, ku) = bandwidths(&a, Some(&perm));
        let inner = if factor_bytes::<f64>(n, kl, ku) <= max_bytes {
            Inner::Banded(BandedLu::factor(&a, Some(perm))?)
        } else {
            let levels = coarse_levels(reg.dims());
            if levels >= 2 {
                Inner::Multigrid(MgHierarchy::from_operator(a, reg.dims(), levels)?)
            } else {
                Inner::Diagonal(a.diagonal().iter().map(|d| 1.0 / d).collect())
            }
        };
        Ok(RegularizerPreconditioner { inner })
    }

    pub fn is_direct(&self) -> bool {
        matches!(self.inner, Inner::Banded(_))
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        match &self.inner {
            Inner::Banded(lu) => lu.solve_vec(r),
            Inner::Multigrid(mg) => {
                let b = Block::from_column(r);
                let mut x = Block::zeros(r.len(), 1);
                let spec = CycleSpec::new(CycleKind::V);
                for _ in 0..2 {
                    mg.cycle(&spec, &b, &mut x).expect("shapes checked at construction");
                }
                x.into_vec()
            }
            Inner::Diagonal(d) => r.iter().zip(d).map(|(a, b)| a * b).collect(),
        }
    }
}

fn coarse_levels(dims: &[usize]) -> usize {
    let mut best = 1;
    for l in 2..=12 {
        match level_dims(dims, l) {
            Ok(all) => {
                best = l;
                if all.last().unwrap().iter().product::<usize>() <= 4096 {
                    break;
                }
            }
            Err(_) => break,
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(kind: RegularizerKind, dims: &[usize]) -> (RegularGrid, Regularizer) {
        let h: Vec<f64> = (0..dims.len()).map(|k| 0.3 + 0.1 * k as f64).collect();
        let g = RegularGrid::with_spacing(dims, &h).unwrap();
        let m_ref: Vec<f64> = (0..g.len()).map(|i| 0.2 + 0.01 * (i as f64).sin()).collect();
        let r = Regularizer::new(&g, RegularizerConfig { kind, alpha: 1.0, m_ref }).unwrap();
        (g, r)
    }

    #[test]
    fn reference_and_constant_shift_are_free() {
        for kind in [RegularizerKind::R1Biharmonic, RegularizerKind::R2Gradient] {
            for dims in [&[6usize, 5][..], &[4, 5, 3][..]] {
                let (_, r) = setup(kind, dims);
                let m = r.m_ref().to_vec();
                assert_eq!(r.value(&m), 0.0);
                assert!(r.gradient(&m).iter().all(|&v| v == 0.0));
                let shifted: Vec<f64> = m.iter().map(|v| v + 0.37).collect();
                assert!(r.value(&shifted) < 1e-20);
            }
        }
    }

    #[test]
    fn laplacian_matches_stencil_inside() {
        let g = RegularGrid::with_spacing(&[5, 4], &[0.5, 0.25]).unwrap();
        let l = mirrored_laplacian(&g);
        let c = g.index(2, 1, 0);
        assert_eq!(l.get(c, c), -2.0 / 0.25 - 2.0 / 0.0625);
        assert_eq!(l.get(c, c + 1), 4.0);
        assert_eq!(l.get(c, c + 5), 16.0);
        let corner = g.index(0, 0, 0);
        assert_eq!(l.get(corner, 1), 8.0);
        assert_eq!(l.get(corner, 5), 32.0);
    }

    #[test]
    fn gradient_has_one_row_per_edge() {
        let g = RegularGrid::with_spacing(&[5, 4, 3], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(forward_gradient(&g).nrows(), 4 * 4 * 3 + 5 * 3 * 3 + 5 * 4 * 2);
    }

    #[test]
    fn preconditioner_inverts_shifted_hessian() {
        let (_, r) = setup(RegularizerKind::R1Biharmonic, &[9, 7]);
        let p = RegularizerPreconditioner::new(&r, 3.0, DEFAULT_PRECONDITIONER_BYTES).unwrap();
        assert!(p.is_direct());
        let v: Vec<f64> = (0..63).map(|i| (i as f64 * 0.3).cos()).collect();
        let x = p.apply(&v);
        let hx = r.hessian_vec(&x);
        let n = 63.0;
        let shift = 1e-8 * r.hessian().diagonal().iter().sum::<f64>() / n;
        let err: f64 = hx.iter().zip(&x).zip(&v).map(|((a, b), c)| (3.0 * (a + shift * b) - c).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-8 * dot(&v, &v).sqrt(), "{err}");
    }

    #[test]
    fn multigrid_fallback_is_used_for_tight_memory() {
        let (_, r) = setup(RegularizerKind::R2Gradient, &[17, 17]);
        let p = RegularizerPreconditioner::new(&r, 1.0, 10).unwrap();
        assert!(!p.is_direct());
        let v: Vec<f64> = (0..289).map(|i| (i as f64 * 0.7).sin()).collect();
        let z = p.apply(&v);
        assert!(dot(&z, &v) > 0.0);
    }
}
