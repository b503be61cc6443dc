//! Discrete Helmholtz operator with attenuation and an absorbing layer,
//! multi-source forward solves, FWI sensitivity products and the Ricker
//! source.
//!
//! The operator is `A = Δ_h + ω² diag((1 - iγ/ω) m)` with a truncated
//! (Dirichlet) stencil at the edge of the padded grid. `A` is complex
//! symmetric, so transposed solves reuse the forward solver.

use std::f64::consts::PI;

use half::f16;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::banded::{bandwidths, factor_bytes, grid_band_ordering, BandedLu};
use crate::block::Block;
use crate::error::{invalid, Error, Result};
use crate::krylov::{block_bicgstab, block_fgmres, SolveReport};
use crate::mesh::{RegularGrid, SamplingOperator, SlownessSquaredModel};
use crate::multigrid::{build_hierarchy, CycleKind, CycleSpec, MgHierarchy, MgPreconditioner};
use crate::scalar::{Complex64, Scalar};
use crate::sparse::{Csr, CsrBuilder};

/// Attenuation `γ = base + ω·profile`; the profile is a quadratic ramp that
/// is 1 on the outer boundary and 0 at the inner edge of the layer.
#[derive(Clone, Debug)]
pub struct AttenuationField {
    grid: RegularGrid,
    base: f64,
    layer_width: usize,
    free_surface: bool,
    profile: Vec<f64>,
}

pub fn assemble_attenuation(grid: &RegularGrid, base_gamma: f64, layer_width: usize) -> Result<AttenuationField> {
    assemble_attenuation_with(grid, base_gamma, layer_width, true)
}

/// With `free_surface` the low side of the last axis gets no ramp.
pub fn assemble_attenuation_with(
    grid: &RegularGrid,
    base_gamma: f64,
    layer_width: usize,
    free_surface: bool,
) -> Result<AttenuationField> {
    if !(base_gamma >= 0.0 && base_gamma.is_finite()) {
        return Err(invalid(format!("base attenuation must be nonnegative, got {base_gamma}")));
    }
    let nd = grid.ndim();
    for (k, &n) in grid.dims().iter().enumerate() {
        if 2 * layer_width >= n {
            return Err(invalid(format!("absorbing layer of {layer_width} nodes is too wide for axis {k} with {n} nodes")));
        }
    }
    let dims = grid.dims3();
    let l = layer_width as f64;
    let ramp = |d: usize| if d < layer_width { ((l - d as f64) / l).powi(2) } else { 0.0 };
    let profile = (0..grid.len())
        .map(|idx| {
            let c = grid.coords(idx);
            (0..nd)
                .map(|k| {
                    let lo = if free_surface && k == nd - 1 { 0.0 } else { ramp(c[k]) };
                    lo + ramp(dims[k] - 1 - c[k])
                })
                .sum()
        })
        .collect();
    Ok(AttenuationField { grid: grid.clone(), base: base_gamma, layer_width, free_surface, profile })
}

impl AttenuationField {
    pub fn grid(&self) -> &RegularGrid {
        &self.grid
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn layer_width(&self) -> usize {
        self.layer_width
    }

    pub fn free_surface(&self) -> bool {
        self.free_surface
    }

    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    /// γ field at angular frequency `omega` (layer maximum `omega`).
    pub fn gamma(&self, omega: f64) -> Vec<f64> {
        self.profile.iter().map(|p| self.base + omega * p).collect()
    }
}

#[derive(Clone, Debug)]
pub struct HelmholtzProblem {
    grid: RegularGrid,
    m: Vec<f64>,
    omega: f64,
    gamma: Vec<f64>,
    matrix: Csr<Complex64>,
}

pub fn points_per_wavelength(grid: &RegularGrid, m_max: f64, omega: f64) -> f64 {
    2.0 * PI / (omega * m_max.sqrt() * grid.min_spacing())
}

impl HelmholtzProblem {
    /// Problem on the (padded) model grid; fails below ten points per wavelength.
    pub fn new(model: &SlownessSquaredModel, omega: f64, atten: &AttenuationField) -> Result<Self> {
        if atten.grid() != model.grid() {
            return Err(invalid("attenuation and model grids differ"));
        }
        Self::with_gamma(model, omega, atten.gamma(omega), true)
    }

    pub fn with_gamma(model: &SlownessSquaredModel, omega: f64, gamma: Vec<f64>, check_ppw: bool) -> Result<Self> {
        let grid = model.grid().clone();
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(invalid(format!("angular frequency must be positive, got {omega}")));
        }
        if gamma.len() != grid.len() {
            return Err(invalid("attenuation field has the wrong length"));
        }
        if gamma.iter().any(|g| !(*g >= 0.0)) {
            return Err(invalid("attenuation must be nonnegative"));
        }
        if check_ppw {
            let ppw = points_per_wavelength(&grid, model.max_value(), omega);
            if ppw < 10.0 {
                return Err(invalid(format!("only {ppw:.2} points per wavelength; need at least 10")));
            }
        }
        let m = model.values().to_vec();
        let matrix = assemble(&grid, &m, omega, &gamma);
        Ok(HelmholtzProblem { grid, m, omega, gamma, matrix })
    }

    pub fn grid(&self) -> &RegularGrid {
        &self.grid
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn matrix(&self) -> &Csr<Complex64> {
        &self.matrix
    }

    /// `1 - iγ/ω` per node.
    pub fn mass_coefficient(&self) -> Vec<Complex64> {
        self.gamma.iter().map(|g| Complex64::new(1.0, -g / self.omega)).collect()
    }

    /// Operator with `γ` replaced by `γ + shift_factor·ω`.
    pub fn shifted_matrix(&self, shift_factor: f64) -> Csr<Complex64> {
        if shift_factor == 0.0 {
            return self.matrix.clone();
        }
        let g: Vec<f64> = self.gamma.iter().map(|g| g + shift_factor * self.omega).collect();
        assemble(&self.grid, &self.m, self.omega, &g)
    }

    pub fn apply(&self, u: &[Complex64]) -> Result<Vec<Complex64>> {
        if u.len() != self.grid.len() {
            return Err(invalid(format!("field has {} values for {} nodes", u.len(), self.grid.len())));
        }
        Ok(self.matrix.mul_vec(u))
    }
}

pub fn apply_helmholtz(problem: &HelmholtzProblem, u: &[Complex64]) -> Result<Vec<Complex64>> {
    problem.apply(u)
}

fn assemble(grid: &RegularGrid, m: &[f64], omega: f64, gamma: &[f64]) -> Csr<Complex64> {
    let nd = grid.ndim();
    let dims = grid.dims3();
    let strides = grid.strides();
    let inv_h2: Vec<f64> = grid.spacing().iter().map(|h| 1.0 / (h * h)).collect();
    let lap_center: f64 = -2.0 * inv_h2.iter().sum::<f64>();
    let n = grid.len();
    let mut b = CsrBuilder::new(n, (2 * nd + 1) * n);
    for idx in 0..n {
        let c = grid.coords(idx);
        // columns in increasing order
        for k in (0..nd).rev() {
            if c[k] > 0 {
                b.push(idx - strides[k], Complex64::new(inv_h2[k], 0.0));
            }
        }
        let mass = omega * omega * m[idx];
        b.push(idx, Complex64::new(lap_center + mass, -omega * gamma[idx] * m[idx]));
        for k in 0..nd {
            if c[k] + 1 < dims[k] {
                b.push(idx + strides[k], Complex64::new(inv_h2[k], 0.0));
            }
        }
        b.finish_row();
    }
    b.build()
}

/// Ricker wavelet with peak frequency `f_m` (Hz).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RickerSource {
    pub f_m: f64,
}

pub fn ricker(f_m: f64) -> Result<RickerSource> {
    if !(f_m > 0.0 && f_m.is_finite()) {
        return Err(invalid(format!("peak frequency must be positive, got {f_m}")));
    }
    Ok(RickerSource { f_m })
}

impl RickerSource {
    pub fn time(&self, t: f64) -> f64 {
        let a = (PI * self.f_m * t).powi(2);
        (1.0 - 2.0 * a) * (-a).exp()
    }

    /// Transform `∫ r(t) e^{-iωt} dt`, which is real and nonnegative.
    pub fn spectrum(&self, omega: f64) -> f64 {
        let a = (PI * self.f_m).powi(2);
        (PI / a).sqrt() * omega * omega / (2.0 * a) * (-omega * omega / (4.0 * a)).exp()
    }
}

/// Point sources at `positions`, one column each, scaled by `amplitude`.
pub fn source_block(grid: &RegularGrid, positions: &[[f64; 3]], amplitude: Complex64) -> Result<Block<Complex64>> {
    let mut q = Block::zeros(grid.len(), positions.len());
    let inv_vol = 1.0 / grid.cell_volume();
    for (s, pos) in positions.iter().enumerate() {
        let node = grid.nearest_node(&pos[..])?;
        q.row_mut(node)[s] = amplitude.scale(inv_vol);
    }
    Ok(q)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    MgBicgstab,
    MgFgmresW,
    MgFgmresK,
    DenseLuSmall,
}

impl SolverMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SolverMethod::MgBicgstab => "mg_bicgstab",
            SolverMethod::MgFgmresW => "mg_fgmres_w",
            SolverMethod::MgFgmresK => "mg_fgmres_k",
            SolverMethod::DenseLuSmall => "dense_lu_small",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mg_bicgstab" => Ok(SolverMethod::MgBicgstab),
            "mg_fgmres_w" => Ok(SolverMethod::MgFgmresW),
            "mg_fgmres_k" => Ok(SolverMethod::MgFgmresK),
            "dense_lu_small" => Ok(SolverMethod::DenseLuSmall),
            _ => Err(invalid(format!("unknown solver method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub method: SolverMethod,
    pub tol: f64,
    /// Cap on multigrid cycles per solve.
    pub max_cycles: usize,
    pub levels: usize,
    pub shift_factor: f64,
    pub restart: usize,
    pub direct_max_nodes: usize,
    pub direct_max_bytes: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            method: SolverMethod::MgBicgstab,
            tol: 1e-6,
            max_cycles: 400,
            levels: 3,
            shift_factor: 0.2,
            restart: 5,
            direct_max_nodes: 200_000,
            direct_max_bytes: 2 << 30,
        }
    }
}

impl SolverOptions {
    pub fn with_method(method: SolverMethod) -> Self {
        SolverOptions { method, ..Default::default() }
    }
}

#[derive(Clone, Debug)]
enum Backend {
    Direct(BandedLu<Complex64>),
    Mg(MgHierarchy<Complex64>),
}

/// A Helmholtz problem together with its factored preconditioner or direct
/// factorization, reusable for any number of right-hand sides.
#[derive(Clone, Debug)]
pub struct HelmholtzSolver {
    problem: HelmholtzProblem,
    options: SolverOptions,
    backend: Backend,
    setup_seconds: f64,
}

impl HelmholtzSolver {
    pub fn new(problem: HelmholtzProblem, options: SolverOptions) -> Result<Self> {
        if !(options.tol > 0.0) {
            return Err(invalid("solver tolerance must be positive"));
        }
        let start = std::time::Instant::now();
        let backend = match options.method {
            SolverMethod::DenseLuSmall => {
                let n = problem.grid().len();
                if n > options.direct_max_nodes {
                    return Err(invalid(format!(
                        "dense_lu_small allows at most {} nodes, grid has {n}",
                        options.direct_max_nodes
                    )));
                }
                let perm = grid_band_ordering(problem.grid().dims());
                let (kl, ku) = bandwidths(problem.matrix(), Some(&perm));
                let bytes = factor_bytes::<Complex64>(n, kl, ku);
                if bytes > options.direct_max_bytes {
                    return Err(invalid(format!("direct factorization needs {bytes} bytes, limit is {}", options.direct_max_bytes)));
                }
                Backend::Direct(BandedLu::factor(problem.matrix(), Some(perm))?)
            }
            _ => Backend::Mg(build_hierarchy(&problem, options.levels, options.shift_factor)?),
        };
        Ok(HelmholtzSolver { problem, options, backend, setup_seconds: start.elapsed().as_secs_f64() })
    }

    pub fn problem(&self) -> &HelmholtzProblem {
        &self.problem
    }

    pub fn options(&self) -> &SolverOptions {
        &self.options
    }

    pub fn setup_seconds(&self) -> f64 {
        self.setup_seconds
    }

    pub fn hierarchy(&self) -> Option<&MgHierarchy<Complex64>> {
        match &self.backend {
            Backend::Mg(h) => Some(h),
            Backend::Direct(_) => None,
        }
    }

    /// Solve `A U = Q` and report; non-convergence is flagged, not an error.
    pub fn solve_with_report(&self, q: &Block<Complex64>) -> Result<(Block<Complex64>, SolveReport)> {
        if q.nrows() != self.problem.grid().len() {
            return Err(invalid(format!("right-hand side has {} rows for {} nodes", q.nrows(), self.problem.grid().len())));
        }
        let a = self.problem.matrix();
        let o = &self.options;
        match &self.backend {
            Backend::Direct(lu) => {
                let start = std::time::Instant::now();
                let x = lu.solve(q);
                let r = a.residual(q, &x).col_norms();
                let bn = q.col_norms();
                let residuals: Vec<f64> = r.iter().zip(&bn).map(|(r, b)| if *b > 0.0 { r / b } else { *r }).collect();
                let report = SolveReport {
                    converged: residuals.iter().map(|&v| v <= o.tol).collect(),
                    residuals,
                    column_cycles: vec![0; q.ncols()],
                    wall_time: start.elapsed().as_secs_f64(),
                    ..Default::default()
                };
                Ok((x, report))
            }
            Backend::Mg(h) => {
                let kind = match o.method {
                    SolverMethod::MgBicgstab | SolverMethod::MgFgmresW => CycleKind::W,
                    SolverMethod::MgFgmresK => CycleKind::K,
                    SolverMethod::DenseLuSmall => unreachable!(),
                };
                let prec = MgPreconditioner { hierarchy: h, spec: CycleSpec::new(kind) };
                match o.method {
                    SolverMethod::MgBicgstab => block_bicgstab(a, &prec, q, o.tol, o.max_cycles),
                    _ => block_fgmres(a, &prec, q, o.restart, o.tol, o.max_cycles, true),
                }
            }
        }
    }

    /// Solve `A U = Q`; failing to reach the tolerance is an error carrying
    /// the residual history.
    pub fn solve(&self, q: &Block<Complex64>) -> Result<Block<Complex64>> {
        let (x, rep) = self.solve_with_report(q)?;
        if !rep.all_converged() {
            return Err(Error::Convergence {
                message: format!(
                    "{} reached relative residual {:.3e} (tolerance {:.1e}) after {} cycles",
                    self.options.method.name(),
                    rep.max_residual(),
                    self.options.tol,
                    rep.iterations
                ),
                history: rep.history,
            });
        }
        Ok(x)
    }

    /// Solve `A^T U = Q`; identical to [`solve`](Self::solve) since `A` is symmetric.
    pub fn solve_transpose(&self, q: &Block<Complex64>) -> Result<Block<Complex64>> {
        self.solve(q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// 32-bit float components.
    Full,
    /// 16-bit float components with a per-source scale factor.
    Compact,
}

#[derive(Clone, Debug)]
enum FieldStorage {
    Full(Block<Complex64>),
    Compact { scales: Vec<f32>, values: Vec<[f16; 2]> },
}

/// Wavefields of several sources for one problem (node-major block).
#[derive(Clone, Debug)]
pub struct WavefieldBatch {
    source_ids: Vec<usize>,
    nnodes: usize,
    storage: FieldStorage,
}

impl WavefieldBatch {
    pub fn new(source_ids: Vec<usize>, fields: Block<Complex64>) -> Result<Self> {
        if source_ids.len() != fields.ncols() {
            return Err(invalid("one source id per field column required"));
        }
        Ok(WavefieldBatch { source_ids, nnodes: fields.nrows(), storage: FieldStorage::Full(fields) })
    }

    pub fn source_ids(&self) -> &[usize] {
        &self.source_ids
    }

    pub fn num_sources(&self) -> usize {
        self.source_ids.len()
    }

    pub fn nnodes(&self) -> usize {
        self.nnodes
    }

    pub fn precision(&self) -> Precision {
        match self.storage {
            FieldStorage::Full(_) => Precision::Full,
            FieldStorage::Compact { .. } => Precision::Compact,
        }
    }

    /// Fields as a full-precision block (decoded if stored compactly).
    pub fn fields(&self) -> Block<Complex64> {
        match &self.storage {
            FieldStorage::Full(b) => b.clone(),
            FieldStorage::Compact { scales, values } => {
                let k = self.source_ids.len();
                let data = values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let s = scales[i % k] as f64;
                        Complex64::new(v[0].to_f64() * s, v[1].to_f64() * s)
                    })
                    .collect();
                Block::from_vec(self.nnodes, k, data)
            }
        }
    }

    pub fn field(&self, s: usize) -> Vec<Complex64> {
        self.fields().column(s)
    }

    pub fn to_precision(&self, p: Precision) -> WavefieldBatch {
        let fields = self.fields();
        let storage = match p {
            Precision::Full => FieldStorage::Full(fields),
            Precision::Compact => {
                let k = fields.ncols();
                let mut scales = vec![0.0f64; k];
                for row in fields.as_slice().chunks_exact(k.max(1)) {
                    for (s, v) in scales.iter_mut().zip(row) {
                        *s = s.max(v.re.abs()).max(v.im.abs());
                    }
                }
                let scales: Vec<f32> = scales.iter().map(|&s| if s > 0.0 { s as f32 } else { 1.0 }).collect();
                let values = fields
                    .as_slice()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let s = scales[i % k] as f64;
                        [f16::from_f64(v.re / s), f16::from_f64(v.im / s)]
                    })
                    .collect();
                FieldStorage::Compact { scales, values }
            }
        };
        WavefieldBatch { source_ids: self.source_ids.clone(), nnodes: self.nnodes, storage }
    }

    /// Per-source scale factors of compact storage.
    pub fn compact_parts(&self) -> Option<(&[f32], &[[f16; 2]])> {
        match &self.storage {
            FieldStorage::Compact { scales, values } => Some((scales, values)),
            FieldStorage::Full(_) => None,
        }
    }

    pub(crate) fn from_compact(source_ids: Vec<usize>, nnodes: usize, scales: Vec<f32>, values: Vec<[f16; 2]>) -> Self {
        WavefieldBatch { source_ids, nnodes, storage: FieldStorage::Compact { scales, values } }
    }
}

/// Build the solver for `problem` and solve for every column of `q`.
pub fn solve_helmholtz(problem: &HelmholtzProblem, q: &Block<Complex64>, method: SolverMethod, tol: f64) -> Result<WavefieldBatch> {
    let opts = SolverOptions { method, tol, ..Default::default() };
    let solver = HelmholtzSolver::new(problem.clone(), opts)?;
    let u = solver.solve(q)?;
    WavefieldBatch::new((0..q.ncols()).collect(), u)
}

fn check_fields(solver: &HelmholtzSolver, fields: &Block<Complex64>) -> Result<()> {
    if fields.ncols() == 0 || fields.nrows() != solver.problem().grid().len() {
        return Err(Error::State(format!(
            "stored fields have shape {:?}, expected {} nodes",
            fields.shape(),
            solver.problem().grid().len()
        )));
    }
    Ok(())
}

/// Field perturbations `A^{-1}(-ω² c ⊙ u_s ⊙ v)` for every stored field column
/// and one real model perturbation `v` on the solver grid.
pub fn fwi_field_perturbations(solver: &HelmholtzSolver, fields: &Block<Complex64>, v: &[f64]) -> Result<Block<Complex64>> {
    check_fields(solver, fields)?;
    let p = solver.problem();
    if v.len() != p.grid().len() {
        return Err(invalid("model perturbation has the wrong length"));
    }
    let w2 = p.omega() * p.omega();
    let c = p.mass_coefficient();
    let k = fields.ncols();
    let mut rhs = fields.clone();
    rhs.as_mut_slice().par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let f = c[i].scale(-w2 * v[i]);
        row.iter_mut().for_each(|x| *x *= f);
    });
    solver.solve(&rhs)
}

/// Model-space sum over sources of `Re(-ω² c ⊙ u_s ⊙ A^{-1} g_s)` for grid
/// right-hand sides `g_s` (already conjugated data residual spread by `P`).
pub fn fwi_adjoint_accumulate(solver: &HelmholtzSolver, fields: &Block<Complex64>, g: &Block<Complex64>) -> Result<Vec<f64>> {
    check_fields(solver, fields)?;
    if g.shape() != fields.shape() {
        return Err(invalid("adjoint sources and stored fields differ in shape"));
    }
    let p = solver.problem();
    let lam = solver.solve_transpose(g)?;
    let w2 = p.omega() * p.omega();
    let c = p.mass_coefficient();
    let k = fields.ncols();
    Ok(fields
        .as_slice()
        .par_chunks(k)
        .zip(lam.as_slice().par_chunks(k))
        .enumerate()
        .map(|(i, (u, l))| {
            let s: Complex64 = u.iter().zip(l).map(|(a, b)| *a * *b).sum();
            (c[i] * s).re * -w2
        })
        .collect())
}

/// `J v` for one source: `-ω² P^T A^{-1} diag(c) diag(u_s) v`.
pub fn fwi_jacobian_vec(
    solver: &HelmholtzSolver,
    u_s: &[Complex64],
    sampling: &SamplingOperator,
    mask: Option<&[bool]>,
    v: &[f64],
) -> Result<Vec<Complex64>> {
    let du = fwi_field_perturbations(solver, &Block::from_column(u_s), v)?;
    Ok(sampling.sample(du.as_slice(), mask))
}

/// `J^T w` for one source, real part of the model-space product.
pub fn fwi_jacobian_transpose_vec(
    solver: &HelmholtzSolver,
    u_s: &[Complex64],
    sampling: &SamplingOperator,
    mask: Option<&[bool]>,
    w: &[Complex64],
) -> Result<Vec<f64>> {
    let wc: Vec<Complex64> = w.iter().map(|x| x.conj()).collect();
    let g = sampling.sample_adjoint(&wc, mask);
    fwi_adjoint_accumulate(solver, &Block::from_column(u_s), &Block::from_column(&g))
}
