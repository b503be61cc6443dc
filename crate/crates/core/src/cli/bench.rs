use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::block::Block;
use crate::error::{Error, Result};
use crate::helmholtz::{
    assemble_attenuation, source_block, HelmholtzProblem, HelmholtzSolver, SolverMethod, SolverOptions,
};
use crate::mesh::{RegularGrid, SlownessSquaredModel};
use crate::models::ModelSpec;
use crate::multigrid::level_dims;
use crate::scalar::Complex64;

/// Multi-RHS solver comparison on linear-gradient models at ten points per
/// wavelength for the slowest velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub grids: Vec<Vec<usize>>,
    /// Grid spacing (km); the same on every axis.
    pub spacing: f64,
    pub v_top: f64,
    pub v_bottom: f64,
    pub blocks: Vec<usize>,
    pub methods: Vec<SolverMethod>,
    pub attenuation: f64,
    pub layer_width: usize,
    pub shift_factor: f64,
    pub levels: usize,
    pub tol: f64,
    pub max_cycles: usize,
    pub restart: usize,
    pub max_memory_bytes: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            grids: vec![vec![65, 65]],
            spacing: 0.025,
            v_top: 1.5,
            v_bottom: 3.0,
            blocks: vec![1, 4, 16],
            methods: vec![SolverMethod::MgBicgstab, SolverMethod::MgFgmresW, SolverMethod::MgFgmresK],
            attenuation: 0.02 * PI,
            layer_width: 8,
            shift_factor: 0.2,
            levels: 3,
            tol: 1e-6,
            max_cycles: 200,
            restart: 5,
            max_memory_bytes: 4 << 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub grid: Vec<usize>,
    pub method: SolverMethod,
    pub block: usize,
    pub setup_s: f64,
    pub cycles_mean: f64,
    pub solve_s_per_rhs: f64,
    pub converged: bool,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "grid,method,block,setup_s,cycles_mean,solve_s_per_rhs,converged";

    pub fn to_csv(&self) -> String {
        let g: Vec<String> = self.grid.iter().map(|n| n.to_string()).collect();
        format!(
            "{},{},{},{:.6},{:.3},{:.6},{}",
            g.join("x"),
            self.method.name(),
            self.block,
            self.setup_s,
            self.cycles_mean,
            self.solve_s_per_rhs,
            self.converged
        )
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grids.is_empty() || self.blocks.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("bench needs grids, blocks and methods".into()));
        }
        if self.blocks.contains(&0) {
            return Err(Error::Config("block sizes must be positive".into()));
        }
        if self.methods.contains(&SolverMethod::DenseLuSmall) {
            return Err(Error::Config("bench compares multigrid solvers only".into()));
        }
        if !(self.v_top > 0.0 && self.v_bottom > 0.0 && self.spacing > 0.0 && self.tol > 0.0) {
            return Err(Error::Config("bench velocities, spacing and tolerance must be positive".into()));
        }
        for g in &self.grids {
            level_dims(g, self.levels).map_err(|e| Error::Config(format!("bench grid {g:?}: {e}")))?;
            let need = self.memory_estimate(g);
            if need > self.max_memory_bytes {
                return Err(Error::Config(format!(
                    "bench grid {g:?} needs about {need} bytes, cap is {}",
                    self.max_memory_bytes
                )));
            }
        }
        Ok(())
    }

    /// Rough peak bytes: hierarchy, Krylov workspace and the right-hand sides.
    pub fn memory_estimate(&self, dims: &[usize]) -> usize {
        let n: usize = dims.iter().product();
        let b = self.blocks.iter().copied().max().unwrap_or(1);
        let per_node = 16 * (2 * (2 * dims.len() + 1) + b * (2 * self.restart + 12) + 2 * b);
        n * per_node * 8 / 7
    }

    pub fn solver_options(&self, method: SolverMethod) -> SolverOptions {
        SolverOptions {
            method,
            tol: self.tol,
            max_cycles: self.max_cycles,
            levels: self.levels,
            shift_factor: self.shift_factor,
            restart: self.restart,
            ..Default::default()
        }
    }

    /// Problem and right-hand sides (as many as the largest block) on `dims`.
    pub fn problem(&self, dims: &[usize]) -> Result<(HelmholtzProblem, Block<Complex64>)> {
        let h = vec![self.spacing; dims.len()];
        let grid = RegularGrid::with_spacing(dims, &h)?;
        let v = ModelSpec::LinearGradient { top: self.v_top, bottom: self.v_bottom }.velocity(&grid)?;
        let v_min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let model = SlownessSquaredModel::from_velocity(grid.clone(), &v)?;
        let omega = 2.0 * PI * v_min / (10.0 * self.spacing);
        let gamma = assemble_attenuation(&grid, self.attenuation, self.layer_width)?.gamma(omega);
        let problem = HelmholtzProblem::with_gamma(&model, omega, gamma, false)?;
        let nrhs = self.blocks.iter().copied().max().unwrap_or(1);
        let q = source_block(&grid, &source_positions(&grid, nrhs, self.layer_width + 2), Complex64::new(1.0, 0.0))?;
        Ok((problem, q))
    }

    /// One row per (grid, method, block); every cell solves the same right-hand sides.
    pub fn run(&self, mut on_row: impl FnMut(&BenchRow) -> Result<()>) -> Result<Vec<BenchRow>> {
        self.validate()?;
        let mut rows = Vec::new();
        for dims in &self.grids {
            let (problem, q) = self.problem(dims)?;
            for &method in &self.methods {
                let solver = HelmholtzSolver::new(problem.clone(), self.solver_options(method))?;
                for &b in &self.blocks {
                    let row = time_blocks(&solver, &q, b, dims)?;
                    on_row(&row)?;
                    rows.push(row);
                }
            }
        }
        Ok(rows)
    }
}

fn time_blocks(solver: &HelmholtzSolver, q: &Block<Complex64>, b: usize, dims: &[usize]) -> Result<BenchRow> {
    let nrhs = q.ncols();
    let mut seconds = 0.0;
    let mut cycles = 0.0;
    let mut converged = true;
    let mut start = 0;
    while start < nrhs {
        let cols: Vec<usize> = (start..(start + b).min(nrhs)).collect();
        let chunk = q.select_columns(&cols);
        let t = Instant::now();
        let (_, rep) = solver.solve_with_report(&chunk)?;
        seconds += t.elapsed().as_secs_f64();
        cycles += rep.column_cycles.iter().sum::<usize>() as f64;
        converged &= rep.all_converged();
        start += b;
    }
    Ok(BenchRow {
        grid: dims.to_vec(),
        method: solver.options().method,
        block: b,
        setup_s: solver.setup_seconds(),
        cycles_mean: cycles / nrhs as f64,
        solve_s_per_rhs: seconds / nrhs as f64,
        converged,
    })
}

/// Sources spread over the lateral plane at depth node `depth`, inside the absorbing layer's interior.
fn source_positions(grid: &RegularGrid, count: usize, depth: usize) -> Vec<[f64; 3]> {
    let nd = grid.ndim();
    let n = grid.dims3();
    let h = grid.spacing3();
    let depth = depth.min(n[nd - 1] - 1);
    let per_axis = if nd == 2 { count } else { (count as f64).sqrt().ceil() as usize };
    let frac = |i: usize, m: usize| 0.25 + 0.5 * (i as f64 + 0.5) / m as f64;
    (0..count)
        .map(|s| {
            let mut p = [0.0; 3];
            let (i, j) = if nd == 2 { (s, 0) } else { (s % per_axis, s / per_axis) };
            p[0] = frac(i, per_axis) * (n[0] - 1) as f64 * h[0];
            if nd == 3 {
                p[1] = frac(j, per_axis) * (n[1] - 1) as f64 * h[1];
            }
            p[nd - 1] = depth as f64 * h[nd - 1];
            p
        })
        .collect()
}
