//! Python bindings: grids, travel times, Helmholtz solves and the
//! configuration-driven simulate/invert/render commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use seistomo_core::cli::{cmd_invert, cmd_render, cmd_simulate, RunConfig};
use seistomo_core::eikonal::fm_solve;
use seistomo_core::error::Error;
use seistomo_core::formats;
use seistomo_core::helmholtz::{assemble_attenuation, source_block, HelmholtzProblem, HelmholtzSolver, SolverMethod, SolverOptions};
use seistomo_core::inversion::InversionMode;
use seistomo_core::mesh::{self, RegularGrid, SlownessSquaredModel};
use seistomo_core::scalar::Complex64;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Convergence { .. } | Error::Breakdown { .. } | Error::Factorization(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn point(p: &[f64]) -> PyResult<[f64; 3]> {
    if p.is_empty() || p.len() > 3 {
        return Err(PyValueError::new_err(format!("a point needs 1 to 3 coordinates, got {}", p.len())));
    }
    let mut out = [0.0; 3];
    out[..p.len()].copy_from_slice(p);
    Ok(out)
}

/// Regular 2D or 3D grid; the last axis is depth.
#[pyclass(name = "Grid", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: RegularGrid,
}

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (dims, spacing, origin=None))]
    fn new(dims: Vec<usize>, spacing: Vec<f64>, origin: Option<Vec<f64>>) -> PyResult<Self> {
        let origin = origin.unwrap_or_else(|| vec![0.0; dims.len()]);
        RegularGrid::new(&dims, &spacing, &origin).map(|inner| PyGrid { inner }).map_err(py_err)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    #[getter]
    fn spacing(&self) -> Vec<f64> {
        self.inner.spacing().to_vec()
    }

    fn position(&self, index: usize) -> PyResult<Vec<f64>> {
        if index >= self.inner.len() {
            return Err(PyValueError::new_err(format!("node {index} outside a grid of {} nodes", self.inner.len())));
        }
        Ok(self.inner.position(index)[..self.inner.ndim()].to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Grid(dims={:?}, spacing={:?})", self.inner.dims(), self.inner.spacing())
    }
}

#[pyfunction]
fn velocity_to_slowness_squared(velocity: Vec<f64>) -> PyResult<Vec<f64>> {
    mesh::velocity_to_slowness_squared(&velocity).map_err(py_err)
}

#[pyfunction]
fn slowness_squared_to_velocity(m: Vec<f64>) -> Vec<f64> {
    mesh::slowness_squared_to_velocity(&m)
}

/// First-arrival travel times from `source` for slowness squared `m`.
#[pyfunction]
fn travel_time(py: Python<'_>, grid: &PyGrid, m: Vec<f64>, source: Vec<f64>) -> PyResult<Vec<f64>> {
    let model = SlownessSquaredModel::new(grid.inner.clone(), m).map_err(py_err)?;
    let src = point(&source)?;
    py.detach(|| fm_solve(&model, &src).map(|(sol, _)| sol.travel_time())).map_err(py_err)
}

/// Wavefields for unit point sources at `sources`, one list per source.
#[pyfunction]
#[pyo3(signature = (grid, m, omega, sources, attenuation=0.02 * std::f64::consts::PI, layer_width=8, method="mg_bicgstab", tol=1e-6))]
#[allow(clippy::too_many_arguments)]
fn solve_helmholtz(
    py: Python<'_>,
    grid: &PyGrid,
    m: Vec<f64>,
    omega: f64,
    sources: Vec<Vec<f64>>,
    attenuation: f64,
    layer_width: usize,
    method: &str,
    tol: f64,
) -> PyResult<Vec<Vec<Complex64>>> {
    let method = SolverMethod::parse(method).map_err(py_err)?;
    let positions = sources.iter().map(|p| point(p)).collect::<PyResult<Vec<_>>>()?;
    let g = grid.inner.clone();
    py.detach(|| {
        let model = SlownessSquaredModel::new(g.clone(), m)?;
        let gamma = assemble_attenuation(&g, attenuation, layer_width)?.gamma(omega);
        let problem = HelmholtzProblem::with_gamma(&model, omega, gamma, true)?;
        let solver = HelmholtzSolver::new(problem, SolverOptions { method, tol, ..Default::default() })?;
        let u = solver.solve(&source_block(&g, &positions, Complex64::new(1.0, 0.0))?)?;
        Ok((0..u.ncols()).map(|j| u.column(j)).collect())
    })
    .map_err(py_err)
}

/// Reads a JSSM1 model file as `(grid, values)`.
#[pyfunction]
fn read_model(path: PathBuf) -> PyResult<(PyGrid, Vec<f64>)> {
    formats::read_model(&path).map(|(inner, v)| (PyGrid { inner }, v)).map_err(py_err)
}

#[pyfunction]
fn write_model(path: PathBuf, grid: &PyGrid, values: Vec<f64>) -> PyResult<()> {
    formats::write_model(&path, &grid.inner, &values).map_err(py_err)
}

/// Renders a JSSM1 model (or a slice of a 3D one) as a PGM image.
#[pyfunction]
#[pyo3(signature = (model, out, slice=None))]
fn render(model: PathBuf, out: PathBuf, slice: Option<usize>) -> PyResult<()> {
    cmd_render(&model, slice, &out).map_err(py_err)
}

/// A run configuration loaded from JSON.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| PyConfig { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        RunConfig::from_json(text).map(|inner| PyConfig { inner }).map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn output(&self) -> PathBuf {
        self.inner.output.clone()
    }

    #[setter]
    fn set_output(&mut self, out: PathBuf) {
        self.inner.output = out;
    }

    #[getter]
    fn grid(&self) -> PyResult<PyGrid> {
        self.inner.core_grid().map(|inner| PyGrid { inner }).map_err(py_err)
    }

    /// Truth model as slowness squared.
    fn truth_model(&self) -> PyResult<Vec<f64>> {
        self.inner.truth_model().map_err(py_err)
    }

    /// Start model as slowness squared.
    fn start_model(&self) -> PyResult<Vec<f64>> {
        self.inner.start_model().map_err(py_err)
    }

    /// Simulates data into the output directory and returns the data path.
    fn simulate(&self, py: Python<'_>) -> PyResult<PathBuf> {
        py.detach(|| cmd_simulate(&self.inner)).map_err(py_err)
    }

    /// Inverts the simulated data. Returns a dict with the final velocity
    /// model and the misfit history rows.
    #[pyo3(signature = (mode=None))]
    fn invert<'py>(&self, py: Python<'py>, mode: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
        let mut cfg = self.inner.clone();
        if let Some(m) = mode {
            cfg.mode = Some(InversionMode::parse(m).map_err(py_err)?);
        }
        let run = py.detach(|| cmd_invert(&cfg)).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("mode", run.mode.name())?;
        out.set_item("velocity", mesh::slowness_squared_to_velocity(&run.state.m))?;
        let mut rows = Vec::with_capacity(run.state.history.len());
        for r in &run.state.history {
            let d = PyDict::new(py);
            d.set_item("iter", r.iter)?;
            d.set_item("stage", r.stage)?;
            d.set_item("sweep", r.sweep)?;
            d.set_item("freq_batch", &r.freq_batch)?;
            d.set_item("phi_fwi", r.phi_fwi)?;
            d.set_item("phi_eik", r.phi_eik)?;
            d.set_item("phi_reg", r.phi_reg)?;
            d.set_item("phi_total", r.phi_total)?;
            d.set_item("step_length", r.step_length)?;
            d.set_item("active_count", r.active_count)?;
            rows.push(d);
        }
        out.set_item("history", rows)?;
        Ok(out)
    }
}

#[pymodule]
fn seistomo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(velocity_to_slowness_squared, m)?)?;
    m.add_function(wrap_pyfunction!(slowness_squared_to_velocity, m)?)?;
    m.add_function(wrap_pyfunction!(travel_time, m)?)?;
    m.add_function(wrap_pyfunction!(solve_helmholtz, m)?)?;
    m.add_function(wrap_pyfunction!(read_model, m)?)?;
    m.add_function(wrap_pyfunction!(write_model, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    Ok(())
}
