//! Python bindings for `fraclap`.
//!
//! Vectors cross the boundary as lists of floats, matrices as lists of rows.

use std::path::PathBuf;
use std::sync::Arc;

use fraclap::cli::{self, RunOptions};
use fraclap::dirichlet::{self, DirichletProblem, IterSpec, Route};
use fraclap::energy::{self, FracEnergyForm};
use fraclap::extension;
use fraclap::quadrature::QuadratureSpec;
use fraclap::space::{Fixture, Space};
use fraclap::spectral::{self, SpectralDecomposition, DEFAULT_EIGENTOLERANCE};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Finite metric measure space with conductances.
#[pyclass(name = "Space", module = "pyfraclap", frozen)]
struct PySpace {
    inner: Space,
}

#[pymethods]
impl PySpace {
    #[new]
    fn new(dist: Vec<Vec<f64>>, mu: Vec<f64>, cond: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = Space::new(matrix(&dist)?, DVector::from_vec(mu), matrix(&cond)?).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// `Space.fixture("grid2d", rows=4, cols=4)`; kinds are path, grid2d,
    /// dumbbell and random_geometric.
    #[staticmethod]
    #[pyo3(signature = (kind, **params))]
    fn fixture(kind: &str, params: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut map = serde_json::Map::new();
        if let Some(d) = params {
            for (k, v) in d.iter() {
                let key: String = k.extract()?;
                let val = if let Ok(i) = v.extract::<u64>() {
                    serde_json::Value::from(i)
                } else {
                    serde_json::Value::from(v.extract::<f64>()?)
                };
                map.insert(key, val);
            }
        }
        let fx: Fixture = serde_json::from_value(serde_json::json!({ "kind": kind, "params": map }))
            .map_err(value_err)?;
        Ok(Self {
            inner: fx.build().map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(text).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn dist(&self) -> Vec<Vec<f64>> {
        rows(self.inner.dist())
    }

    #[getter]
    fn mu(&self) -> Vec<f64> {
        vec(self.inner.mu())
    }

    #[getter]
    fn cond(&self) -> Vec<Vec<f64>> {
        rows(self.inner.cond())
    }

    fn diameter(&self) -> f64 {
        self.inner.diameter()
    }

    fn degree(&self, x: usize) -> PyResult<f64> {
        self.check_vertex(x)?;
        Ok(self.inner.degree(x))
    }

    /// Measure of the closed ball `B(x, r)`.
    fn ball_measure(&self, x: usize, r: f64) -> PyResult<f64> {
        self.check_vertex(x)?;
        Ok(self.inner.ball_measure(x, r))
    }

    fn dirichlet_form(&self, f: Vec<f64>, g: Vec<f64>) -> PyResult<f64> {
        let n = self.inner.n();
        if f.len() != n || g.len() != n {
            return Err(PyValueError::new_err(format!("vectors must have length {n}")));
        }
        Ok(self.inner.dirichlet_form(&f, &g))
    }

    fn heat_kernel(&self, t: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&spectral::heat_kernel(&self.inner, t).map_err(value_err)?.entries))
    }

    fn besov_energy(&self, theta: f64, f: Vec<f64>) -> PyResult<f64> {
        energy::besov_energy(&self.inner, theta, &f).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Space(n={})", self.inner.n())
    }
}

impl PySpace {
    fn check_vertex(&self, x: usize) -> PyResult<()> {
        if x >= self.inner.n() {
            return Err(PyValueError::new_err(format!("vertex {x} out of range")));
        }
        Ok(())
    }
}

/// Eigenpairs of the Laplacian, orthonormal in `L^2(mu)`.
#[pyclass(name = "SpectralDecomposition", module = "pyfraclap", frozen)]
struct PySpectral {
    inner: Arc<SpectralDecomposition>,
    space: Space,
}

#[pymethods]
impl PySpectral {
    #[new]
    #[pyo3(signature = (space, eigentolerance = DEFAULT_EIGENTOLERANCE))]
    fn new(space: &PySpace, eigentolerance: f64) -> PyResult<Self> {
        let dec = SpectralDecomposition::new(&space.inner, eigentolerance).map_err(value_err)?;
        Ok(Self {
            inner: Arc::new(dec),
            space: space.inner.clone(),
        })
    }

    #[getter]
    fn lambdas(&self) -> Vec<f64> {
        vec(self.inner.lambdas())
    }

    /// Eigenvectors as columns.
    #[getter]
    fn phis(&self) -> Vec<Vec<f64>> {
        rows(self.inner.phis())
    }

    fn frac_apply(&self, theta: f64, f: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(vec(&self.inner.frac_apply(theta, &f).map_err(value_err)?))
    }

    fn frac_energy(&self, theta: f64, f: Vec<f64>) -> PyResult<f64> {
        energy::frac_energy(&self.inner, theta, &f).map_err(value_err)
    }

    fn frac_stiffness(&self, theta: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&FracEnergyForm::new(&self.inner, theta).map_err(value_err)?.stiffness))
    }

    fn frac_heat_kernel(&self, theta: f64, t: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.frac_heat_kernel(theta, t).map_err(value_err)?.entries))
    }

    /// Exact `(lower, upper)` of `besov_energy / frac_energy` off constants.
    fn comparability_bounds(&self, theta: f64) -> PyResult<(f64, f64)> {
        let b = energy::comparability_bounds(&self.space, &self.inner, theta).map_err(value_err)?;
        Ok((b.lower, b.upper))
    }

    /// Heights and extension values of `f`, one row per vertex and one
    /// column per height.
    #[pyo3(signature = (theta, f, cells = 64))]
    fn poisson_extend(&self, theta: f64, f: Vec<f64>, cells: usize) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let grid = extension::HalfSpaceGrid::new(
            theta,
            extension::default_ymax(&self.inner),
            cells,
            extension::GridLayout::geometric(),
        )
        .map_err(value_err)?;
        let field = extension::poisson_extend(&self.inner, theta, &f, &grid, &QuadratureSpec::default())
            .map_err(value_err)?;
        Ok((grid.ys().to_vec(), rows(&field.values)))
    }
}

/// Weighted energy of the normalized extension profile of one mode.
#[pyfunction]
fn mode_energy(lambda: f64, theta: f64) -> PyResult<f64> {
    let rel = |tol| QuadratureSpec {
        abs_tol: 0.0,
        rel_tol: tol,
        max_intervals: 5000,
    };
    extension::mode_energy(lambda, theta, &rel(1e-10), &rel(1e-13)).map_err(value_err)
}

/// `2^{2 theta - 1} Gamma(theta) / Gamma(1 - theta)`.
#[pyfunction]
fn dtn_constant(theta: f64) -> f64 {
    extension::dtn_constant(theta)
}

type ModulusTuple = (f64, f64, Vec<(usize, f64)>);

/// Returns `(limit, exact, levels)` for the flat cylinder over `subset`.
#[pyfunction]
fn vertical_modulus(space: &PySpace, subset: Vec<usize>, h: f64, theta: f64) -> PyResult<ModulusTuple> {
    let m = extension::vertical_modulus_limit(&space.inner, &subset, h, theta).map_err(value_err)?;
    Ok((m.limit, m.exact, m.levels))
}

#[pyclass(name = "Solution", module = "pyfraclap", frozen, get_all)]
struct PySolution {
    route: String,
    theta: f64,
    omega: Vec<bool>,
    u: Vec<f64>,
    energy: f64,
    residual: f64,
    scaled_residual: f64,
    iterations: usize,
}

impl From<dirichlet::Solution> for PySolution {
    fn from(s: dirichlet::Solution) -> Self {
        let route = match s.route {
            Route::Spectral => "spectral",
            Route::Extension => "extension",
        };
        Self {
            route: route.into(),
            theta: s.theta,
            omega: s.omega,
            u: s.u,
            energy: s.energy,
            residual: s.residual,
            scaled_residual: s.scaled_residual,
            iterations: s.iterations,
        }
    }
}

#[pymethods]
impl PySolution {
    fn __repr__(&self) -> String {
        format!(
            "Solution(route={}, theta={}, energy={:.6e}, residual={:.1e})",
            self.route, self.theta, self.energy, self.residual
        )
    }
}

/// Fractional Dirichlet problem: `u = f` off `omega`, harmonic on `omega`.
#[pyclass(name = "DirichletProblem", module = "pyfraclap", frozen)]
struct PyProblem {
    inner: DirichletProblem,
}

impl PyProblem {
    fn rebuild(&self, sol: &PySolution) -> dirichlet::Solution {
        dirichlet::Solution {
            route: if sol.route == "spectral" {
                Route::Spectral
            } else {
                Route::Extension
            },
            theta: sol.theta,
            omega: sol.omega.clone(),
            u: sol.u.clone(),
            energy: sol.energy,
            residual: sol.residual,
            scaled_residual: sol.scaled_residual,
            iterations: sol.iterations,
        }
    }
}

#[pymethods]
impl PyProblem {
    #[new]
    fn new(space: &PySpace, theta: f64, omega: Vec<bool>, f: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: DirichletProblem::new(space.inner.clone(), theta, omega, f).map_err(value_err)?,
        })
    }

    #[getter]
    fn interior(&self) -> Vec<usize> {
        self.inner.interior()
    }

    #[getter]
    fn exterior(&self) -> Vec<usize> {
        self.inner.exterior()
    }

    fn solve_spectral(&self) -> PyResult<PySolution> {
        Ok(dirichlet::solve_spectral(&self.inner).map_err(value_err)?.into())
    }

    #[pyo3(signature = (cells = dirichlet::DEFAULT_EXTENSION_CELLS, rel_tol = 1e-12, max_iter = 20000))]
    fn solve_extension(&self, py: Python<'_>, cells: usize, rel_tol: f64, max_iter: usize) -> PyResult<PySolution> {
        let grid = dirichlet::default_extension_grid(&self.inner, cells).map_err(value_err)?;
        let spec = IterSpec { rel_tol, max_iter };
        let sol = py
            .detach(|| dirichlet::solve_extension(&self.inner, &grid, &spec))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(sol.into())
    }

    /// `(holds, inside_min, inside_max, data_min, data_max)`.
    fn maximum_principle(&self, solution: &PySolution) -> (bool, f64, f64, f64, f64) {
        let r = dirichlet::maximum_principle_check(&self.rebuild(solution), &self.inner);
        (r.holds, r.inside_min, r.inside_max, r.data_min, r.data_max)
    }

    /// Number of random feasible competitors with lower energy than `solution`.
    #[pyo3(signature = (solution, count = 100, seed = 0))]
    fn competitor_violations(&self, solution: &PySolution, count: usize, seed: u64) -> usize {
        dirichlet::competitor_check(&self.rebuild(solution), &self.inner, count, seed).violations
    }
}

/// Runs an experiment config (JSON text) and returns the report as JSON text.
#[pyfunction]
#[pyo3(signature = (config, out, threads = None, seed = None))]
fn run_config(py: Python<'_>, config: &str, out: PathBuf, threads: Option<usize>, seed: Option<u64>) -> PyResult<String> {
    let cfg = cli::parse_config(config).map_err(value_err)?;
    let opts = RunOptions {
        out: Some(out),
        threads,
        seed,
    };
    let report = py
        .detach(|| cli::run(&cfg, &opts))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    serde_json::to_string_pretty(&report).map_err(value_err)
}

#[pyfunction]
fn default_config() -> String {
    cli::ExperimentConfig::default_suite().to_json_pretty()
}

#[pymodule]
fn pyfraclap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpace>()?;
    m.add_class::<PySpectral>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PySolution>()?;
    m.add_function(wrap_pyfunction!(mode_energy, m)?)?;
    m.add_function(wrap_pyfunction!(dtn_constant, m)?)?;
    m.add_function(wrap_pyfunction!(vertical_modulus, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
