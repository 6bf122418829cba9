//! Python module `pcaplab`: bodies, exterior solves, capacities, concavity
//! numbers, Brunn-Minkowski deficits and whole scenario runs.

use std::sync::{Arc, OnceLock};

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pcaplab::brunn_minkowski::bm_deficit as core_bm_deficit;
use pcaplab::capacity::{capacity_asymptotic, capacity_ball_exact as core_ball_exact, capacity_energy};
use pcaplab::concavity::{concavity_report, ConcavitySettings};
use pcaplab::geometry::{self, ConvexBody, DirectionGrid};
use pcaplab::lab::{self, ExperimentConfig};
use pcaplab::model::ProblemParams;
use pcaplab::pde_solver::{solve_exterior, BodyGridSettings, FarfieldMode, SolveReport, SolverConfig};

create_exception!(pcaplab, PcaplabError, PyException);

fn err(e: pcaplab::Error) -> PyErr {
    PcaplabError::new_err(e.to_string())
}

fn dirs_for(n: usize) -> PyResult<Arc<DirectionGrid>> {
    static PLANE: OnceLock<Arc<DirectionGrid>> = OnceLock::new();
    static SPACE: OnceLock<Arc<DirectionGrid>> = OnceLock::new();
    let cell = match n {
        2 => &PLANE,
        3 => &SPACE,
        _ => return Err(PcaplabError::new_err(format!("dimension {n} is not supported (use 2 or 3)"))),
    };
    if let Some(d) = cell.get() {
        return Ok(d.clone());
    }
    let grid = Arc::new(DirectionGrid::default_for_dim(n).map_err(err)?);
    Ok(cell.get_or_init(|| grid).clone())
}

/// Dimension `n` and exponent `p` with `1 < p < n`.
#[pyclass(name = "Params", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyParams {
    inner: ProblemParams,
}

#[pymethods]
impl PyParams {
    #[new]
    fn new(n: usize, p: f64) -> PyResult<Self> {
        Ok(Self { inner: ProblemParams::new(n, p).map_err(err)? })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> f64 {
        self.inner.p()
    }

    #[getter]
    fn q_rad(&self) -> f64 {
        self.inner.q_rad()
    }

    #[getter]
    fn alpha_star(&self) -> f64 {
        self.inner.alpha_star()
    }

    /// Capacity of the unit ball.
    #[getter]
    fn c_np(&self) -> f64 {
        self.inner.constants().c_np
    }

    fn __repr__(&self) -> String {
        format!("Params(n={}, p={})", self.inner.n(), self.inner.p())
    }
}

/// Convex body sampled by its support function.
#[pyclass(name = "Body", frozen, from_py_object)]
#[derive(Clone)]
struct PyBody {
    inner: ConvexBody,
}

#[pymethods]
impl PyBody {
    #[staticmethod]
    fn ball(center: Vec<f64>, r: f64) -> PyResult<Self> {
        let dirs = dirs_for(center.len())?;
        Ok(Self { inner: geometry::make_ball(&center, r, &dirs).map_err(err)? })
    }

    #[staticmethod]
    fn polygon(vertices: Vec<[f64; 2]>) -> PyResult<Self> {
        Ok(Self { inner: geometry::make_polygon(&vertices, &dirs_for(2)?).map_err(err)? })
    }

    #[staticmethod]
    fn ellipse(center: [f64; 2], semi_axes: [f64; 2]) -> PyResult<Self> {
        Ok(Self { inner: geometry::make_ellipse(center, semi_axes, &dirs_for(2)?).map_err(err)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Support values on the direction grid.
    fn support(&self) -> Vec<f64> {
        self.inner.support().to_vec()
    }

    fn directions(&self) -> Vec<Vec<f64>> {
        self.inner.dirs().iter().map(|d| d.to_vec()).collect()
    }

    fn diameter(&self) -> f64 {
        self.inner.diameter()
    }

    fn contains(&self, x: Vec<f64>) -> bool {
        geometry::contains(&self.inner, &x)
    }

    /// `rho * self + xi`.
    fn scaled(&self, rho: f64, xi: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: geometry::scale_translate(&self.inner, rho, &xi).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("Body(dim={}, diameter={:.6})", self.inner.dim(), self.inner.diameter())
    }
}

/// `(1 - lam) a + lam b`.
#[pyfunction]
fn minkowski_combination(a: &PyBody, b: &PyBody, lam: f64) -> PyResult<PyBody> {
    Ok(PyBody { inner: geometry::minkowski_combination(&a.inner, &b.inner, lam).map_err(err)? })
}

/// Best `(rho, xi)` with `b ≈ rho a + xi`; returns `(rho, xi, relative_residual)`.
#[pyfunction]
fn homothety_fit(a: &PyBody, b: &PyBody) -> PyResult<(f64, Vec<f64>, f64)> {
    let fit = geometry::homothety_fit(&a.inner, &b.inner).map_err(err)?;
    Ok((fit.rho, fit.xi.clone(), fit.relative_residual()))
}

#[pyfunction]
fn capacity_ball_exact(r: f64, params: &PyParams) -> PyResult<f64> {
    Ok(core_ball_exact(r, &params.inner).map_err(err)?.value)
}

/// Capacitary potential of a body.
#[pyclass(name = "Solution", frozen)]
struct PySolution {
    report: SolveReport,
}

#[pymethods]
impl PySolution {
    #[getter]
    fn energy(&self) -> f64 {
        self.report.total_energy()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.report.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.report.iterations
    }

    #[getter]
    fn spacing(&self) -> f64 {
        self.report.spacing()
    }

    #[getter]
    fn farfield_coeff(&self) -> f64 {
        self.report.farfield_coeff
    }

    /// Interpolated potential; `None` outside the box.
    fn value_at(&self, x: Vec<f64>) -> Option<f64> {
        self.report.field.interpolate(&x)
    }

    /// Capacity by `"energy"` or `"asymptotic"`.
    #[pyo3(signature = (method = "energy"))]
    fn capacity(&self, method: &str) -> PyResult<f64> {
        let est = match method {
            "energy" => capacity_energy(&self.report),
            "asymptotic" => capacity_asymptotic(&self.report),
            other => return Err(PcaplabError::new_err(format!("unknown capacity method `{other}`"))),
        };
        Ok(est.map_err(err)?.value)
    }

    /// Superlevel set `{u >= t}` (planar grids only).
    fn level_set(&self, t: f64) -> PyResult<PyBody> {
        let dirs = dirs_for(self.report.field.dim())?;
        Ok(PyBody { inner: geometry::level_set_extract(&self.report.field, t, &dirs).map_err(err)? })
    }

    /// Concavity numbers `(alpha_pointwise, alpha_support)` and the worst
    /// midpoint violation at the optimal exponent.
    #[pyo3(signature = (seed = 0))]
    fn concavity<'py>(&self, py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let dirs = dirs_for(self.report.field.dim())?;
        let settings = ConcavitySettings::new(dirs, self.report.params.alpha_star(), seed);
        let field = &self.report.field;
        let rep = py.detach(|| concavity_report(field, &settings)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("alpha_pointwise", rep.alpha_pointwise)?;
        d.set_item("alpha_support", rep.alpha_support)?;
        d.set_item("midpoint_violation", rep.worst_violation.max_violation())?;
        d.set_item("midpoint_passes", rep.worst_violation.passes())?;
        Ok(d)
    }
}

fn solver_config(params: &PyParams, body: &ConvexBody, cells: usize, half_width: f64, farfield: &str) -> PyResult<SolverConfig> {
    let mut cfg = SolverConfig::for_body(params.inner, body, half_width, cells).map_err(err)?;
    cfg.farfield_mode = match farfield {
        "asymptotic" => FarfieldMode::AsymptoticDirichlet,
        "zero" => FarfieldMode::ZeroDirichlet,
        other => return Err(PcaplabError::new_err(format!("unknown far-field mode `{other}` (asymptotic or zero)"))),
    };
    Ok(cfg)
}

/// Solves the exterior problem on a cube around the body.
#[pyfunction]
#[pyo3(signature = (body, params, cells = 256, half_width = 8.0, farfield = "asymptotic"))]
fn solve(py: Python<'_>, body: &PyBody, params: &PyParams, cells: usize, half_width: f64, farfield: &str) -> PyResult<PySolution> {
    let cfg = solver_config(params, &body.inner, cells, half_width, farfield)?;
    let b = &body.inner;
    let report = py.detach(|| solve_exterior(b, &cfg)).map_err(err)?;
    Ok(PySolution { report })
}

/// Brunn-Minkowski deficit of capacity at weight `lam`.
#[pyfunction]
#[pyo3(signature = (k1, k2, lam, params, cells = 256, half_width = 8.0))]
fn bm_deficit<'py>(
    py: Python<'py>,
    k1: &PyBody,
    k2: &PyBody,
    lam: f64,
    params: &PyParams,
    cells: usize,
    half_width: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let settings = BodyGridSettings::new(solver_config(params, &k1.inner, cells, half_width, "asymptotic")?, half_width);
    let (a, b) = (&k1.inner, &k2.inner);
    let rep = py.detach(|| core_bm_deficit(a, b, lam, &settings)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("lambda", rep.lambda)?;
    d.set_item("lhs", rep.lhs)?;
    d.set_item("rhs", rep.rhs)?;
    d.set_item("deficit", rep.deficit)?;
    d.set_item("tolerance", rep.tolerance)?;
    d.set_item("homothety_residual", rep.homothety.relative_residual())?;
    Ok(d)
}

/// Runs a scenario from config JSON text; returns `(verdict, report_json)`.
#[pyfunction]
#[pyo3(signature = (config_json, workers = 1))]
fn run_config(py: Python<'_>, config_json: &str, workers: usize) -> PyResult<(String, String)> {
    let cfg = ExperimentConfig::from_json_str(config_json, "<config>").map_err(err)?;
    let out = py.detach(|| lab::run_with_workers(&cfg, workers)).map_err(err)?;
    Ok((out.report.verdict.as_str().to_string(), out.report.to_json()))
}

#[pymodule]
#[pyo3(name = "pcaplab")]
fn pcaplab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PcaplabError", m.py().get_type::<PcaplabError>())?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyBody>()?;
    m.add_class::<PySolution>()?;
    m.add_function(wrap_pyfunction!(minkowski_combination, m)?)?;
    m.add_function(wrap_pyfunction!(homothety_fit, m)?)?;
    m.add_function(wrap_pyfunction!(capacity_ball_exact, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(bm_deficit, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
