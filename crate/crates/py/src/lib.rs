use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use kschem::harness::{self, ErrorNorm, StudyOptions};
use kschem::slnn::{self, Normalizer};
use kschem::{scheme, Experiment as CoreExperiment, ExperimentName, Field, KsError, StepperKind};

fn to_py(e: KsError) -> PyErr {
    match e {
        KsError::StepFailed { .. } | KsError::NoConvergence { .. } | KsError::Io(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = KsError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

#[pyclass(module = "kschem_py", skip_from_py_object)]
#[derive(Clone)]
struct Mesh {
    inner: kschem::Mesh,
}

#[pymethods]
impl Mesh {
    #[new]
    fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, nx: usize, ny: usize) -> PyResult<Self> {
        let inner = kschem::Mesh::rect(kschem::Rect::new(x_min, x_max, y_min, y_max), nx, ny).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_cells(&self) -> usize {
        self.inner.num_cells()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn centers(&self) -> Vec<(f64, f64)> {
        (0..self.inner.num_cells())
            .map(|k| {
                let c = self.inner.center(k);
                (c[0], c[1])
            })
            .collect()
    }

    fn measures(&self) -> Vec<f64> {
        (0..self.inner.num_cells()).map(|k| self.inner.measure(k)).collect()
    }

    fn lp_norm(&self, values: Vec<f64>, p: f64) -> PyResult<f64> {
        self.inner.lp_norm(&values, p).map_err(to_py)
    }

    fn h1_seminorm(&self, values: Vec<f64>) -> PyResult<f64> {
        self.inner.h1_seminorm(&values).map_err(to_py)
    }

    /// Measure-weighted sum.
    fn integral(&self, values: Vec<f64>) -> PyResult<f64> {
        if values.len() != self.inner.num_cells() {
            return Err(PyValueError::new_err("field size does not match the mesh"));
        }
        Ok(self.inner.integral(&values))
    }

    fn __repr__(&self) -> String {
        let (nx, ny) = self.inner.shape();
        format!("Mesh({nx}x{ny})")
    }
}

#[pyclass(module = "kschem_py", get_all)]
struct RunResult {
    u_final: Vec<f64>,
    c_final: Option<Vec<f64>>,
    steps: usize,
    trainings: usize,
    wall_seconds: f64,
    mass: Vec<f64>,
    min_u: Vec<f64>,
    branches: Vec<String>,
}

#[pymethods]
impl RunResult {
    fn __repr__(&self) -> String {
        format!("RunResult(steps={}, trainings={})", self.steps, self.trainings)
    }
}

#[pyclass(module = "kschem_py", skip_from_py_object)]
#[derive(Clone)]
struct Experiment {
    inner: CoreExperiment,
}

#[pymethods]
impl Experiment {
    /// Preset by name: embryonic, growth_quadratic, volume_filling, growth_cubic.
    #[new]
    #[pyo3(signature = (name, full = false))]
    fn new(name: &str, full: bool) -> PyResult<Self> {
        let name: ExperimentName = parse(name)?;
        Ok(Self { inner: CoreExperiment::preset(name, full) })
    }

    #[staticmethod]
    #[pyo3(signature = (chi, full = false))]
    fn growth_cubic(chi: f64, full: bool) -> Self {
        Self { inner: CoreExperiment::growth_cubic(chi, full) }
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.name.as_str()
    }

    #[getter]
    fn grid(&self) -> (usize, usize) {
        (self.inner.nx, self.inner.ny)
    }

    #[setter]
    fn set_grid(&mut self, grid: (usize, usize)) {
        (self.inner.nx, self.inner.ny) = grid;
    }

    #[getter]
    fn t_final(&self) -> f64 {
        self.inner.t_final
    }

    #[setter]
    fn set_t_final(&mut self, t: f64) {
        self.inner.t_final = t;
    }

    #[getter]
    fn dts(&self) -> Vec<f64> {
        self.inner.dts.clone()
    }

    #[setter]
    fn set_dts(&mut self, dts: Vec<f64>) {
        self.inner.dts = dts;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn eps_train(&self) -> f64 {
        self.inner.train.eps_train
    }

    #[setter]
    fn set_eps_train(&mut self, eps: f64) {
        self.inner.train.eps_train = eps;
    }

    fn mesh(&self) -> PyResult<Mesh> {
        Ok(Mesh { inner: self.inner.mesh().map_err(to_py)? })
    }

    /// `(u0, c0)` from the seeded perturbation.
    fn initial_data(&self) -> PyResult<(Vec<f64>, Option<Vec<f64>>)> {
        let mesh = self.inner.mesh().map_err(to_py)?;
        let (u0, c0) = self.inner.initial_data(&mesh);
        Ok((u0.values, c0.map(|c| c.values)))
    }

    fn run(&self, py: Python<'_>, stepper: &str, dt: f64) -> PyResult<RunResult> {
        self.inner.validate().map_err(to_py)?;
        let stepper: StepperKind = parse(stepper)?;
        let exp = self.inner.clone();
        let s = py
            .detach(move || {
                let mesh = exp.mesh()?;
                exp.run(&mesh, stepper, dt, 0)
            })
            .map_err(to_py)?;
        Ok(RunResult {
            mass: s.diagnostics.iter().map(|d| d.mass).collect(),
            min_u: s.diagnostics.iter().map(|d| d.min_u).collect(),
            branches: s.diagnostics.iter().map(|d| d.branch.as_str().to_string()).collect(),
            u_final: s.u_final.values,
            c_final: s.c_final.map(|c| c.values),
            steps: s.steps,
            trainings: s.trainings,
            wall_seconds: s.wall_seconds,
        })
    }

    /// Comparison study over the experiment's dt list; one dict per row.
    #[pyo3(signature = (steppers = None, out_dir = None, cache_dir = None))]
    fn study<'py>(
        &self,
        py: Python<'py>,
        steppers: Option<Vec<String>>,
        out_dir: Option<PathBuf>,
        cache_dir: Option<PathBuf>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let steppers: Vec<StepperKind> = match steppers {
            Some(names) => names.iter().map(|s| parse(s)).collect::<PyResult<_>>()?,
            None => StepperKind::ALL.to_vec(),
        };
        let exp = self.inner.clone();
        let opts = StudyOptions { out_dir, cache_dir, ..StudyOptions::default() };
        let result = py.detach(move || harness::comparison_study(&exp, &steppers, &opts)).map_err(to_py)?;
        result
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("stepper", r.stepper.as_str())?;
                d.set_item("dt", r.dt)?;
                d.set_item("steps", r.steps)?;
                d.set_item("trainings", r.trainings)?;
                d.set_item("l2_error", r.l2_error)?;
                d.set_item("linf_error", r.linf_error)?;
                d.set_item("wall_s", r.wall_s)?;
                d.set_item("gamma_pct", r.gamma_pct)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Experiment({}, {}x{}, T={})", self.inner.name.as_str(), self.inner.nx, self.inner.ny, self.inner.t_final)
    }
}

/// Hybrid limiter `S(x)`.
#[pyfunction]
fn limiter(x: f64, d_u: f64, chi: f64, eps_s: f64) -> f64 {
    scheme::limiter_s(x, d_u, chi, eps_s)
}

#[pyfunction]
#[pyo3(signature = (mesh, u, u_ref, norm = "l2"))]
fn relative_error(mesh: &Mesh, u: Vec<f64>, u_ref: Vec<f64>, norm: &str) -> PyResult<f64> {
    let norm = match norm {
        "l2" => ErrorNorm::L2,
        "linf" => ErrorNorm::Linf,
        other => return Err(PyValueError::new_err(format!("unknown norm '{other}'"))),
    };
    harness::relative_error(&mesh.inner, &Field::density(u), &Field::density(u_ref), norm).map_err(to_py)
}

/// Least-squares slope and pairwise orders of `[(dt, error), ...]`.
#[pyfunction]
fn convergence_order(points: Vec<(f64, f64)>) -> PyResult<(f64, Vec<f64>)> {
    let fit = harness::convergence_order(&points).map_err(to_py)?;
    Ok((fit.slope, fit.pairwise))
}

/// Trains the affine predictor on `(u_nm2, u_nm1) -> u_n` from the given
/// starting weights; returns `(w0, w1, w2, mse, stop_reason)`.
#[pyfunction]
#[pyo3(signature = (u_nm2, u_nm1, u_n, w_init = (0.0, 0.0, 0.0), eps_train = 1e-3, grad_min = 1e-10))]
fn train(
    u_nm2: Vec<f64>,
    u_nm1: Vec<f64>,
    u_n: Vec<f64>,
    w_init: (f64, f64, f64),
    eps_train: f64,
    grad_min: f64,
) -> PyResult<(f64, f64, f64, f64, &'static str)> {
    let cfg = kschem::TrainConfig { eps_train, grad_min, ..Default::default() };
    let start = kschem::NetworkState::new(w_init.0, w_init.1, w_init.2, Normalizer::Identity);
    let (w, rep) = slnn::train_on_history(
        &Field::density(u_nm2),
        &Field::density(u_nm1),
        &Field::density(u_n),
        &start,
        &cfg,
    )
    .map_err(to_py)?;
    Ok((w.w0, w.w1, w.w2, rep.mse, rep.stop.as_str()))
}

#[pymodule]
fn kschem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Mesh>()?;
    m.add_class::<Experiment>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(limiter, m)?)?;
    m.add_function(wrap_pyfunction!(relative_error, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_order, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("STEPPERS", StepperKind::ALL.iter().map(|s| s.as_str()).collect::<Vec<_>>())?;
    Ok(())
}
