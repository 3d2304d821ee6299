//! Python bindings: curvature operators, cone margins, the pointwise ODE and
//! metric fields on tori with their identity checks and the flow.

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use hcflab::cones::{self, ConeSpec, MarginOptions};
use hcflab::geometry::{Geometry, MetricField as CoreMetric, MetricPreset};
use hcflab::grid::{Backend, Differentiator, TorusChart};
use hcflab::hcf::{self, PdeConfig};
use hcflab::linalg::{c, CMat};
use hcflab::ode::{self, ExperimentOptions, OdeConfig, Schedule};
use hcflab::tensor::Connection;
use hcflab::{algebra, random, CurvatureOperator as CoreOperator, Endo, Error, HermitianMetric};

type Rows = Vec<Vec<Complex64>>;
type MonitorRows = Vec<(String, f64, f64)>;

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidConfig(_)
        | Error::UnsupportedCone(_)
        | Error::InvalidGrid(_)
        | Error::DimensionMismatch { .. }
        | Error::Signature(_)
        | Error::Json(_)
        | Error::NotHermitian { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_mat(rows: &Rows) -> PyResult<CMat> {
    let r = rows.len();
    let cols = rows.first().map_or(0, Vec::len);
    if r == 0 || rows.iter().any(|row| row.len() != cols) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok(CMat::from_fn(r, cols, |i, j| rows[i][j]))
}

fn from_mat(m: &CMat) -> Rows {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn to_endo(rows: &Rows) -> PyResult<Endo> {
    let m = to_mat(rows)?;
    if m.nrows() != m.ncols() {
        return Err(PyValueError::new_err("endomorphisms must be square"));
    }
    Ok(Endo::new(m))
}

/// Round-trip through `json.loads` so results arrive as plain dicts and lists.
fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = if let Ok(s) = obj.extract::<String>() {
        s
    } else {
        py.import("json")?.call_method1("dumps", (obj,))?.extract()?
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn check_n(op: &CoreOperator, u: &Endo) -> PyResult<()> {
    if u.n() != op.n() {
        return Err(PyValueError::new_err(format!(
            "endomorphism is {0}x{0} but the operator has n = {1}",
            u.n(),
            op.n()
        )));
    }
    Ok(())
}

/// Hermitian form on `End(V)` stored as an `n^2 x n^2` matrix, with its attached metric.
#[pyclass(name = "CurvatureOperator", module = "hcflab", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyOperator(CoreOperator);

#[pymethods]
impl PyOperator {
    #[new]
    #[pyo3(signature = (h, metric=None))]
    fn new(h: Rows, metric: Option<Rows>) -> PyResult<Self> {
        let h = to_mat(&h)?;
        let n = (h.nrows() as f64).sqrt().round() as usize;
        let g = match metric {
            Some(g) => HermitianMetric::new(to_mat(&g)?).map_err(err)?,
            None => HermitianMetric::identity(n),
        };
        Ok(Self(CoreOperator::new(h, g).map_err(err)?))
    }

    #[staticmethod]
    fn zeros(n: usize) -> Self {
        Self(CoreOperator::zeros(n))
    }

    /// The identity of `End(V)` as a form.
    #[staticmethod]
    fn identity(n: usize) -> Self {
        Self(CoreOperator::identity(n))
    }

    #[staticmethod]
    fn id_tensor_id(n: usize) -> Self {
        Self(CoreOperator::id_tensor_id(n))
    }

    #[staticmethod]
    #[pyo3(signature = (n, seed=0, psd=false))]
    fn random(n: usize, seed: u64, psd: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self(if psd { random::random_psd_operator(&mut rng, n) } else { random::random_operator(&mut rng, n) })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Self).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    fn matrix(&self) -> Rows {
        from_mat(self.0.matrix())
    }

    fn metric(&self) -> Rows {
        from_mat(self.0.metric().matrix())
    }

    fn norm(&self) -> f64 {
        self.0.norm()
    }

    fn eigenvalues(&self) -> PyResult<Vec<f64>> {
        Ok(self.0.eigen().map_err(err)?.values.as_slice().to_vec())
    }

    /// `Omega - t Id`.
    fn shift(&self, t: f64) -> Self {
        Self(self.0.shift(t))
    }

    fn scale(&self, s: f64) -> Self {
        Self(self.0.scale(s))
    }

    fn __add__(&self, other: &Self) -> PyResult<Self> {
        self.0.add(&other.0).map(Self).map_err(err)
    }

    fn __sub__(&self, other: &Self) -> PyResult<Self> {
        self.0.sub(&other.0).map(Self).map_err(err)
    }

    /// `<Omega, u (x) ubar>`.
    fn evaluate(&self, u: Rows) -> PyResult<f64> {
        let u = to_endo(&u)?;
        check_n(&self.0, &u)?;
        algebra::evaluate(&self.0, &u).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("CurvatureOperator(n={}, norm={:.6e})", self.0.n(), self.0.norm())
    }
}

/// `Omega^2` by coordinate contraction with the attached metric.
#[pyfunction]
fn square(op: &PyOperator) -> PyResult<PyOperator> {
    algebra::square_coord(&op.0, op.0.metric()).map(PyOperator).map_err(err)
}

/// `Omega^2` through the eigendecomposition of the associated self-adjoint map.
#[pyfunction]
fn square_spectral(op: &PyOperator) -> PyResult<PyOperator> {
    algebra::square_spectral(&op.0, op.0.metric()).map(PyOperator).map_err(err)
}

#[pyfunction]
fn sharp(p: &PyOperator, q: &PyOperator) -> PyResult<PyOperator> {
    algebra::sharp(&p.0, &q.0).map(PyOperator).map_err(err)
}

#[pyfunction]
fn sharp_square(op: &PyOperator) -> PyResult<PyOperator> {
    algebra::sharp_square(&op.0).map(PyOperator).map_err(err)
}

#[pyfunction]
fn ad_action(v: Rows, op: &PyOperator) -> PyResult<PyOperator> {
    let v = to_endo(&v)?;
    check_n(&op.0, &v)?;
    algebra::ad_action(&v, &op.0).map(PyOperator).map_err(err)
}

/// `sum_k a_k (x) conj(a_k)`.
#[pyfunction]
fn gram(n: usize, a: Vec<Rows>) -> PyResult<PyOperator> {
    let a: Vec<Endo> = a.iter().map(to_endo).collect::<PyResult<_>>()?;
    if a.iter().any(|x| x.n() != n) {
        return Err(PyValueError::new_err(format!("all endomorphisms must be {n}x{n}")));
    }
    Ok(PyOperator(algebra::gram(n, &a)))
}

/// Right-hand side of the pointwise ODE, `Omega^2 + Omega^# + ad_v Omega + A A*`.
#[pyfunction]
#[pyo3(signature = (op, v=None, a=Vec::new()))]
fn phi(op: &PyOperator, v: Option<Rows>, a: Vec<Rows>) -> PyResult<PyOperator> {
    let n = op.0.n();
    let v = v.map(|v| to_endo(&v)).transpose()?.unwrap_or_else(|| Endo::zeros(n));
    let a: Vec<Endo> = a.iter().map(to_endo).collect::<PyResult<_>>()?;
    ode::phi_rhs(&op.0, &v, &a).map(PyOperator).map_err(err)
}

/// A positivity cone `C(S, F)`.
#[pyclass(name = "Cone", module = "hcflab", frozen, from_py_object)]
#[derive(Clone)]
struct PyCone(ConeSpec);

#[pymethods]
impl PyCone {
    #[staticmethod]
    fn griffiths() -> Self {
        Self(ConeSpec::griffiths())
    }

    #[staticmethod]
    fn dual_nakano() -> Self {
        Self(ConeSpec::dual_nakano())
    }

    #[staticmethod]
    fn orthogonal_bisectional() -> Self {
        Self(ConeSpec::orthogonal_bisectional())
    }

    #[staticmethod]
    fn dual_m(m: usize) -> Self {
        Self(ConeSpec::dual_m(m))
    }

    /// Lower bound `q` on `<Omega, Id (x) Id>`.
    #[staticmethod]
    fn identity(q: f64) -> Self {
        Self(ConeSpec::identity(q))
    }

    /// From a dict or JSON string such as `{"s": "rank_one", "f": {"kind": "zero"}}`.
    #[staticmethod]
    fn from_spec(py: Python<'_>, spec: &Bound<'_, PyAny>) -> PyResult<Self> {
        from_py(py, spec).map(Self)
    }

    #[getter]
    fn label(&self) -> String {
        self.0.label()
    }

    /// Worst value of `<Omega, u ubar> - F(u)` over the family; `margin >= 0` means membership.
    #[pyo3(signature = (op, restarts=32, seed=0x5eed))]
    fn margin(&self, py: Python<'_>, op: &PyOperator, restarts: usize, seed: u64) -> PyResult<Py<PyAny>> {
        let opts = MarginOptions { restarts, seed, ..MarginOptions::default() };
        let rep = cones::margin(&op.0, &self.0, &opts).map_err(err)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("margin", rep.margin)?;
        d.set_item("minimizer", from_mat(rep.minimizer.matrix()))?;
        d.set_item("certified", rep.certified)?;
        d.set_item("converged", rep.converged)?;
        Ok(d.into_any().unbind())
    }

    /// An operator on the boundary of the cone and its minimizing endomorphism.
    #[pyo3(signature = (n, seed=0, scale=1.0))]
    fn boundary_sample(&self, n: usize, seed: u64, scale: f64) -> PyResult<(PyOperator, Rows)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (op, u) = cones::boundary_sample(&self.0, n, &mut rng, scale, &MarginOptions::default()).map_err(err)?;
        Ok((PyOperator(op), from_mat(u.matrix())))
    }

    fn __repr__(&self) -> String {
        format!("Cone({})", self.0.label())
    }
}

/// Integrate the pointwise ODE with RK4; returns times, states and per-cone margins.
#[pyfunction]
#[pyo3(signature = (op, t_end, dt=None, cones=Vec::new(), v=None, a=Vec::new()))]
fn integrate(
    py: Python<'_>,
    op: &PyOperator,
    t_end: f64,
    dt: Option<f64>,
    cones: Vec<PyCone>,
    v: Option<Rows>,
    a: Vec<Rows>,
) -> PyResult<Py<PyAny>> {
    let mut cfg = OdeConfig::new(op.0.n(), t_end);
    cfg.dt = dt;
    cfg.cones = cones.into_iter().map(|c| c.0).collect();
    if let Some(v) = v {
        cfg.v = Schedule::Constant(to_endo(&v)?);
    }
    cfg.a = Schedule::Constant(a.iter().map(to_endo).collect::<PyResult<_>>()?);
    let traj = py.detach(|| ode::integrate(&op.0, &cfg)).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("times", traj.times)?;
    d.set_item("states", traj.states.into_iter().map(PyOperator).collect::<Vec<_>>())?;
    d.set_item("margins", traj.margins)?;
    d.set_item("blew_up", traj.blew_up)?;
    Ok(d.into_any().unbind())
}

/// Sampled cone-invariance experiment with random drivers.
#[pyfunction]
#[pyo3(signature = (cone, n=2, t_end=0.05, samples=50, seed=0))]
fn invariance_experiment(
    py: Python<'_>,
    cone: &PyCone,
    n: usize,
    t_end: f64,
    samples: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let mut cfg = OdeConfig::new(n, t_end);
    cfg.cones = vec![cone.0.clone()];
    let opts = ExperimentOptions { samples, ..ExperimentOptions::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rep = py.detach(|| ode::invariance_experiment(&cone.0, n, &cfg, &opts, &mut rng)).map_err(err)?;
    to_py(py, &rep)
}

/// Hermitian metric sampled on a periodic grid over a complex torus.
#[pyclass(name = "MetricField", module = "hcflab", frozen)]
struct PyMetric {
    metric: CoreMetric,
    backend: Backend,
}

impl PyMetric {
    fn diff(&self) -> Differentiator {
        Differentiator::new(self.metric.chart(), self.backend)
    }
}

#[pymethods]
impl PyMetric {
    /// `preset` is a dict or JSON string such as `{"preset": "nonkahler_sin", "amplitude": 0.3}`;
    /// `grid` lists points per real axis ordered `x_1, y_1, x_2, y_2, ...`.
    #[staticmethod]
    #[pyo3(signature = (n, grid, preset, period=1.0, backend="spectral"))]
    fn preset(
        py: Python<'_>,
        n: usize,
        grid: Vec<usize>,
        preset: &Bound<'_, PyAny>,
        period: f64,
        backend: &str,
    ) -> PyResult<Self> {
        let preset: MetricPreset = from_py(py, preset)?;
        let backend: Backend = serde_json::from_value(serde_json::Value::String(backend.into()))
            .map_err(|_| PyValueError::new_err(format!("unknown backend `{backend}`")))?;
        let chart = TorusChart::new(n, vec![period; 2 * n], grid).map_err(err)?;
        let metric = CoreMetric::preset(&chart, &preset).map_err(err)?;
        Ok(Self { metric, backend })
    }

    #[staticmethod]
    #[pyo3(signature = (text, backend="spectral"))]
    fn from_json(text: &str, backend: &str) -> PyResult<Self> {
        let backend: Backend = serde_json::from_value(serde_json::Value::String(backend.into()))
            .map_err(|_| PyValueError::new_err(format!("unknown backend `{backend}`")))?;
        Ok(Self { metric: CoreMetric::from_json(text).map_err(err)?, backend })
    }

    fn to_json(&self) -> PyResult<String> {
        self.metric.to_json().map_err(err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.metric.n()
    }

    #[getter]
    fn grid(&self) -> Vec<usize> {
        self.metric.chart().grid().to_vec()
    }

    fn __len__(&self) -> usize {
        self.metric.chart().len()
    }

    fn matrix_at(&self, p: usize) -> PyResult<Rows> {
        if p >= self.metric.chart().len() {
            return Err(PyValueError::new_err("grid index out of range"));
        }
        Ok(from_mat(&self.metric.matrix_at(p)))
    }

    fn min_eigenvalue(&self) -> PyResult<f64> {
        self.metric.min_eigenvalue().map_err(err)
    }

    /// Chern curvature at grid point `p` as a curvature operator.
    fn curvature_at(&self, p: usize) -> PyResult<PyOperator> {
        if p >= self.metric.chart().len() {
            return Err(PyValueError::new_err("grid index out of range"));
        }
        let d = self.diff();
        let geom = Geometry::new(&self.metric, &d).map_err(err)?;
        geom.operator_at(p).map(PyOperator).map_err(err)
    }

    /// Residuals of the Bianchi, trace and Lee-form identities plus torsion and curvature sizes.
    fn identities(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let d = self.diff();
        let out = py.detach(|| -> hcflab::Result<serde_json::Value> {
            let geom = Geometry::new(&self.metric, &d)?;
            let ricci = geom.ricci();
            let trace = |s: &[Vec<Complex64>], t: &[f64]| {
                geom.trace(s).iter().zip(t).map(|(x, y)| (x - c(*y, 0.0)).norm()).fold(0.0, f64::max)
            };
            let sc = trace(&ricci.s1, &ricci.sc).max(trace(&ricci.s2, &ricci.sc));
            let shat = trace(&ricci.s3, &ricci.shat).max(trace(&ricci.s4, &ricci.shat));
            let lee = geom.lee_rho(&ricci)?;
            Ok(serde_json::json!({
                "bianchi": geom.bianchi_residuals()?,
                "trace_sc": sc,
                "trace_shat": shat,
                "lee_rho": lee.residual,
                "d_rho": lee.d_rho,
                "chern_metric_compatibility": geom.metric_compatibility_defect(Connection::Chern)?,
                "torsion_sup": geom.torsion_sup(),
                "curvature_sup": geom.curvature_sup(),
                "shat_min": ricci.shat.iter().cloned().fold(f64::INFINITY, f64::min),
            }))
        });
        to_py(py, &out.map_err(err)?)
    }

    /// Largest stable time step for the flow with constant `cfl`.
    #[pyo3(signature = (cfl=0.2))]
    fn stability_cap(&self, cfl: f64) -> PyResult<f64> {
        let d = self.diff();
        let geom = Geometry::new(&self.metric, &d).map_err(err)?;
        hcf::stability_cap(&geom, &self.metric, cfl).map_err(err)
    }

    /// Centered-difference error of the curvature evolution equation at time step `dt`.
    fn consistency_error(&self, py: Python<'_>, dt: f64) -> PyResult<f64> {
        let d = self.diff();
        py.detach(|| hcf::consistency_error(&self.metric, &d, dt)).map_err(err)
    }

    /// Run the flow; `config` uses the same keys as the `flow` section of a `pde-run` config.
    /// Returns the monitor rows `(monitor, t, value)` and the final metric.
    #[pyo3(signature = (config=None))]
    fn evolve(&self, py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<(MonitorRows, Option<PyMetric>)> {
        let cfg: PdeConfig = match config {
            Some(c) => from_py(py, c)?,
            None => PdeConfig::default(),
        };
        let d = self.diff();
        let rec = py.detach(|| hcf::evolve(&self.metric, &d, &cfg)).map_err(err)?;
        let last = rec.snapshots.last().map(|(_, m)| PyMetric { metric: m.clone(), backend: self.backend });
        Ok((rec.rows(), last))
    }

    fn __repr__(&self) -> String {
        format!("MetricField(n={}, grid={:?})", self.metric.n(), self.metric.chart().grid())
    }
}

#[pymodule(name = "hcflab")]
fn hcflab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyOperator>()?;
    m.add_class::<PyCone>()?;
    m.add_class::<PyMetric>()?;
    m.add_function(wrap_pyfunction!(square, m)?)?;
    m.add_function(wrap_pyfunction!(square_spectral, m)?)?;
    m.add_function(wrap_pyfunction!(sharp, m)?)?;
    m.add_function(wrap_pyfunction!(sharp_square, m)?)?;
    m.add_function(wrap_pyfunction!(ad_action, m)?)?;
    m.add_function(wrap_pyfunction!(gram, m)?)?;
    m.add_function(wrap_pyfunction!(phi, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(invariance_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
