//! Python bindings: systems, solvers, Markov reward processes, the value
//! estimators' fixed points and the experiment runner.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use scaleinv::experiments::{self, ExperimentConfig, ExperimentKind};
use scaleinv::linear_model;
use scaleinv::mdp_sim::{self, FeatureMap};
use scaleinv::total_projections::{self, Mode, SolverConfig, StepRule};
use scaleinv::value_estimators;

fn err(e: scaleinv::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

#[pyclass(name = "OverdeterminedSystem", frozen)]
struct PySystem {
    inner: linear_model::OverdeterminedSystem,
}

#[pymethods]
impl PySystem {
    #[new]
    #[pyo3(signature = (phi, v, d=None))]
    fn new(phi: Vec<Vec<f64>>, v: Vec<f64>, d: Option<Vec<f64>>) -> PyResult<Self> {
        let inner =
            linear_model::OverdeterminedSystem::new(matrix(phi)?, DVector::from_vec(v), d.map(DVector::from_vec))
                .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Self> {
        Ok(Self { inner: linear_model::OverdeterminedSystem::read_csv(path).map_err(err)? })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.nrows(), self.inner.ncols())
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        to_vec(self.inner.weights())
    }

    fn scale_invariant_solution(&self) -> PyResult<Vec<f64>> {
        Ok(to_vec(&linear_model::scale_invariant_solution(&self.inner).map_err(err)?))
    }

    fn least_squares_solution(&self) -> PyResult<Vec<f64>> {
        Ok(to_vec(&linear_model::least_squares_solution(&self.inner).map_err(err)?))
    }

    fn normalized_error(&self, w: Vec<f64>) -> PyResult<f64> {
        let w = self.check(w)?;
        Ok(linear_model::normalized_error(&self.inner, &w))
    }

    fn least_squares_error(&self, w: Vec<f64>) -> PyResult<f64> {
        let w = self.check(w)?;
        Ok(linear_model::least_squares_error(&self.inner, &w))
    }

    fn hyperplane_distance(&self, w: Vec<f64>, i: usize) -> PyResult<f64> {
        let w = self.check(w)?;
        if i >= self.inner.nrows() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok(self.inner.hyperplane_distance(&w, i))
    }

    /// Runs Total Projections; returns the final iterate and the per-step
    /// distances to the scale-invariant solution.
    #[pyo3(signature = (mode="batch", alpha=None, beta=0.0, p=0.51, tau=1, max_iters=300, epsilon_guard=1e-12, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn total_projections(
        &self,
        mode: &str,
        alpha: Option<f64>,
        beta: f64,
        p: f64,
        tau: usize,
        max_iters: usize,
        epsilon_guard: f64,
        seed: u64,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let mode = match mode {
            "batch" => Mode::Batch,
            "stochastic" => Mode::Stochastic,
            other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
        };
        let cfg = SolverConfig {
            p,
            beta,
            epsilon_guard,
            tau,
            max_iters,
            mode,
            step_rule: alpha.map_or(StepRule::CurvatureStep, StepRule::FixedAlpha),
            seed,
        };
        let w_star = linear_model::scale_invariant_solution(&self.inner).map_err(err)?;
        let (w, trace) = total_projections::solve_seeded(&self.inner, &cfg, None, Some(&w_star)).map_err(err)?;
        Ok((to_vec(&w), trace.errors()))
    }
}

impl PySystem {
    fn check(&self, w: Vec<f64>) -> PyResult<DVector<f64>> {
        if w.len() != self.inner.ncols() {
            return Err(PyValueError::new_err(format!("w has length {}, need {}", w.len(), self.inner.ncols())));
        }
        Ok(DVector::from_vec(w))
    }
}

#[pyclass(name = "MarkovRewardProcess", frozen)]
struct PyMrp {
    inner: mdp_sim::MarkovRewardProcess,
}

#[pymethods]
impl PyMrp {
    #[new]
    fn new(p: Vec<Vec<f64>>, r: Vec<Vec<f64>>, gamma: f64) -> PyResult<Self> {
        Ok(Self { inner: mdp_sim::MarkovRewardProcess::new(matrix(p)?, matrix(r)?, gamma).map_err(err)? })
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    fn stationary_distribution(&self) -> PyResult<Vec<f64>> {
        Ok(to_vec(mdp_sim::stationary_distribution(self.inner.p()).map_err(err)?.pi()))
    }

    fn expected_one_step_reward(&self) -> Vec<f64> {
        to_vec(&mdp_sim::expected_one_step_reward(&self.inner))
    }

    fn true_value(&self) -> PyResult<Vec<f64>> {
        Ok(to_vec(&mdp_sim::true_value(&self.inner).map_err(err)?))
    }

    fn mc_fixed_point(&self, phi: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let f = features(phi)?;
        Ok(to_vec(&value_estimators::mc_fixed_point(&self.inner, &f).map_err(err)?))
    }

    #[pyo3(signature = (phi, method="tensor"))]
    fn td0_fixed_point(&self, phi: Vec<Vec<f64>>, method: &str) -> PyResult<Vec<f64>> {
        let f = features(phi)?;
        let w = match method {
            "tensor" => value_estimators::td0_fixed_point_tensor(&self.inner, &f),
            "bruteforce" => value_estimators::td0_fixed_point_bruteforce(&self.inner, &f),
            other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
        };
        Ok(to_vec(&w.map_err(err)?))
    }

    fn check_error_bound<'py>(&self, py: Python<'py>, phi: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let f = features(phi)?;
        let b = value_estimators::check_error_bound(&self.inner, &f).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("lhs", b.lhs)?;
        d.set_item("rhs", b.rhs)?;
        d.set_item("holds", b.holds)?;
        d.set_item("td_residual_n", b.td_residual_n)?;
        d.set_item("td_residual_l", b.td_residual_l)?;
        d.set_item("lhs_rowscaled", b.lhs_rowscaled)?;
        d.set_item("rhs_rowscaled", b.rhs_rowscaled)?;
        Ok(d)
    }
}

fn features(phi: Vec<Vec<f64>>) -> PyResult<FeatureMap> {
    FeatureMap::new(matrix(phi)?).map_err(err)
}

/// Builds the outlier chain; returns `(mrp, phi)` with `phi` as a list of rows.
#[pyfunction]
#[pyo3(signature = (m=20, mu=1.0, sigma=0.05, p_outlier=5.0, r=1.0, gamma=0.5, seed=0))]
fn outlier_chain(
    m: usize,
    mu: f64,
    sigma: f64,
    p_outlier: f64,
    r: f64,
    gamma: f64,
    seed: u64,
) -> PyResult<(PyMrp, Vec<Vec<f64>>)> {
    let mut rng = scaleinv::rng::seeded(seed);
    let (mrp, f) = mdp_sim::outlier_chain(m, mu, sigma, p_outlier, r, gamma, &mut rng).map_err(err)?;
    let phi = f.phi().row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok((PyMrp { inner: mrp }, phi))
}

/// Runs a named experiment. `config` is an optional JSON object overriding
/// the defaults; when `out` is given the CSV files are written there.
/// Returns `(summary, passed)`.
#[pyfunction]
#[pyo3(signature = (name, config=None, out=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    name: &str,
    config: Option<&str>,
    out: Option<&str>,
) -> PyResult<(Bound<'py, PyDict>, bool)> {
    let kind: ExperimentKind =
        serde_json::from_value(serde_json::Value::String(name.into())).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let mut value: serde_json::Value = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => serde_json::json!({}),
    };
    value["experiment"] = serde_json::Value::String(name.into());
    let cfg = ExperimentConfig::from_json(&value.to_string()).map_err(err)?;
    debug_assert_eq!(cfg.experiment, kind);
    let report = py.detach(|| experiments::run(&cfg)).map_err(err)?;
    if let Some(dir) = out {
        report.write(std::path::Path::new(dir)).map_err(err)?;
    }
    let d = PyDict::new(py);
    for (k, v) in &report.summary {
        d.set_item(k, v)?;
    }
    Ok((d, report.passed()))
}

#[pymodule]
fn scaleinv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystem>()?;
    m.add_class::<PyMrp>()?;
    m.add_function(wrap_pyfunction!(outlier_chain, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
