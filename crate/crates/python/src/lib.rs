//! Python bindings: models, the Riccati solution, moment flow, particle
//! simulation and the validation battery. Matrices cross the boundary as
//! nested lists of rows, vectors as flat lists.

use lqmkv::presets::{mean_variance_model, systemic_model, MeanVarianceParams, SystemicParams};
use lqmkv::verify::{run_battery, VerifyConfig};
use lqmkv::{InitialLaw, LqModel, MomentState, RiccatiSolution, SimConfig};
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(pylqmkv, LqmkvError, PyException);

fn err(e: lqmkv::Error) -> PyErr {
    LqmkvError::new_err(e.to_string())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(LqmkvError::new_err("matrix rows must have equal length"));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

fn moment_state(mean: Vec<f64>, cov: Option<Vec<Vec<f64>>>) -> PyResult<MomentState> {
    let d = mean.len();
    let cov = match cov {
        Some(c) => matrix(&c)?,
        None => DMatrix::zeros(d, d),
    };
    MomentState::new(DVector::from_vec(mean), cov).map_err(err)
}

fn kwargs(params: Option<&Bound<'_, PyDict>>, mut set: impl FnMut(&str, f64) -> lqmkv::Result<()>) -> PyResult<()> {
    if let Some(p) = params {
        for (k, v) in p.iter() {
            set(&k.extract::<String>()?, v.extract::<f64>()?).map_err(err)?;
        }
    }
    Ok(())
}

/// An LQ McKean-Vlasov model.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: LqModel,
}

#[pymethods]
impl PyModel {
    /// Mean-variance portfolio preset; keyword overrides r, rho, theta, eta, x0, T.
    #[staticmethod]
    #[pyo3(signature = (**params))]
    fn mean_variance(params: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut p = MeanVarianceParams::default();
        kwargs(params, |k, v| p.set(k, v))?;
        Ok(PyModel { inner: mean_variance_model(&p).map_err(err)? })
    }

    /// Systemic-risk preset; keyword overrides kappa, sigma, q, eta, c, x0, T.
    #[staticmethod]
    #[pyo3(signature = (**params))]
    fn systemic_risk(params: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut p = SystemicParams::default();
        kwargs(params, |k, v| p.set(k, v))?;
        Ok(PyModel { inner: systemic_model(&p).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModel { inner: lqmkv::io::parse_model(text).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { inner: lqmkv::io::load_model(path).map_err(err)? })
    }

    fn to_json(&self) -> String {
        lqmkv::io::model_to_json(&self.inner)
    }

    /// `(d, m)`: state and control dimensions.
    #[getter]
    fn dims(&self) -> (usize, usize) {
        (self.inner.dims.state, self.inner.dims.control)
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon
    }

    /// Backward Riccati solve on `steps` uniform steps.
    #[pyo3(signature = (steps = None))]
    fn solve(&self, steps: Option<usize>) -> PyResult<PySolution> {
        let steps = steps.unwrap_or_else(|| lqmkv::default_steps(self.inner.horizon));
        let sol = lqmkv::solve_riccati(&self.inner, steps).map_err(err)?;
        Ok(PySolution { model: self.inner.clone(), sol })
    }

    /// Runs the validation battery; returns `(name, measured, tolerance, passed)` rows.
    #[pyo3(signature = (mean, cov = None, seed = 0, steps = 2000, particles = 50_000, sim_steps = 1000, scale_lambda = None))]
    #[allow(clippy::too_many_arguments)]
    fn verify(
        &self,
        py: Python<'_>,
        mean: Vec<f64>,
        cov: Option<Vec<Vec<f64>>>,
        seed: u64,
        steps: usize,
        particles: usize,
        sim_steps: usize,
        scale_lambda: Option<f64>,
    ) -> PyResult<Vec<(String, f64, f64, bool)>> {
        let ms = moment_state(mean, cov)?;
        let cfg = VerifyConfig { seed, steps, particles, sim_steps, scale_lambda, ..VerifyConfig::default() };
        let checks = py.detach(|| run_battery(&self.inner, &ms, &cfg)).map_err(err)?;
        Ok(checks.into_iter().map(|c| (c.name.to_string(), c.measured, c.tolerance, c.pass)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(d={}, m={}, T={})", self.inner.dims.state, self.inner.dims.control, self.inner.horizon)
    }
}

/// Solved coefficient functions `(Λ, Γ, γ, χ)` with the optimal feedback.
#[pyclass(name = "Solution", frozen)]
struct PySolution {
    model: LqModel,
    sol: RiccatiSolution,
}

impl PySolution {
    fn feedback(&self) -> PyResult<lqmkv::AffineFeedback> {
        lqmkv::optimal_feedback(&self.model, &self.sol).map_err(err)
    }
}

#[pymethods]
impl PySolution {
    fn times(&self) -> Vec<f64> {
        self.sol.times()
    }

    /// `{"lambda", "gamma", "gamma_vec", "chi"}` at time `t`.
    fn state<'py>(&self, py: Python<'py>, t: f64) -> PyResult<Bound<'py, PyDict>> {
        let st = self.sol.state_at(t).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("lambda", rows(&st.lambda))?;
        d.set_item("gamma", rows(&st.gamma))?;
        d.set_item("gamma_vec", st.gamma_vec.as_slice().to_vec())?;
        d.set_item("chi", st.chi)?;
        Ok(d)
    }

    #[pyo3(signature = (t, mean, cov = None))]
    fn value(&self, t: f64, mean: Vec<f64>, cov: Option<Vec<Vec<f64>>>) -> PyResult<f64> {
        lqmkv::value(&self.sol, t, &moment_state(mean, cov)?).map_err(err)
    }

    /// Optimal gains `{"k1", "k2", "k"}` at time `t`.
    fn gains<'py>(&self, py: Python<'py>, t: f64) -> PyResult<Bound<'py, PyDict>> {
        let st = self.sol.state_at(t).map_err(err)?;
        let g = lqmkv::optimal_gains(&self.model, t, &st).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("k1", rows(&g.k1))?;
        d.set_item("k2", rows(&g.k2))?;
        d.set_item("k", g.k.as_slice().to_vec())?;
        Ok(d)
    }

    /// Optimal control at `(t, x)` under a law with mean `mean_x`.
    fn control(&self, t: f64, x: Vec<f64>, mean_x: Vec<f64>) -> PyResult<Vec<f64>> {
        let fb = self.feedback()?;
        let a = lqmkv::apply_feedback(&fb, t, &DVector::from_vec(x), &DVector::from_vec(mean_x)).map_err(err)?;
        Ok(a.as_slice().to_vec())
    }

    #[pyo3(signature = (t, mean, cov = None))]
    fn bellman_residual(&self, t: f64, mean: Vec<f64>, cov: Option<Vec<Vec<f64>>>) -> PyResult<f64> {
        lqmkv::bellman_residual(&self.model, &self.sol, t, &moment_state(mean, cov)?).map_err(err)
    }

    #[pyo3(signature = (t, theta, mean, cov = None, steps = 1000))]
    fn dpp_check(&self, t: f64, theta: f64, mean: Vec<f64>, cov: Option<Vec<Vec<f64>>>, steps: usize) -> PyResult<f64> {
        lqmkv::dpp_check(&self.model, &self.sol, t, theta, &moment_state(mean, cov)?, steps).map_err(err)
    }

    /// Moment flow under the optimal feedback from `(0, mean, cov)`:
    /// `{"times", "means", "covs", "running", "cost"}`.
    #[pyo3(signature = (mean, cov = None, steps = 1000))]
    fn moments<'py>(
        &self,
        py: Python<'py>,
        mean: Vec<f64>,
        cov: Option<Vec<Vec<f64>>>,
        steps: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let fb = self.feedback()?;
        let ms = moment_state(mean, cov)?;
        let traj = lqmkv::propagate_moments(&self.model, &fb, 0.0, &ms, steps).map_err(err)?;
        let terminal = lqmkv::g_hat(&self.model, traj.final_state()).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("times", traj.times.clone())?;
        d.set_item("means", traj.states.iter().map(|s| s.mean.as_slice().to_vec()).collect::<Vec<_>>())?;
        d.set_item("covs", traj.states.iter().map(|s| rows(&s.cov)).collect::<Vec<_>>())?;
        d.set_item("running", traj.running.clone())?;
        d.set_item("cost", traj.final_running() + terminal)?;
        Ok(d)
    }

    /// Particle simulation under the optimal feedback:
    /// `{"times", "means", "covs", "cost_mean", "cost_stderr"}`.
    #[pyo3(signature = (mean, cov = None, particles = 50_000, steps = 1000, seed = 0, record_every = 10))]
    #[allow(clippy::too_many_arguments)]
    fn simulate<'py>(
        &self,
        py: Python<'py>,
        mean: Vec<f64>,
        cov: Option<Vec<Vec<f64>>>,
        particles: usize,
        steps: usize,
        seed: u64,
        record_every: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let fb = self.feedback()?;
        let ms = moment_state(mean, cov)?;
        let initial = if ms.cov.amax() == 0.0 { InitialLaw::Dirac(ms.mean.clone()) } else { InitialLaw::Gaussian(ms) };
        let mut cfg = SimConfig::new(particles, steps, seed, initial);
        cfg.record_every = record_every;
        let res = py.detach(|| lqmkv::simulate(&self.model, &fb, &cfg)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("times", res.times.clone())?;
        d.set_item("means", res.moments.iter().map(|s| s.mean.as_slice().to_vec()).collect::<Vec<_>>())?;
        d.set_item("covs", res.moments.iter().map(|s| rows(&s.cov)).collect::<Vec<_>>())?;
        d.set_item("cost_mean", res.cost_mean)?;
        d.set_item("cost_stderr", res.cost_stderr)?;
        Ok(d)
    }
}

#[pymodule]
fn pylqmkv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PySolution>()?;
    m.add("LqmkvError", m.py().get_type::<LqmkvError>())?;
    Ok(())
}
