//! Python bindings. Arrays cross the boundary as lists of rows; every call
//! runs on the default four-condition world unless it takes a checkpoint.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sidlab::diffusion::{NoiseSchedule, ScheduleKind, TimeRange};
use sidlab::guidance::{strategy_preset as preset, Strategy};
use sidlab::nn::{load_net, DenoiserNet};
use sidlab::oracle::MixtureWorld;

pub type Rows = Vec<Vec<f64>>;

fn py_err(e: sidlab::Error) -> PyErr {
    match e {
        sidlab::Error::Config(_) | sidlab::Error::Input(_) => PyValueError::new_err(e.to_string()),
        sidlab::Error::Io(_) | sidlab::Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

pub fn to_array(rows: &Rows) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

pub fn to_rows(a: &Array2<f64>) -> Rows {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

/// `sigma_t / a_t` of the default schedule.
#[pyfunction]
pub fn noise_ratio(t: usize) -> PyResult<f64> {
    let s = NoiseSchedule::stable_diffusion();
    s.check_time(t).map_err(py_err)?;
    Ok(s.noise_ratio(t))
}

/// `(a, sigma)` for every step.
#[pyfunction]
#[pyo3(signature = (steps = 1000, kind = "scaled_linear", beta_min = 0.00085, beta_max = 0.012))]
pub fn schedule(steps: usize, kind: &str, beta_min: f64, beta_max: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let kind = match kind {
        "scaled_linear" => ScheduleKind::ScaledLinear,
        "linear" => ScheduleKind::Linear,
        other => return Err(PyValueError::new_err(format!("unknown schedule kind `{other}`"))),
    };
    let s = NoiseSchedule::new(steps, kind, beta_min, beta_max).map_err(py_err)?;
    Ok(((0..steps).map(|t| s.a(t)).collect(), (0..steps).map(|t| s.sigma(t)).collect()))
}

#[pyfunction]
pub fn strategy_preset(strategy: &str, kappa: f64) -> PyResult<(f64, f64, f64, f64)> {
    let s: Strategy = strategy.parse().map_err(py_err)?;
    let g = preset(s, kappa).map_err(py_err)?;
    Ok((g.kappa1, g.kappa2, g.kappa3, g.kappa4))
}

#[pyfunction]
#[pyo3(signature = (c, n, seed = 0))]
pub fn sample_world(c: usize, n: usize, seed: u64) -> PyResult<Rows> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = sidlab::oracle::sample_data(&MixtureWorld::default_world(), c, n, &mut rng).map_err(py_err)?;
    Ok(to_rows(&x))
}

/// Exact noise prediction; `c = None` is the unconditional mixture.
#[pyfunction]
#[pyo3(signature = (x_t, t, c = None))]
pub fn oracle_eps(x_t: Rows, t: usize, c: Option<usize>) -> PyResult<Rows> {
    let world = MixtureWorld::default_world();
    let sched = NoiseSchedule::stable_diffusion();
    sched.check_time(t).map_err(py_err)?;
    x_t.iter()
        .map(|x| sidlab::oracle::oracle_eps(&world, &sched, x, t, c).map_err(py_err))
        .collect()
}

#[pyfunction]
#[pyo3(signature = (a, b, n_proj = 128, seed = 0))]
pub fn sliced_w2(a: Rows, b: Rows, n_proj: usize, seed: u64) -> PyResult<f64> {
    sidlab::metrics::sliced_w2(to_array(&a)?.view(), to_array(&b)?.view(), n_proj, seed).map_err(py_err)
}

#[pyfunction]
pub fn gaussian_frechet(a: Rows, b: Rows) -> PyResult<f64> {
    sidlab::metrics::gaussian_frechet(to_array(&a)?.view(), to_array(&b)?.view()).map_err(py_err)
}

#[pyfunction]
pub fn alignment_score(samples: Rows, c: usize) -> PyResult<f64> {
    sidlab::metrics::alignment_score(&MixtureWorld::default_world(), to_array(&samples)?.view(), c).map_err(py_err)
}

/// The verification battery as `(name, measured, tolerance, passed)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
pub fn verify(seed: u64) -> Vec<(String, f64, f64, bool)> {
    sidlab::checks::run_battery(
        &MixtureWorld::default_world(),
        &NoiseSchedule::stable_diffusion(),
        &TimeRange::default(),
        seed,
    )
    .into_iter()
    .map(|r| (r.name, r.measured, r.tolerance, r.passed))
    .collect()
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
pub fn run_cli(args: Vec<String>) -> i32 {
    sidlab::cli::run(std::iter::once("sidlab".to_string()).chain(args))
}

/// A network loaded from a checkpoint, used as a one-step generator.
#[pyclass(frozen)]
pub struct Generator {
    net: DenoiserNet,
    sched: NoiseSchedule,
    #[pyo3(get)]
    role: String,
    #[pyo3(get)]
    step: u64,
}

#[pymethods]
impl Generator {
    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        let (net, header) = load_net(&path).map_err(py_err)?;
        Ok(Self {
            net,
            sched: NoiseSchedule::stable_diffusion(),
            role: header.role,
            step: header.counters.step,
        })
    }

    #[getter]
    pub fn num_conditions(&self) -> usize {
        self.net.arch.num_conditions
    }

    #[pyo3(signature = (c, n, seed = 0, t_init = 625))]
    pub fn sample(&self, c: usize, n: usize, seed: u64, t_init: usize) -> PyResult<Rows> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = sidlab::distill::sample_generator(&self.net, &self.sched, t_init, c, n, &mut rng).map_err(py_err)?;
        Ok(to_rows(&x))
    }

    /// Raw network output (epsilon) at one time step and condition.
    pub fn predict_eps(&self, x_t: Rows, t: usize, c: usize) -> PyResult<Rows> {
        let x = to_array(&x_t)?;
        let n = x.nrows();
        let out = self.net.forward(x.view(), &vec![t; n], &vec![c; n]).map_err(py_err)?;
        Ok(to_rows(&out))
    }
}

#[pymodule]
#[pyo3(name = "sidlab")]
fn sidlab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(noise_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(strategy_preset, m)?)?;
    m.add_function(wrap_pyfunction!(sample_world, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_eps, m)?)?;
    m.add_function(wrap_pyfunction!(sliced_w2, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_frechet, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_score, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Generator>()?;
    Ok(())
}
