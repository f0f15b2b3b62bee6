//! Python bindings for the calibration library.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sepcal::harness::{metrics_rows, RunConfig};
use sepcal::lgss::{log_bhattacharyya, Gaussian};
use sepcal::nbp::run_calibration;
use sepcal::scenario::Scenario;

fn to_py(e: sepcal::Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn config(seed: u64, rows: usize, cols: usize) -> RunConfig {
    let mut cfg = RunConfig { seeds: vec![seed], ..Default::default() };
    cfg.scenario.rows = rows;
    cfg.scenario.cols = cols;
    cfg
}

/// Scenario for `seed` as a JSON string.
#[pyfunction]
#[pyo3(signature = (seed, rows = 4, cols = 4))]
fn simulate(seed: u64, rows: usize, cols: usize) -> PyResult<String> {
    let cfg = config(seed, rows, cols);
    cfg.validate().map_err(to_py)?;
    Scenario::generate(&cfg.scenario_for(seed)).and_then(|s| s.to_json()).map_err(to_py)
}

/// One calibration run; returns estimates per iteration, true offsets and metrics.
#[pyfunction]
#[pyo3(signature = (seed, particles = 100, iterations = 16, variant = "quad", rows = 4, cols = 4))]
fn calibrate<'py>(
    py: Python<'py>,
    seed: u64,
    particles: usize,
    iterations: usize,
    variant: &str,
    rows: usize,
    cols: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = config(seed, rows, cols);
    cfg.particles = particles;
    cfg.iterations = iterations;
    cfg.variant = variant.parse().map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    let (scenario, report) = py
        .detach(|| {
            let scenario = Scenario::generate(&cfg.scenario_for(seed))?;
            let report = run_calibration(&scenario, &cfg.calibration(seed))?;
            Ok::<_, sepcal::Error>((scenario, report))
        })
        .map_err(to_py)?;
    let rows = metrics_rows(seed, &scenario, &report);
    let out = PyDict::new(py);
    out.set_item("estimates", report.snapshots.iter().map(|s| s.estimates.clone()).collect::<Vec<_>>())?;
    out.set_item("truth", scenario.network.offsets.clone())?;
    out.set_item("mse", rows.iter().map(|r| r.mse).collect::<Vec<_>>())?;
    out.set_item("mean_miss", rows.iter().map(|r| r.mean_miss).collect::<Vec<_>>())?;
    out.set_item("local_filter_runs", report.local_filter_runs)?;
    Ok(out)
}

/// Maximum-total assignment of a square cost matrix: `(perm, total)`.
#[pyfunction]
fn auction_assign(cost: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("cost matrix must be square"));
    }
    let m = DMatrix::from_fn(n, n, |r, c| cost[r][c]);
    let sol = sepcal::assignment::auction_assign(&m).map_err(to_py)?;
    Ok((sol.perm, sol.total_logcost))
}

/// `log ∫ sqrt(N(m1, c1) N(m2, c2))`.
#[pyfunction]
fn log_bhattacharyya_coefficient(m1: Vec<f64>, c1: Vec<Vec<f64>>, m2: Vec<f64>, c2: Vec<Vec<f64>>) -> PyResult<f64> {
    let g = |m: Vec<f64>, c: Vec<Vec<f64>>| {
        let d = m.len();
        if c.len() != d || c.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err("covariance shape does not match mean"));
        }
        Gaussian::new(DVector::from_vec(m), DMatrix::from_fn(d, d, |r, k| c[r][k])).map_err(to_py)
    };
    log_bhattacharyya(&g(m1, c1)?, &g(m2, c2)?).map_err(to_py)
}

/// Divergence and bound report for a random identical-sensor instance.
#[pyfunction]
fn kld_report<'py>(py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let model = sepcal::diagnostics::random_symmetric_instance(seed).map_err(to_py)?;
    let r = sepcal::diagnostics::quad_dual_kld_report(&model, model.horizon).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("step", r.step)?;
    out.set_item("d_pq", r.d_pq)?;
    out.set_item("d_pu", r.d_pu)?;
    out.set_item("mi_bound", r.mi_bound)?;
    out.set_item("entropy_bound", r.entropy_bound)?;
    out.set_item("dual_entropy_bound", r.dual_entropy_bound)?;
    out.set_item("expected_log_kappa", r.expected_log_kappa)?;
    Ok(out)
}

#[pymodule]
pub fn sepcal_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(auction_assign, m)?)?;
    m.add_function(wrap_pyfunction!(log_bhattacharyya_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(kld_report, m)?)?;
    Ok(())
}
