use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

fn with_module<T>(f: impl FnOnce(&Bound<'_, PyModule>) -> PyResult<T>) -> T {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "sepcal_py").unwrap();
        sepcal_py::sepcal_py(&m).unwrap();
        f(&m).unwrap()
    })
}

#[test]
fn assignment_and_bhattacharyya() {
    let (perm, total): (Vec<usize>, f64) =
        with_module(|m| m.getattr("auction_assign")?.call1((vec![vec![1.0, 5.0], vec![4.0, 1.0]],))?.extract());
    assert_eq!(perm, vec![1, 0]);
    assert!((total - 9.0).abs() < 1e-6);

    let same: f64 = with_module(|m| {
        let c = vec![vec![2.0, 0.3], vec![0.3, 1.0]];
        m.getattr("log_bhattacharyya_coefficient")?.call1((vec![1.0, 2.0], c.clone(), vec![1.0, 2.0], c))?.extract()
    });
    assert!(same.abs() < 1e-12);
}

#[test]
fn bad_arguments_raise_value_error() {
    with_module(|m| {
        let py = m.py();
        let err = m.getattr("auction_assign")?.call1((vec![vec![1.0, 2.0]],)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
        let err = m.getattr("calibrate")?.call1((1u64, 0usize)).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py));
        Ok(())
    });
}

#[test]
fn calibrate_returns_per_iteration_metrics() {
    with_module(|m| {
        let kwargs = PyDict::new(m.py());
        kwargs.set_item("particles", 30)?;
        kwargs.set_item("iterations", 3)?;
        kwargs.set_item("rows", 2)?;
        kwargs.set_item("cols", 2)?;
        let out = m.getattr("calibrate")?.call((7u64,), Some(&kwargs))?;
        let mse: Vec<f64> = out.get_item("mse")?.extract()?;
        assert_eq!(mse.len(), 3);
        let runs: usize = out.get_item("local_filter_runs")?.extract()?;
        assert_eq!(runs, 4);
        let report = m.getattr("kld_report")?.call1((3u64,))?;
        let d_pq: f64 = report.get_item("d_pq")?.extract()?;
        let mi: f64 = report.get_item("mi_bound")?.extract()?;
        assert!(d_pq <= mi + 1e-9);
        Ok(())
    });
}
