//! Python bindings: dataset synthesis, training into a run directory, mesh
//! extraction and scoring, plus a few pure functions useful in notebooks.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sdfrecon::error::Error;
use sdfrecon::geometry::Vec3;
use sdfrecon::io;
use sdfrecon::meshing_eval::{eval_metrics, MetricsReport};
use sdfrecon::pipeline::{evaluate_mesh, extract_mesh, synthetic_room, EvalSettings, SynthSetup};
use sdfrecon::rendering::density_from_sdf;
use sdfrecon::training::{train_from, Ablation, Supervision, TrainConfig, TrainState};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn points(v: Vec<[f64; 3]>) -> Vec<Vec3> {
    v.into_iter().map(Vec3::from_array).collect()
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("completeness", r.completeness)?;
    d.set_item("precision", r.precision)?;
    d.set_item("recall", r.recall)?;
    d.set_item("f_score", r.f_score)?;
    d.set_item("tau", r.tau)?;
    Ok(d)
}

/// Writes the default synthetic room to `out`; returns the number of views.
#[pyfunction]
#[pyo3(signature = (out, seed = 7, match_points = 600, pixel_noise = 0.5))]
fn synth(out: PathBuf, seed: u64, match_points: usize, pixel_noise: f64) -> PyResult<usize> {
    let setup = SynthSetup {
        seed,
        match_points,
        pixel_noise,
        ..SynthSetup::default()
    };
    let (ds, _) = synthetic_room(&setup).map_err(to_py)?;
    io::write_dataset(&out, &ds).map_err(to_py)?;
    Ok(ds.num_views())
}

/// Density of a signed distance `s` at scale `beta`.
#[pyfunction]
fn density(s: f64, beta: f64) -> PyResult<f64> {
    density_from_sdf(s, beta).map_err(to_py)
}

/// Default desk configuration as flat `key = value` text.
#[pyfunction]
fn default_config() -> String {
    TrainConfig::desk().to_text()
}

/// Trains on the dataset at `data` into run directory `out` and returns the
/// per-iteration total loss.
#[pyfunction]
#[pyo3(signature = (data, out, config = None, ablation = "full"))]
fn train(py: Python<'_>, data: PathBuf, out: PathBuf, config: Option<&str>, ablation: &str) -> PyResult<Vec<f64>> {
    let ab: Ablation = ablation.parse().map_err(to_py)?;
    let base = match config {
        Some(t) => TrainConfig::parse(t).map_err(to_py)?,
        None => TrainConfig::desk(),
    };
    let cfg = ab.apply(&base);
    py.detach(|| {
        let ds = io::load_dataset(&data)?;
        let sup = Supervision::prepare(&ds, &cfg)?;
        let mut writer = io::RunWriter::create(&out, &cfg, false)?;
        let outcome = train_from(TrainState::new(&cfg)?, &ds, &sup, &cfg, &mut writer)?;
        Ok(outcome.log.iter().map(|r| r.total).collect())
    })
    .map_err(to_py)
}

/// Marching-cubes mesh of a run's latest checkpoint as `(vertices, triangles)`.
#[pyfunction]
#[pyo3(signature = (run, resolution = 96))]
fn mesh(py: Python<'_>, run: PathBuf, resolution: usize) -> PyResult<(Vec<[f64; 3]>, Vec<[u32; 3]>)> {
    let m = py
        .detach(|| {
            let (cfg, state) = io::load_run(&run, None)?;
            extract_mesh(&state.fields, cfg.scene_half_extent, resolution)
        })
        .map_err(to_py)?;
    Ok((m.vertices.iter().map(|v| v.to_array()).collect(), m.triangles))
}

/// Scores a run's latest checkpoint against the dataset's reference cloud.
#[pyfunction]
#[pyo3(signature = (run, data, resolution = 96, tau = 0.05))]
fn evaluate<'py>(py: Python<'py>, run: PathBuf, data: PathBuf, resolution: usize, tau: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = py
        .detach(|| {
            let (cfg, state) = io::load_run(&run, None)?;
            let ds = io::load_dataset(&data)?;
            let m = extract_mesh(&state.fields, cfg.scene_half_extent, resolution)?;
            evaluate_mesh(&m, &ds, &EvalSettings { tau, ..EvalSettings::default() })
        })
        .map_err(to_py)?;
    report_dict(py, &r)
}

/// Accuracy, completeness, precision, recall and F-score between two clouds.
#[pyfunction]
#[pyo3(signature = (pred, gt, tau = 0.05))]
fn metrics<'py>(py: Python<'py>, pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>, tau: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = eval_metrics(&points(pred), &points(gt), tau).map_err(to_py)?;
    report_dict(py, &r)
}

#[pymodule]
fn sdfrecon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(density, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(mesh, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
