//! Python bindings for the CR3BP orbit tools.

use nalgebra::Vector6;
use poincare_upo::catalog::load_catalog;
use poincare_upo::dynamics::{jacobi_constant, lagrange_points};
use poincare_upo::integrator::{integrate, IntegratorConfig};
use poincare_upo::sections::SectionName;
use poincare_upo::stability::{classify_floquet, monodromy_at};
use poincare_upo::SystemParams;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use upo_cli::output::{to_json17, Artifacts};
use upo_cli::{run_through, Experiment, PipelineConfig, Stage};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(format!("{e:#}"))
}

fn state(s: [f64; 6]) -> Vector6<f64> {
    Vector6::from_row_slice(&s)
}

/// (label, x, y, z, jacobi) for L1..L5.
#[pyfunction]
fn lagrange() -> PyResult<Vec<(String, f64, f64, f64, f64)>> {
    let pts = lagrange_points(&SystemParams::earth_moon()).map_err(value_err)?;
    Ok(pts
        .iter()
        .map(|l| (format!("{:?}", l.label), l.position[0], l.position[1], l.position[2], l.jacobi))
        .collect())
}

#[pyfunction]
fn jacobi(s: [f64; 6]) -> PyResult<f64> {
    jacobi_constant(&state(s), &SystemParams::earth_moon()).map_err(value_err)
}

/// Accepted steps of a propagation as (times, states).
#[pyfunction]
fn propagate(s: [f64; 6], duration: f64) -> PyResult<(Vec<f64>, Vec<[f64; 6]>)> {
    let traj = integrate(&state(s), (0.0, duration), &IntegratorConfig::default(), &SystemParams::earth_moon())
        .map_err(value_err)?;
    let states = traj.states.iter().map(|x| std::array::from_fn(|i| x[i])).collect();
    Ok((traj.times, states))
}

/// Monodromy matrix of a catalogue orbit at a section, with its unstable
/// and stable multipliers.
#[pyfunction]
fn monodromy(catalog: &str, target: &str, section: &str) -> PyResult<(Vec<[f64; 6]>, f64, f64)> {
    let p = SystemParams::earth_moon();
    let cat = load_catalog(catalog, &p).map_err(value_err)?;
    let u = cat
        .get(target)
        .ok_or_else(|| value_err(format!("unknown target {target}")))?;
    let name: SectionName = section.parse().map_err(value_err)?;
    let mono = monodromy_at(u, &name.definition(), &IntegratorConfig::default(), &p).map_err(value_err)?;
    let dirs = classify_floquet(&mono).map_err(value_err)?;
    let rows = (0..6).map(|i| std::array::from_fn(|j| mono.m[(i, j)])).collect();
    Ok((rows, dirs.lambda_u, dirs.lambda_s))
}

/// Runs the full pipeline from a TOML config and returns the report as JSON.
#[pyfunction]
fn pipeline(config_toml: &str, out_dir: &str) -> PyResult<String> {
    let cfg = PipelineConfig::from_toml(config_toml).map_err(runtime_err)?;
    let ex = Experiment::new(cfg).map_err(runtime_err)?;
    let mut art = Artifacts::new(out_dir).map_err(runtime_err)?;
    let report = run_through(&ex, Stage::Pipeline, &mut art).map_err(runtime_err)?;
    to_json17(&report).map_err(runtime_err)
}

#[pymodule]
fn poincare_upo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lagrange, m)?)?;
    m.add_function(wrap_pyfunction!(jacobi, m)?)?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(monodromy, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    Ok(())
}
