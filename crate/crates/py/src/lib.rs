//! Python bindings. Results cross the boundary as plain dicts and lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

use ratchet_core::controller::{arbitrate as arbitrate_core, ControllerConfig};
use ratchet_core::envsim::{builtin_names, resolve_scenario, Scenario};
use ratchet_core::harness::{self, AgentConfig, NAMED_CONFIGS};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn load(scenario: &str, config: &str) -> PyResult<(Scenario, AgentConfig)> {
    let s = resolve_scenario(scenario).map_err(err)?;
    let cfg = AgentConfig::resolve(config).map_err(err)?;
    Ok((s, cfg))
}

/// Names of the shipped scenarios.
#[pyfunction]
fn scenarios() -> Vec<&'static str> {
    builtin_names()
}

/// Names of the built-in agent configurations.
#[pyfunction]
fn configs() -> Vec<&'static str> {
    NAMED_CONFIGS.to_vec()
}

/// One seeded episode. `scenario` and `config` accept a name or a JSON path.
#[pyfunction]
#[pyo3(signature = (scenario, config = "full", seed = 7))]
fn run<'py>(
    py: Python<'py>,
    scenario: &str,
    config: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let (s, cfg) = load(scenario, config)?;
    let report = py
        .detach(|| harness::run_scenario(&s, &cfg, seed))
        .map_err(err)?;
    to_py(py, &report)
}

/// Mean/std summary row over several seeds.
#[pyfunction]
#[pyo3(signature = (scenario, config = "full", seeds = vec![7, 13, 31]))]
fn suite<'py>(
    py: Python<'py>,
    scenario: &str,
    config: &str,
    seeds: Vec<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let (s, cfg) = load(scenario, config)?;
    let report = py
        .detach(|| harness::run_suite(&s, &cfg, &seeds))
        .map_err(err)?;
    to_py(py, &report.summary)
}

#[pyfunction]
#[pyo3(signature = (scenario = "governance-audit-8", config = "full", seed = 7))]
fn audit<'py>(
    py: Python<'py>,
    scenario: &str,
    config: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let (s, cfg) = load(scenario, config)?;
    let rows = harness::run_audit(&s, &cfg, seed).map_err(err)?;
    to_py(py, &rows)
}

#[pyfunction]
fn tta_bound(p: f64, eps: f64, delta: f64) -> PyResult<u64> {
    if !(p > 0.0 && p <= 1.0 && (0.0..1.0).contains(&eps) && delta > 0.0 && delta < 1.0) {
        return Err(err("need 0 < p <= 1, 0 <= eps < 1, 0 < delta < 1"));
    }
    Ok(harness::tta_bound(p, eps, delta))
}

#[pyfunction]
#[pyo3(signature = (p, eps, delta, trials = 100_000, seed = 7))]
fn tta_bound_check<'py>(
    py: Python<'py>,
    p: f64,
    eps: f64,
    delta: f64,
    trials: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    tta_bound(p, eps, delta)?;
    to_py(py, &harness::tta_bound_check(p, eps, delta, trials, seed))
}

/// Pathway choice under the default controller thresholds.
#[pyfunction]
fn arbitrate(u: f64, p_viol: f64, budget: f64) -> String {
    format!(
        "{:?}",
        arbitrate_core(u, p_viol, budget, &ControllerConfig::default())
    )
    .to_uppercase()
}

#[pymodule]
fn ratchet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(configs, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(suite, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(tta_bound, m)?)?;
    m.add_function(wrap_pyfunction!(tta_bound_check, m)?)?;
    m.add_function(wrap_pyfunction!(arbitrate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
