//! Python surface for the lab: workload generation, single-workload runs,
//! fuzzing, report reproduction, and clustering. Reports cross the boundary
//! in their canonical text form, and structured results become plain dicts,
//! so the Python side needs no wrapper types.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use pmcl::acegen;
use pmcl::fuzz::{self, FuzzOptions};
use pmcl::harness::{self, RunOptions, DEFAULT_CAPACITY};
use pmcl::oracle::BugReport;
use pmcl::reffs::{FaultConfig, FaultId};
use pmcl::workload::Workload;

fn parse_workload(text: &str) -> PyResult<Workload> {
    Workload::parse(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_faults(s: &str) -> PyResult<FaultConfig> {
    if s.trim() == "all" {
        let mut c = FaultConfig::none();
        for f in FaultId::ALL {
            c.enable(f);
        }
        return Ok(c);
    }
    FaultConfig::parse(s).map_err(PyValueError::new_err)
}

fn parse_report(text: &str) -> PyResult<BugReport> {
    BugReport::from_text(text).map_err(PyValueError::new_err)
}

/// Build identity string embedded in reports.
#[pyfunction]
fn build_id() -> String {
    pmcl::build_id()
}

/// Names of the injectable faults, in catalog order.
#[pyfunction]
fn fault_names() -> Vec<&'static str> {
    FaultId::ALL.iter().map(|f| f.name()).collect()
}

/// Every length-`seq` workload, as canonical text. `metadata_only`
/// restricts the operation universe to pwrite/link/unlink/rename.
#[pyfunction]
#[pyo3(signature = (seq, metadata_only = false))]
fn generate(seq: usize, metadata_only: bool) -> PyResult<Vec<String>> {
    let wls = acegen::generate_with(seq, metadata_only).map_err(PyValueError::new_err)?;
    Ok(wls.iter().map(|w| w.to_text()).collect())
}

/// Parse workload text and return its canonical form; raises ValueError on
/// malformed input or a workload the model cannot execute.
#[pyfunction]
fn canonicalize(text: &str) -> PyResult<String> {
    let wl = parse_workload(text)?;
    pmcl::oracle::build_oracles(&wl).map_err(PyValueError::new_err)?;
    Ok(wl.to_text())
}

fn stats_dict<'py>(py: Python<'py>, stats: &harness::RunStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("points", stats.points)?;
    d.set_item("mid_points", stats.mid_points)?;
    d.set_item("boundary_points", stats.boundary_points)?;
    d.set_item("states_checked", stats.states_checked)?;
    d.set_item("states_deduped", stats.states_deduped)?;
    d.set_item("reports_folded", stats.reports_folded)?;
    d.set_item("max_units", stats.max_units)?;
    d.set_item("mean_units", stats.mean_units())?;
    let v = PyDict::new(py);
    for (k, n) in &stats.verdicts {
        v.set_item(k, n)?;
    }
    d.set_item("verdicts", v)?;
    Ok(d)
}

/// Run one workload through crash enumeration and checking. Returns a dict
/// with `reports` (canonical report texts), `stats`, and coverage counts.
#[pyfunction]
#[pyo3(signature = (text, faults = "none", cap = None, boundary_only = false))]
fn run_workload<'py>(
    py: Python<'py>,
    text: &str,
    faults: &str,
    cap: Option<usize>,
    boundary_only: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let wl = parse_workload(text)?;
    let opts = RunOptions {
        capacity: DEFAULT_CAPACITY,
        cap,
        faults: parse_faults(faults)?,
        boundary_only,
    };
    let out = harness::run_workload(&wl, &opts)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    let reports: Vec<String> = out.reports.iter().map(|r| r.to_text()).collect();
    d.set_item("reports", reports)?;
    d.set_item("stats", stats_dict(py, &out.stats)?)?;
    d.set_item("pre_crash_edges", out.coverage.pre_crash.len())?;
    d.set_item("recovery_edges", out.coverage.recovery.len())?;
    Ok(d)
}

/// Coverage-guided fuzzing campaign. Deterministic given `seed` and `jobs`.
/// Returns a dict with counts, report texts, cluster member lists, and the
/// cluster summary text.
#[pyfunction]
#[pyo3(signature = (budget, faults = "none", seed = 1, cap = 2, theta = fuzz::DEFAULT_THETA, jobs = 1, seeds = Vec::new()))]
fn fuzz_campaign<'py>(
    py: Python<'py>,
    budget: usize,
    faults: &str,
    seed: u64,
    cap: Option<usize>,
    theta: f64,
    jobs: usize,
    seeds: Vec<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let seeds: Vec<Workload> =
        seeds.iter().map(|t| parse_workload(t)).collect::<PyResult<_>>()?;
    let opts = FuzzOptions {
        budget,
        faults: parse_faults(faults)?,
        cap,
        threads: jobs,
        rng_seed: seed,
        capacity: DEFAULT_CAPACITY,
        theta,
    };
    let out = fuzz::fuzz_loop(&opts, &seeds, |_, _, _| {});
    let d = PyDict::new(py);
    d.set_item("executed", out.executed)?;
    d.set_item("discarded", out.discarded)?;
    d.set_item("corpus", out.corpus.len())?;
    let reports: Vec<String> = out.reports.iter().map(|r| r.to_text()).collect();
    d.set_item("reports", reports)?;
    let clusters = PyList::empty(py);
    for c in &out.clusters {
        let row = PyDict::new(py);
        row.set_item("members", c.members.clone())?;
        row.set_item("exemplar", c.exemplar)?;
        clusters.append(row)?;
    }
    d.set_item("clusters", clusters)?;
    d.set_item("summary", fuzz::cluster_summary(&out.reports, &out.clusters))?;
    d.set_item("stats", stats_dict(py, &out.stats)?)?;
    d.set_item("errors", out.errors.clone())?;
    Ok(d)
}

/// Re-execute the crash state recorded in a report text. Returns a dict
/// with the replayed verdict, check, and detail lines; raises ValueError if
/// the replayed verdict does not match the recorded one.
#[pyfunction]
fn repro<'py>(py: Python<'py>, report_text: &str) -> PyResult<Bound<'py, PyDict>> {
    let report = parse_report(report_text)?;
    let outcome = harness::repro(&report, DEFAULT_CAPACITY)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    if outcome.verdict != report.verdict {
        return Err(PyValueError::new_err(format!(
            "verdict {} does not match the recorded {}",
            outcome.verdict, report.verdict
        )));
    }
    let d = PyDict::new(py);
    d.set_item("verdict", outcome.verdict.name())?;
    d.set_item("check", outcome.check)?;
    d.set_item("detail", outcome.detail.clone())?;
    Ok(d)
}

/// Cluster report texts by lexical similarity; returns one dict per cluster
/// with `members` (indices into the input list) and `exemplar`.
#[pyfunction]
#[pyo3(signature = (reports, theta = fuzz::DEFAULT_THETA))]
fn cluster<'py>(
    py: Python<'py>,
    reports: Vec<String>,
    theta: f64,
) -> PyResult<Bound<'py, PyList>> {
    let parsed: Vec<BugReport> =
        reports.iter().map(|t| parse_report(t)).collect::<PyResult<_>>()?;
    let clusters = fuzz::cluster_reports_with(&parsed, theta);
    let rows = PyList::empty(py);
    for c in &clusters {
        let row = PyDict::new(py);
        row.set_item("members", c.members.clone())?;
        row.set_item("exemplar", c.exemplar)?;
        rows.append(row)?;
    }
    Ok(rows)
}

#[pymodule]
fn _pmcl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(build_id, m)?)?;
    m.add_function(wrap_pyfunction!(fault_names, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(canonicalize, m)?)?;
    m.add_function(wrap_pyfunction!(run_workload, m)?)?;
    m.add_function(wrap_pyfunction!(fuzz_campaign, m)?)?;
    m.add_function(wrap_pyfunction!(repro, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add("DEFAULT_THETA", fuzz::DEFAULT_THETA)?;
    Ok(())
}
