use pact_core::analysis::calm_report;
use pact_core::ir::{self, Program as CoreProgram};
use pact_core::lattice::{bottom, LatticeValue, Scalar};
use pact_core::patterns;
use pact_core::planner::{self, PlanError, Problem};
use pact_core::sim::scenario::Scenario;
use pact_core::sim::{trace_jsonl, Cluster, SimError};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyTypeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(pact, PactError, PyException);
create_exception!(pact, ValidationError, PactError);
create_exception!(pact, NoQuiescence, PactError);
create_exception!(pact, Infeasible, PactError);

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| ValidationError::new_err(e.to_string()))
}

fn sim_err(e: SimError) -> PyErr {
    match e {
        SimError::NoQuiescence(_) => NoQuiescence::new_err(e.to_string()),
        _ => ValidationError::new_err(e.to_string()),
    }
}

fn scalar(v: &Bound<'_, PyAny>) -> PyResult<Scalar> {
    if let Ok(b) = v.extract::<bool>() {
        return Ok(Scalar::Bool(b));
    }
    if let Ok(i) = v.extract::<i64>() {
        return Ok(Scalar::Int(i));
    }
    if let Ok(s) = v.extract::<String>() {
        return Ok(Scalar::Str(s));
    }
    if let Ok(items) = v.extract::<Vec<Bound<'_, PyAny>>>() {
        return Ok(Scalar::Tuple(items.iter().map(scalar).collect::<PyResult<_>>()?));
    }
    Err(PyTypeError::new_err("expected bool, int, str or a sequence of those"))
}

/// A join-semilattice value.
#[pyclass(name = "Lattice", frozen, eq, hash, from_py_object)]
#[derive(Clone, PartialEq, Eq, Hash)]
struct PyLattice(LatticeValue);

#[pymethods]
impl PyLattice {
    #[staticmethod]
    fn bool_or(b: bool) -> Self {
        PyLattice(LatticeValue::BoolOr(b))
    }

    #[staticmethod]
    fn max_int(v: i64) -> Self {
        PyLattice(LatticeValue::MaxInt(v))
    }

    #[staticmethod]
    fn min_int(v: i64) -> Self {
        PyLattice(LatticeValue::MinInt(v))
    }

    #[staticmethod]
    fn set_union(items: Vec<Bound<'_, PyAny>>) -> PyResult<Self> {
        let items: Vec<Scalar> = items.iter().map(scalar).collect::<PyResult<_>>()?;
        Ok(PyLattice(LatticeValue::set(items)))
    }

    #[staticmethod]
    fn pair(a: &PyLattice, b: &PyLattice) -> Self {
        PyLattice(LatticeValue::pair(a.0.clone(), b.0.clone()))
    }

    /// `{key: Lattice}`; every value must have the same shape.
    #[staticmethod]
    fn map_union(entries: Vec<(Bound<'_, PyAny>, PyLattice)>, like: &PyLattice) -> PyResult<Self> {
        let entries: Vec<(Scalar, LatticeValue)> =
            entries.iter().map(|(k, v)| Ok((scalar(k)?, v.0.clone()))).collect::<PyResult<_>>()?;
        LatticeValue::map(like.0.shape(), entries)
            .map(PyLattice)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        parse(text).map(PyLattice)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("lattice encodes")
    }

    fn merge(&self, other: &PyLattice) -> PyResult<PyLattice> {
        self.0.merge(&other.0).map(PyLattice).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn leq(&self, other: &PyLattice) -> PyResult<bool> {
        self.0.leq(&other.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn bottom(&self) -> PyLattice {
        PyLattice(bottom(&self.0.shape()))
    }

    fn is_bottom(&self) -> bool {
        self.0.is_bottom()
    }

    #[getter]
    fn shape(&self) -> String {
        self.0.shape().to_string()
    }

    fn __or__(&self, other: &PyLattice) -> PyResult<PyLattice> {
        self.merge(other)
    }

    fn __repr__(&self) -> String {
        format!("Lattice({})", self.to_json())
    }
}

#[pyclass(name = "Program", frozen)]
struct PyProgram(CoreProgram);

#[pymethods]
impl PyProgram {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        CoreProgram::from_json(text)
            .map(PyProgram)
            .map_err(|e| ValidationError::new_err(e.to_string()))
    }

    /// A bundled example program.
    #[staticmethod]
    fn pattern(name: &str) -> PyResult<Self> {
        patterns::by_name(name)
            .map(|p| PyProgram((*p.program).clone()))
            .ok_or_else(|| ValidationError::new_err(format!("unknown pattern {name}")))
    }

    #[getter]
    fn name(&self) -> &str {
        &self.0.name
    }

    #[getter]
    fn handlers(&self) -> Vec<String> {
        self.0.handlers.iter().map(|h| h.name.clone()).collect()
    }

    fn to_json(&self) -> String {
        self.0.to_json_pretty()
    }

    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &ir::validate(&self.0))
    }

    /// Per-handler monotonicity and coordination report.
    fn analyze<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = ir::validate(&self.0);
        if !report.is_clean() {
            let msgs: Vec<String> = report.errors.iter().map(|i| format!("{}: {}", i.location, i.message)).collect();
            return Err(ValidationError::new_err(msgs.join("\n")));
        }
        to_py(py, &calm_report(&self.0))
    }

    fn __repr__(&self) -> String {
        format!("Program({:?}, handlers={})", self.0.name, self.0.handlers.len())
    }
}

/// A simulated cluster that can be stepped tick by tick.
#[pyclass(name = "Simulation", unsendable)]
struct PySimulation(Cluster);

#[pymethods]
impl PySimulation {
    #[new]
    fn new(scenario_json: &str) -> PyResult<Self> {
        let scenario: Scenario = parse(scenario_json)?;
        Cluster::new(scenario).map(PySimulation).map_err(sim_err)
    }

    #[getter]
    fn tick(&self) -> u64 {
        self.0.tick()
    }

    fn step(&mut self) -> PyResult<()> {
        self.0.step().map_err(sim_err)
    }

    fn is_quiescent(&self) -> bool {
        self.0.is_quiescent()
    }

    fn inject_failure(&mut self, domain: Vec<String>, at: u64) -> PyResult<()> {
        self.0.inject_failure(&domain, at).map_err(sim_err)
    }

    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let state = self.0.run_to_quiescence().map_err(sim_err)?;
        to_py(py, &state)
    }

    fn final_state<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.final_state())
    }

    fn trace<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.trace())
    }

    fn trace_jsonl(&self) -> String {
        trace_jsonl(self.0.trace())
    }

    fn plan<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.plan_json())
    }
}

/// Runs a scenario to quiescence; returns `(final_state, trace_jsonl)`.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, scenario_json: &str) -> PyResult<(Bound<'py, PyAny>, String)> {
    let mut sim = PySimulation::new(scenario_json)?;
    let state = sim.run(py)?;
    Ok((state, sim.trace_jsonl()))
}

/// Solves a deployment problem given as JSON. Raises `Infeasible` with the
/// backtrack request as its second argument.
#[pyfunction]
fn plan<'py>(py: Python<'py>, problem_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let problem: Problem = parse(problem_json)?;
    solve(py, &problem)
}

/// Plans a bundled pattern's target facets against a machine catalog (the
/// sample CPU/GPU catalog by default).
#[pyfunction]
#[pyo3(signature = (name, catalog_json=None))]
fn plan_pattern<'py>(py: Python<'py>, name: &str, catalog_json: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let p = patterns::by_name(name).ok_or_else(|| ValidationError::new_err(format!("unknown pattern {name}")))?;
    let machines = match catalog_json {
        Some(text) => parse(text)?,
        None => planner::sample_catalog(),
    };
    let problem = Problem::from_program(&p.program, machines, planner::Objective::MinimizeMachines);
    solve(py, &problem)
}

fn solve<'py>(py: Python<'py>, problem: &Problem) -> PyResult<Bound<'py, PyAny>> {
    match planner::solve(problem) {
        Ok(plan) => to_py(py, &plan),
        Err(PlanError::Infeasible(inf)) => {
            let request = to_py(py, &planner::backtrack_signal(&inf))?.unbind();
            Err(Infeasible::new_err((format!("{} constraint violation(s)", inf.violations.len()), request)))
        }
        Err(e) => Err(ValidationError::new_err(e.to_string())),
    }
}

#[pyfunction]
fn pattern_names() -> Vec<&'static str> {
    patterns::names()
}

/// Scenario JSON for a bundled pattern with its generated workload.
#[pyfunction]
fn pattern_scenario(name: &str, seed: u64) -> PyResult<String> {
    let p = patterns::by_name(name).ok_or_else(|| ValidationError::new_err(format!("unknown pattern {name}")))?;
    let s = p.scenario(&(p.workload)(seed), seed);
    Ok(serde_json::to_string_pretty(&s).expect("scenario encodes"))
}

#[pymodule]
fn pact(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLattice>()?;
    m.add_class::<PyProgram>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(plan_pattern, m)?)?;
    m.add_function(wrap_pyfunction!(pattern_names, m)?)?;
    m.add_function(wrap_pyfunction!(pattern_scenario, m)?)?;
    m.add("PactError", m.py().get_type::<PactError>())?;
    m.add("ValidationError", m.py().get_type::<ValidationError>())?;
    m.add("NoQuiescence", m.py().get_type::<NoQuiescence>())?;
    m.add("Infeasible", m.py().get_type::<Infeasible>())?;
    Ok(())
}
