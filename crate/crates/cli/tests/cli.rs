use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pact_core::patterns::{covid, mpi, Workload};
use pact_core::planner;
use pact_core::sim::scenario::{FailureSpec, Scenario};
use pact_core::sim::simulate;
use serde_json::Value as Json;
use tempfile::TempDir;

fn pact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pact")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(o: &Output) -> Json {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&o.stdout)))
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn write_scenario(dir: &TempDir, name: &str, s: &Scenario) -> PathBuf {
    write(dir, name, &serde_json::to_string_pretty(s).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_flags_vaccinate() {
    let o = pact(&["analyze", covid::NAME]);
    assert_eq!(code(&o), 0);
    let r = json(&o);
    assert_eq!(r["handlers"]["vaccinate"]["coordination"], "NeedsCoordination");
    assert_eq!(r["handlers"]["add_contact"]["coordination"], "CoordinationFree");
}

#[test]
fn analyze_table_lists_handlers() {
    let o = pact(&["analyze", covid::NAME, "--table"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().any(|l| l.starts_with("vaccinate") && l.contains("needs-coordination")));
}

#[test]
fn analyze_empty_program() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "empty.json", r#"{"name": "empty"}"#);
    let o = pact(&["analyze", s(&p)]);
    assert_eq!(code(&o), 0);
    let r = json(&o);
    assert!(r["handlers"].as_object().unwrap().is_empty());
    assert_eq!(r["summary"]["handlers"], 0);
}

#[test]
fn analyze_malformed_json() {
    let dir = TempDir::new().unwrap();
    let p = write(&dir, "bad.json", r#"{"name": "x", "handlers": [ }"#);
    let o = pact(&["analyze", s(&p)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn analyze_invalid_program_reports_errors() {
    let dir = TempDir::new().unwrap();
    let mut p = covid::program();
    let dup = p.handlers[0].clone();
    p.handlers.push(dup);
    let path = write(&dir, "dup.json", &p.to_json_pretty());
    let o = pact(&["analyze", s(&path)]);
    assert_eq!(code(&o), 2);
    assert!(!json(&o)["errors"].as_array().unwrap().is_empty());
}

#[test]
fn unknown_pattern_is_a_validation_error() {
    assert_eq!(code(&pact(&["analyze", "no_such_pattern"])), 2);
}

#[test]
fn simulate_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let p = covid::covid_tracker();
    let mut sc = p.scenario(&covid::workload(1), 1);
    sc.network.dup_prob = 0.2;
    let path = write_scenario(&dir, "covid.json", &sc);
    let mut outs = Vec::new();
    for i in 0..2 {
        let trace = dir.path().join(format!("trace{i}.jsonl"));
        let o = pact(&["simulate", s(&path), "--trace", s(&trace)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outs.push((o.stdout, fs::read(&trace).unwrap()));
    }
    assert_eq!(outs[0], outs[1]);
    assert!(!outs[0].1.is_empty());
}

#[test]
fn seed_flag_overrides_scenario() {
    let dir = TempDir::new().unwrap();
    let p = covid::covid_tracker();
    let sc = p.scenario(&covid::workload(2), 2);
    let path = write_scenario(&dir, "covid.json", &sc);
    let t1 = dir.path().join("t1");
    let t2 = dir.path().join("t2");
    pact(&["simulate", s(&path), "--seed", "9", "--trace", s(&t1)]);
    let mut sc9 = sc.clone();
    sc9.seed = 9;
    let path9 = write_scenario(&dir, "covid9.json", &sc9);
    pact(&["simulate", s(&path9), "--trace", s(&t2)]);
    assert_eq!(fs::read(&t1).unwrap(), fs::read(&t2).unwrap());
}

fn gather_only(seed: u64) -> Workload {
    let mut w = mpi::workload(seed);
    w.items.retain(|i| i.mailbox == "mpi_gather");
    w
}

#[test]
fn simulate_mpi_gather_matches_oracle() {
    let dir = TempDir::new().unwrap();
    let p = mpi::mpi_collectives();
    for seed in 0..3 {
        let w = gather_only(seed);
        let sc = p.scenario(&w, seed);
        let path = write_scenario(&dir, &format!("gather{seed}.json"), &sc);
        let o = pact(&["simulate", s(&path)]);
        assert_eq!(code(&o), 0);

        let lib = simulate(&sc).unwrap().result.unwrap();
        assert_eq!(String::from_utf8(o.stdout).unwrap(), format!("{}\n", lib.to_json_pretty()));
        let want = (p.oracle)(&w);
        assert!(!want.is_empty());
        assert_eq!(p.observe(&lib.outputs()), want);
    }
}

#[test]
fn two_az_failures_still_answer() {
    let dir = TempDir::new().unwrap();
    let p = covid::covid_tracker();
    let mut sc = p.scenario(&covid::workload(4), 4).with_azs(3);
    sc.facets.availability = true;
    sc.workload.retain(|i| i.mailbox != "likelihood");
    for (tick, az) in [(6, "az0"), (12, "az2")] {
        sc.failures.push(FailureSpec {
            tick,
            domain: vec![az.into()],
        });
    }
    let path = write_scenario(&dir, "avail.json", &sc);
    let trace = dir.path().join("trace.jsonl");
    let o = pact(&["simulate", s(&path), "--trace", s(&trace)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let state = json(&o);
    let responses = state["responses"].as_object().unwrap();
    assert!(!responses.is_empty());
    assert!(responses.values().all(|n| n == 1));
    assert!(state["unanswered"].as_array().unwrap().is_empty());
    let text = fs::read_to_string(&trace).unwrap();
    let crashes = text.lines().filter(|l| l.contains("\"Crashed\"")).count();
    assert!(crashes >= 2);
    let delivered_to_client = text
        .lines()
        .filter(|l| l.contains("\"Delivered\"") && l.contains("client/"))
        .count();
    assert!(delivered_to_client >= responses.len());
}

#[test]
fn no_quiescence_exits_3() {
    let dir = TempDir::new().unwrap();
    let p = covid::covid_tracker();
    let mut sc = p.scenario(&covid::workload(1), 1);
    sc.max_ticks = 2;
    let path = write_scenario(&dir, "short.json", &sc);
    let o = pact(&["simulate", s(&path)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn malformed_scenario_exits_2() {
    let dir = TempDir::new().unwrap();
    let path = write(&dir, "bad.json", r#"{"program": "covid_tracker"}"#);
    let o = pact(&["simulate", s(&path)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8(o.stderr).unwrap().contains("seed"));
}

#[test]
fn dump_plan_marks_sequencer() {
    let dir = TempDir::new().unwrap();
    let mut sc = Scenario::named(covid::NAME, 1);
    sc.init = covid::init_people(&[1], 1);
    sc.workload = covid::vaccinate_requests(&[1], 0);
    let path = write_scenario(&dir, "v.json", &sc);
    let plan = dir.path().join("plan.json");
    let o = pact(&["simulate", s(&path), "--dump-plan", s(&plan)]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&plan).unwrap();
    assert!(text.contains("vaccinate"));
    assert!(text.contains("synthesized"));
}

#[test]
fn inspect_adds_records() {
    let dir = TempDir::new().unwrap();
    let p = covid::covid_tracker();
    let sc = p.scenario(&covid::workload(1), 1);
    let path = write_scenario(&dir, "c.json", &sc);
    let plain = dir.path().join("plain");
    let inspected = dir.path().join("inspected");
    pact(&["simulate", s(&path), "--trace", s(&plain)]);
    pact(&["simulate", s(&path), "--inspect", "--trace", s(&inspected)]);
    assert!(!fs::read_to_string(&plain).unwrap().contains("\"inspect\""));
    assert!(fs::read_to_string(&inspected).unwrap().contains("\"inspect\""));
}

#[test]
fn seed_sweep_reports_confluence() {
    let dir = TempDir::new().unwrap();
    let p = covid::covid_tracker();
    let mut sc = p.scenario(&covid::workload(3), 0);
    sc.workload.retain(|i| !covid::NON_MONOTONE.contains(&i.mailbox.as_str()));
    sc.network.dup_prob = 0.3;
    let path = write_scenario(&dir, "mono.json", &sc);
    let o = pact(&["simulate", s(&path), "--seeds", "20"]);
    assert_eq!(code(&o), 0);
    let r = json(&o);
    assert_eq!(r["confluent"], true);
    assert_eq!(r["seeds"], 20);

    let mut sc = Scenario::named(covid::NAME, 0);
    sc.init = covid::init_people(&[1, 2], 1);
    sc.workload = covid::vaccinate_requests(&[1, 2], 0);
    sc.facets.consistency = false;
    let path = write_scenario(&dir, "race.json", &sc);
    let r = json(&pact(&["simulate", s(&path), "--seeds", "200"]));
    assert_eq!(r["confluent"], false);
}

#[test]
fn plan_tracker_with_sample_catalog() {
    let o = pact(&["plan", "--pattern", covid::NAME]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let plan = json(&o);
    assert_eq!(plan["assignment"]["likelihood"], "gpu");
    assert_eq!(plan["assignment"]["add_person"], "cpu");

    let program = covid::program();
    let problem = planner::Problem::from_program(&program, planner::sample_catalog(), planner::Objective::MinimizeMachines);
    let best = planner::solve_exhaustive(&problem, &problem.model).unwrap();
    assert_eq!(plan["objective"].as_f64().unwrap(), best.objective);
}

#[test]
fn plan_without_gpu_names_feature() {
    let dir = TempDir::new().unwrap();
    let cpu: Vec<_> = planner::sample_catalog().into_iter().filter(|m| m.name == "cpu").collect();
    let cat = write(&dir, "cpu.json", &serde_json::to_string(&cpu).unwrap());
    let o = pact(&["plan", "--pattern", covid::NAME, "--catalog", s(&cat)]);
    assert_eq!(code(&o), 4);
    let req = json(&o);
    let v = &req["violations"][0];
    assert_eq!(v["handler"], "likelihood");
    assert_eq!(v["constraint"], "feature");
}

#[test]
fn plan_impossible_budget() {
    let dir = TempDir::new().unwrap();
    let mut problem = planner::Problem::from_program(
        &covid::program(),
        planner::sample_catalog(),
        planner::Objective::MinimizeMachines,
    );
    for h in &mut problem.handlers {
        h.cost = Some(1e-9);
    }
    let path = write(&dir, "p.json", &serde_json::to_string(&problem).unwrap());
    let o = pact(&["plan", s(&path)]);
    assert_eq!(code(&o), 4);
    let req = json(&o);
    assert!(!req["violations"].as_array().unwrap().is_empty());
    assert!(!req["suggestions"].as_array().unwrap().is_empty());
}

#[test]
fn list_patterns_names_all() {
    let o = pact(&["list-patterns"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    for name in pact_core::patterns::names() {
        assert!(out.lines().any(|l| l.starts_with(name)), "{name} missing");
    }
}
