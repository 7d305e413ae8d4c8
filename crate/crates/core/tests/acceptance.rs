//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use pact_core::analysis::calm_report;
use pact_core::patterns::{self, covid, mpi, reach, Outputs, PatternProgram};
use pact_core::planner::{self, Objective, PlanError, Problem, Violation};
use pact_core::runtime::Transducer;
use pact_core::sim::scenario::{EngineKind, FailureSpec, InitData, Scenario, WorkItem};
use pact_core::sim::{simulate, sweep, trace_jsonl, FinalState, TraceKind};
use pact_core::value::{Message, Value};
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_ok(s: &Scenario) -> Result<FinalState, String> {
    simulate(s).map_err(|e| e.to_string())?.result.map_err(|e| e.to_string())
}

fn lattice_laws() -> Outcome {
    let mut cases = 0;
    for shape in common::shapes() {
        let mut runner = TestRunner::new(Config::with_cases(1000));
        runner
            .run(&common::triple(&shape), |(a, b, c)| {
                common::check_laws(&a, &b, &c).map_err(TestCaseError::fail)
            })
            .map_err(|e| format!("{shape}: {e}"))?;
        cases += 1000;
    }
    Ok(format!("{cases} cases over {} variants", common::shapes().len()))
}

/// Workload items a pattern's confluence check keeps: monotone handlers, or
/// every item for the MPI collectives.
fn confluence_workload(p: &PatternProgram, seed: u64) -> Vec<WorkItem> {
    let report = calm_report(&p.program);
    let w = (p.workload)(seed);
    w.items
        .into_iter()
        .filter(|i| p.name == mpi::NAME || report.handlers.get(&i.mailbox).is_some_and(|h| h.class.is_monotone()))
        .collect()
}

fn calm_confluence() -> Outcome {
    let mut covered = Vec::new();
    for p in patterns::all() {
        let base = (p.workload)(7);
        let items = confluence_workload(&p, 7);
        if items.is_empty() {
            continue;
        }
        let runs = sweep(0..100, |seed| {
            let mut s = p.scenario(&base, seed);
            s.workload = items.clone();
            s.workload_seed = Some(7);
            s.network.dup_prob = 0.3;
            run_ok(&s).map(|f| {
                let states: Vec<serde_json::Value> = f.nodes.iter().map(|n| n.state.clone()).collect();
                (states, f.outputs())
            })
        });
        let first = runs[0].clone()?;
        for (seed, r) in runs.into_iter().enumerate() {
            let r = r?;
            ensure(r.0 == first.0, || format!("{}: state differs at seed {seed}", p.name))?;
            ensure(r.1 == first.1, || format!("{}: outputs differ at seed {seed}", p.name))?;
        }
        let handlers: BTreeSet<&str> = items.iter().map(|i| i.mailbox.as_str()).collect();
        covered.push(format!("{}[{}]", p.name, handlers.len()));
    }
    ensure(covered.iter().any(|c| c.starts_with(covid::NAME)), || "covid not covered".into())?;
    ensure(covered.iter().any(|c| c.starts_with(mpi::NAME)), || "mpi not covered".into())?;
    Ok(format!("100 seeds, dup 0.3: {}", covered.join(" ")))
}

fn vaccinate_scenario(seed: u64, consistency: bool) -> Scenario {
    let mut s = Scenario::named(covid::NAME, seed);
    s.init = covid::init_people(&[1, 2], 1);
    s.workload = covid::vaccinate_requests(&[1, 2], 0);
    s.facets.consistency = consistency;
    s.dump_state_each_tick = true;
    s
}

fn count_in(state: &serde_json::Value) -> i64 {
    state["vars"]["vaccine_count"].as_i64().unwrap_or(i64::MIN)
}

fn calm_negative_witness() -> Outcome {
    let witness = (0..1000u64).find(|seed| {
        run_ok(&vaccinate_scenario(*seed, false))
            .map(|f| count_in(f.node_state(0)) < 0)
            .unwrap_or(false)
    });
    let witness = witness.ok_or("no violating seed without coordination")?;
    let bad: Vec<u64> = sweep(0..1000, |seed| {
        let run = simulate(&vaccinate_scenario(seed, true)).ok()?;
        let f = run.result.ok()?;
        let dump_bad = run
            .trace
            .iter()
            .filter(|e| e.kind == TraceKind::StateDump)
            .any(|e| count_in(&e.payload["state"]) < 0);
        let o = covid::observed_outcome(&f, 0);
        (!dump_bad && o.count == 0 && o.committed.len() == 1).then_some(())
    })
    .into_iter()
    .enumerate()
    .filter(|(_, ok)| ok.is_none())
    .map(|(s, _)| s as u64)
    .collect();
    ensure(bad.is_empty(), || format!("sequencer violations at seeds {bad:?}"))?;
    Ok(format!("uncoordinated witness at seed {witness}; 0/1000 violations with sequencer"))
}

fn serializability() -> Outcome {
    let results = sweep(0..300, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=6usize);
        let people: BTreeSet<i64> = (1..=4).collect();
        let pids: Vec<i64> = (0..n).map(|_| rng.gen_range(1..=6)).collect();
        let count = rng.gen_range(0..=4);
        let mut s = Scenario::named(covid::NAME, seed);
        s.init = covid::init_people(&people.iter().copied().collect::<Vec<_>>(), count);
        s.workload = covid::vaccinate_requests(&pids, rng.gen_range(0..5));
        let f = run_ok(&s)?;
        let requests: Vec<(i64, i64)> = pids.iter().enumerate().map(|(i, p)| (1000 + i as i64, *p)).collect();
        let allowed = covid::serial_outcomes(&requests, &people, count);
        let got = covid::observed_outcome(&f, 0);
        ensure(allowed.contains(&got), || format!("seed {seed}: {got:?} matches no serial order"))
    });
    for r in results {
        r?;
    }
    Ok("300 seeds, up to 6 requests, all match a serial order".into())
}

fn availability_scenario(seed: u64, failed: &[usize]) -> Scenario {
    let w = covid::workload(seed);
    let mut s = covid::covid_tracker().scenario(&w, seed).with_azs(3);
    s.facets.availability = true;
    s.init = InitData {
        vars: BTreeMap::from([("vaccine_count".into(), Value::int(1))]),
        ..Default::default()
    };
    let pids: Vec<i64> = w
        .items
        .iter()
        .filter(|i| i.mailbox == "add_person")
        .filter_map(|i| i.payload["pid"].as_int())
        .take(2)
        .collect();
    s.workload.extend(covid::vaccinate_requests(&pids, 50));
    for (k, az) in failed.iter().enumerate() {
        s.failures.push(FailureSpec {
            tick: 6 + 20 * k as u64,
            domain: vec![format!("az{az}")],
        });
    }
    s
}

fn availability() -> Outcome {
    let pairs = [[0usize, 1], [0, 2], [1, 2]];
    let mut requests = 0;
    for pair in pairs {
        let results = sweep(0..30, |seed| {
            let f = run_ok(&availability_scenario(seed, &pair))?;
            ensure(f.responses.values().all(|n| *n == 1), || {
                format!("azs {pair:?} seed {seed}: response counts {:?}", f.responses)
            })?;
            Ok::<usize, String>(f.responses.len())
        });
        for r in results {
            requests += r?;
        }
    }
    let mut unanswered = 0;
    for seed in 0..10u64 {
        let f = run_ok(&availability_scenario(seed, &[0, 1, 2]))?;
        ensure(f.responses.values().all(|n| *n <= 1), || format!("duplicate response at seed {seed}"))?;
        unanswered += f.unanswered.len();
    }
    Ok(format!(
        "{requests} requests answered exactly once under every 2-AZ failure pair; {unanswered} unanswered with 3 AZs down"
    ))
}

fn scatter_outputs(n: i64, values: &[i64]) -> Result<Outputs, String> {
    let mut s = Scenario::named(mpi::NAME, 1);
    s.init = mpi::agents_init(n);
    let arr = Value::tuple(values.iter().map(|v| pact_core::lattice::Scalar::Int(*v)).collect());
    s.workload = vec![WorkItem::new(0, "mpi_scatter", [("req_id", Value::int(1)), ("arr", arr)])];
    Ok(run_ok(&s)?.outputs())
}

fn mpi_equivalence() -> Outcome {
    let chunks = scatter_outputs(4, &[1, 2, 3, 4, 5, 6, 7, 8])?;
    let want: Outputs = (0..4)
        .map(|a| {
            patterns::expect(
                "mpi_scatter_channel",
                serde_json::json!({ "agent_id": a, "req_id": 1, "subarray": [2 * a + 1, 2 * a + 2] }),
            )
        })
        .collect();
    ensure(chunks == want, || format!("len 8 over 4 agents: {chunks:?}"))?;
    let single = scatter_outputs(4, &[10, 20, 30, 40])?;
    let want: Outputs = (0..4)
        .map(|a| {
            patterns::expect(
                "mpi_scatter_channel",
                serde_json::json!({ "agent_id": a, "req_id": 1, "subarray": 10 * (a + 1) }),
            )
        })
        .collect();
    ensure(single == want, || format!("len 4 over 4 agents: {single:?}"))?;

    let p = mpi::mpi_collectives();
    let results = sweep(0..50, |seed| {
        let w = mpi::sized_workload(seed, 64);
        let f = run_ok(&p.scenario(&w, seed))?;
        let got = p.observe(&f.outputs());
        ensure(got == (p.oracle)(&w), || format!("seed {seed}: collectives differ from sequential folds"))
    });
    for r in results {
        r?;
    }
    Ok("scatter chunking exact; 50 seeds up to 64 agents match sequential folds".into())
}

fn transitive_closure() -> Outcome {
    let p = reach::transitive_closure();
    let graph = pact_core::lowering::lower_single(&p.program).map_err(|e| e.to_string())?;
    let (mut naive_total, mut semi_total) = (0, 0);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let edges = reach::random_graph(&mut rng);
        let oracle = reach::closure(&edges);
        let src = edges.iter().next().map(|e| e.0).unwrap_or(0);
        let mut results = Vec::new();
        for naive in [true, false] {
            let mut t = if naive {
                Transducer::interpreter(p.program.clone(), p.udfs.clone()).map_err(|e| e.to_string())?
            } else {
                Transducer::graph(p.program.clone(), graph.clone(), p.udfs.clone())
            };
            for (a, b) in &edges {
                let row = Value::row([("src", Value::int(*a)), ("dst", Value::int(*b))]);
                t.state_mut()
                    .load_row("edges", row.as_row().unwrap().clone())
                    .map_err(|e| e.to_string())?;
            }
            let ask = Value::row([("src", Value::int(src)), ("message_id", Value::int(1)), ("reply_to", Value::str("c"))]);
            let r = t
                .tick(vec![Message::new("reachable", ask.as_row().unwrap().clone())])
                .map_err(|e| e.to_string())?;
            let payload = r.outbound[0].row["payload"].to_json();
            results.push((payload, r.iterations));
        }
        let want: Vec<i64> = oracle.iter().filter(|(a, _)| *a == src).map(|(_, b)| *b).collect();
        let want = serde_json::json!({ "$set": want });
        ensure(results[0].0 == want && results[1].0 == want, || format!("seed {seed}: closure differs from BFS"))?;
        ensure(results[1].1 <= results[0].1, || {
            format!("seed {seed}: semi-naive {} rounds > naive {}", results[1].1, results[0].1)
        })?;
        naive_total += results[0].1;
        semi_total += results[1].1;
    }
    Ok(format!("100 graphs match BFS; rounds semi-naive {semi_total} <= naive {naive_total}"))
}

fn lowering_round_trip() -> Outcome {
    let mut runs = 0;
    for p in patterns::all() {
        let results = sweep(0..50, |seed| {
            let w = (p.workload)(seed);
            let mut finals = Vec::new();
            for engine in [EngineKind::Interpreter, EngineKind::Graph] {
                let mut s = p.scenario(&w, seed);
                s.engine = engine;
                let f = run_ok(&s)?;
                let states: Vec<serde_json::Value> = f.nodes.iter().map(|n| n.state.clone()).collect();
                finals.push((states, f.clients, f.tick));
            }
            ensure(finals[0] == finals[1], || format!("{} seed {seed}: engines disagree", p.name))
        });
        for r in results {
            r?;
            runs += 1;
        }
    }
    Ok(format!("{runs} pattern runs identical under both engines"))
}

fn random_problem(rng: &mut ChaCha8Rng, objective: Objective) -> Problem {
    let features = ["GPU", "SSD"];
    let pick = |rng: &mut ChaCha8Rng, p: f64| -> BTreeSet<String> {
        features.iter().filter(|_| rng.gen_bool(p)).map(|s| s.to_string()).collect()
    };
    let machines = (0..rng.gen_range(1..=3u8))
        .map(|i| planner::MachineType {
            name: format!("type{i}"),
            price: rng.gen_range(1..=20) as f64 / 10.0,
            features: pick(rng, 0.5),
            capacity: rng.gen_range(1..=4) as f64,
        })
        .collect();
    let handlers = (0..rng.gen_range(1..=4))
        .map(|i| planner::HandlerTarget {
            name: format!("h{i}"),
            latency_ms: rng.gen_bool(0.8).then(|| rng.gen_range(20..=200) as f64),
            cost: rng.gen_bool(0.6).then(|| rng.gen_range(1..=80) as f64 / 10.0),
            features: pick(rng, 0.2),
            load: rng.gen_range(1..=3) as f64,
        })
        .collect();
    let mut p = Problem::new(machines, handlers, objective);
    p.n_max = 5;
    p
}

fn planner_optimality() -> Outcome {
    let objectives = [
        Objective::MinimizeMachines,
        Objective::MaximizeThroughput,
        Objective::MinimizeCostOverWindow { window: 2.0 },
    ];
    let (mut feasible, mut total) = (0, 0);
    for objective in objectives {
        for seed in 0..500u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_problem(&mut rng, objective);
            total += 1;
            match (planner::solve(&p), planner::solve_exhaustive(&p, &p.model)) {
                (Ok(a), Ok(b)) => {
                    ensure(a.objective == b.objective, || format!("seed {seed} {objective:?}: {a:?} vs {b:?}"))?;
                    planner::verify(&p, &p.model, &a)?;
                    feasible += 1;
                }
                (Err(PlanError::Infeasible(_)), Err(PlanError::Infeasible(_))) => {}
                (a, b) => return Err(format!("seed {seed} {objective:?}: {a:?} vs {b:?}")),
            }
        }
    }
    let tracker = covid::program();
    let p = Problem::from_program(&tracker, planner::sample_catalog(), Objective::MinimizeMachines);
    let plan = planner::solve(&p).map_err(|e| e.to_string())?;
    ensure(plan.assignment.get("likelihood").map(String::as_str) == Some("gpu"), || {
        "likelihood not on the GPU type".into()
    })?;
    let cpu_only: Vec<_> = planner::sample_catalog().into_iter().filter(|m| m.name != "gpu").collect();
    let p = Problem::from_program(&tracker, cpu_only, Objective::MinimizeMachines);
    match planner::solve(&p) {
        Err(PlanError::Infeasible(inf))
            if inf.violations.iter().any(|v| matches!(v.violation, Violation::Feature { .. })) => {}
        other => return Err(format!("without GPU: {other:?}")),
    }
    Ok(format!(
        "{total} instances ({feasible} feasible) match enumeration; tracker feasible with GPU, infeasible without"
    ))
}

fn determinism_scenarios() -> Vec<Scenario> {
    let mut out = Vec::new();
    for p in patterns::all() {
        let w = (p.workload)(3);
        let mut s = p.scenario(&w, 3);
        s.network.dup_prob = 0.3;
        s.dump_state_each_tick = true;
        out.push(s);
    }
    let mut s = availability_scenario(5, &[1, 2]);
    s.network.dup_prob = 0.2;
    out.push(s);
    out
}

fn determinism() -> Outcome {
    let scenarios = determinism_scenarios();
    for s in &scenarios {
        let a = simulate(s).map_err(|e| e.to_string())?;
        let b = simulate(s).map_err(|e| e.to_string())?;
        let state = |r: &pact_core::sim::Run| r.result.as_ref().map(FinalState::to_json_pretty).map_err(|e| e.to_string());
        ensure(trace_jsonl(&a.trace) == trace_jsonl(&b.trace), || "traces differ".into())?;
        ensure(state(&a)? == state(&b)?, || "state dumps differ".into())?;
    }
    Ok(format!("{} scenarios byte-identical across reruns", scenarios.len()))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 10] = [
        ("lattice laws", lattice_laws, Some(Duration::from_secs(10))),
        ("CALM confluence", calm_confluence, Some(Duration::from_secs(60))),
        ("CALM negative witness", calm_negative_witness, None),
        ("serializability", serializability, None),
        ("availability", availability, None),
        ("MPI oracle equivalence", mpi_equivalence, None),
        ("transitive closure", transitive_closure, None),
        ("lowering round-trip", lowering_round_trip, None),
        ("planner optimality", planner_optimality, None),
        ("determinism", determinism, None),
    ];
    let mut failed = Vec::new();
    for (i, (name, f, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let mut outcome = f();
        let took = start.elapsed();
        if let (Ok(_), Some(limit)) = (&outcome, limit) {
            if took > limit {
                outcome = Err(format!("took {took:.1?}, limit {limit:?}"));
            }
        }
        match &outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({took:.1?})", i + 1),
            Err(e) => {
                println!("FAIL {:>2} {name}: {e} ({took:.1?})", i + 1);
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
