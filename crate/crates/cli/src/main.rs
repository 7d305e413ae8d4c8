use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pact_core::analysis::calm_report;
use pact_core::ir::{validate, Program};
use pact_core::patterns;
use pact_core::planner::{self, MachineType, Objective, PlanError, Problem};
use pact_core::sim::scenario::Scenario;
use pact_core::sim::{sweep, trace_jsonl, Cluster, SimError};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NO_QUIESCENCE: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

#[derive(Parser)]
#[command(name = "pact", version, about = "Analyze, simulate and plan deployments of pact programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify every handler as coordination-free or not.
    Analyze {
        /// Bundled pattern name or path to a program JSON file.
        program: String,
        /// Print a table instead of JSON.
        #[arg(long)]
        table: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario to quiescence and print the final state.
    Simulate {
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the final state here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the lowering/replication/sequencer plan (stderr without a path).
        #[arg(long, num_args = 0..=1)]
        dump_plan: Option<Option<PathBuf>>,
        /// Record operator inspection points in the trace.
        #[arg(long)]
        inspect: bool,
        /// Run N consecutive seeds and report whether the final states agree.
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Pick machine types and instance counts for each handler.
    Plan {
        /// Problem JSON file.
        problem: Option<PathBuf>,
        /// Build the problem from a bundled pattern's target facets.
        #[arg(long, conflicts_with = "problem")]
        pattern: Option<String>,
        /// Machine catalog JSON (defaults to the sample CPU/GPU catalog).
        #[arg(long, requires = "pattern")]
        catalog: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "min-machines", requires = "pattern")]
        objective: ObjectiveArg,
        /// Window length for min-cost.
        #[arg(long, default_value_t = 1.0)]
        window: f64,
        #[arg(long)]
        n_max: Option<u32>,
    },
    /// List the bundled example programs.
    ListPatterns,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    MinMachines,
    MaxThroughput,
    MinCost,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Failure {
        Failure::validation(format!("{}: {e}", path.display()))
    }
}

type CmdResult = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure {
            code: 1,
            message: format!("{}: {e}", p.display()),
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn with_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

fn load_program(arg: &str) -> Result<Program, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        let text = read(path)?;
        return Program::from_json(&text).map_err(|e| Failure::validation(format!("{arg}: {e}")));
    }
    patterns::by_name(arg)
        .map(|p| (*p.program).clone())
        .ok_or_else(|| Failure::validation(format!("{arg}: no such file or bundled pattern")))
}

fn analyze(program: &str, table: bool, out: Option<&Path>) -> CmdResult {
    let p = load_program(program)?;
    let report = validate(&p);
    if !report.is_clean() {
        println!("{}", serde_json::to_string_pretty(&report).expect("report encodes"));
        return Err(Failure::validation(format!("{}: {} validation error(s)", p.name, report.errors.len())));
    }
    for w in &report.warnings {
        eprintln!("warning: {}: {}", w.location, w.message);
    }
    let calm = calm_report(&p);
    let text = if table { calm.to_table() } else { calm.to_json_pretty() };
    emit(out, &with_newline(text))
}

fn sim_failure(e: SimError) -> Failure {
    let code = match e {
        SimError::NoQuiescence(_) => EXIT_NO_QUIESCENCE,
        _ => EXIT_VALIDATION,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

struct SimulateArgs {
    scenario: PathBuf,
    seed: Option<u64>,
    trace: Option<PathBuf>,
    out: Option<PathBuf>,
    dump_plan: Option<Option<PathBuf>>,
    inspect: bool,
    seeds: Option<u64>,
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let text = read(&a.scenario)?;
    let mut scenario = Scenario::from_json(&text).map_err(|e| Failure::validation(format!("{}: {e}", a.scenario.display())))?;
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    scenario.inspect |= a.inspect;
    if let Some(n) = a.seeds {
        return confluence_sweep(&scenario, n, a.out.as_deref());
    }

    let mut cluster = Cluster::new(scenario).map_err(sim_failure)?;
    if let Some(dest) = &a.dump_plan {
        let plan = with_newline(serde_json::to_string_pretty(&cluster.plan_json()).expect("plan encodes"));
        match dest {
            Some(p) => emit(Some(p), &plan)?,
            None => eprint!("{plan}"),
        }
    }
    let result = cluster.run_to_quiescence();
    if let Some(p) = &a.trace {
        emit(Some(p), &trace_jsonl(cluster.trace()))?;
    }
    let state = result.map_err(sim_failure)?;
    for id in &state.unanswered {
        eprintln!("unanswered request {id}");
    }
    emit(a.out.as_deref(), &with_newline(state.to_json_pretty()))
}

fn confluence_sweep(scenario: &Scenario, n: u64, out: Option<&Path>) -> CmdResult {
    let base = scenario.seed;
    let runs = sweep(base..base + n, |seed| {
        let mut s = scenario.clone();
        s.seed = seed;
        if s.workload_seed.is_none() {
            s.workload_seed = Some(base);
        }
        let mut c = Cluster::new(s)?;
        let f = c.run_to_quiescence()?;
        let states: Vec<serde_json::Value> = f.live_states().into_iter().cloned().collect();
        Ok::<_, SimError>((states, f.outputs()))
    });
    let mut first = None;
    let mut divergent = Vec::new();
    for (i, r) in runs.into_iter().enumerate() {
        let r = r.map_err(sim_failure)?;
        match &first {
            None => first = Some(r),
            Some(f) if *f != r => divergent.push(base + i as u64),
            Some(_) => {}
        }
    }
    let report = serde_json::json!({
        "seeds": n,
        "first_seed": base,
        "confluent": divergent.is_empty(),
        "divergent_seeds": divergent,
    });
    emit(out, &with_newline(serde_json::to_string_pretty(&report).expect("report encodes")))
}

struct PlanArgs {
    problem: Option<PathBuf>,
    pattern: Option<String>,
    catalog: Option<PathBuf>,
    objective: ObjectiveArg,
    window: f64,
    n_max: Option<u32>,
}

fn build_problem(a: &PlanArgs) -> Result<Problem, Failure> {
    if let Some(path) = &a.problem {
        let text = read(path)?;
        return Problem::from_json(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())));
    }
    let Some(name) = &a.pattern else {
        return Err(Failure::validation("plan needs a problem file or --pattern"));
    };
    let program = load_program(name)?;
    let machines: Vec<MachineType> = match &a.catalog {
        Some(path) => serde_json::from_str(&read(path)?)
            .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?,
        None => planner::sample_catalog(),
    };
    let objective = match a.objective {
        ObjectiveArg::MinMachines => Objective::MinimizeMachines,
        ObjectiveArg::MaxThroughput => Objective::MaximizeThroughput,
        ObjectiveArg::MinCost => Objective::MinimizeCostOverWindow { window: a.window },
    };
    Ok(Problem::from_program(&program, machines, objective))
}

fn plan(a: PlanArgs) -> CmdResult {
    let mut problem = build_problem(&a)?;
    if let Some(n) = a.n_max {
        problem.n_max = n;
    }
    match planner::solve(&problem) {
        Ok(plan) => {
            eprint!("{}", plan.table());
            println!("{}", serde_json::to_string_pretty(&plan).expect("plan encodes"));
            Ok(())
        }
        Err(PlanError::Infeasible(inf)) => {
            let req = planner::backtrack_signal(&inf);
            println!("{}", serde_json::to_string_pretty(&req).expect("request encodes"));
            Err(Failure {
                code: EXIT_INFEASIBLE,
                message: format!("infeasible: {} constraint violation(s)", inf.violations.len()),
            })
        }
        Err(e) => Err(Failure::validation(e.to_string())),
    }
}

fn list_patterns() -> CmdResult {
    for p in patterns::all() {
        let handlers: Vec<&str> = p.program.handlers.iter().map(|h| h.name.as_str()).collect();
        println!("{:<20} {}", p.name, handlers.join(" "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze { program, table, out } => analyze(&program, table, out.as_deref()),
        Command::Simulate {
            scenario,
            seed,
            trace,
            out,
            dump_plan,
            inspect,
            seeds,
        } => simulate(SimulateArgs {
            scenario,
            seed,
            trace,
            out,
            dump_plan,
            inspect,
            seeds,
        }),
        Command::Plan {
            problem,
            pattern,
            catalog,
            objective,
            window,
            n_max,
        } => plan(PlanArgs {
            problem,
            pattern,
            catalog,
            objective,
            window,
            n_max,
        }),
        Command::ListPatterns => list_patterns(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
