//! The five workflows behind the subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rabsde_core::comparison::{iterate_sequence, run_comparison, ComparisonCase, ComparisonError};
use rabsde_core::generate::{random_comparison_pair, random_pair_shape, random_scenario, ScenarioShape};
use rabsde_core::driver::DriverForm;
use rabsde_core::oracle::BinomialPut;
use rabsde_core::solver::{solve_backward_with, solve_picard, PicardOptions, SolveOptions};
use rabsde_core::stopping::stopping_report;
use rabsde_core::validate::validate_solution;
use rabsde_core::{Exec, NodeId, Scenario, Scheme, Solution, SolveError};
use serde_json::{Map, Value};

use crate::file::{load_scenario, LoadError, ScenarioFile};
use crate::json::{num, nums, obj};
use crate::report::{write_nodes, Check, Report};
use crate::CliError;

/// Iterates of the comparison sequence computed by `compare`.
pub const ITERATES: usize = 30;
/// Distance between the last iterate and the direct solution.
pub const ITERATE_LIMIT_TOL: f64 = 1e-8;
const PICARD_MAX_ITER: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Picard,
    Stopping,
    Compare,
    Suite,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Picard => "picard",
            Command::Stopping => "stopping",
            Command::Compare => "compare",
            Command::Suite => "suite",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub command: Command,
    pub scenario: Option<PathBuf>,
    pub scenario2: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub tol: f64,
    pub seed: Option<u64>,
    pub crr: bool,
    pub timing: bool,
    pub cases: usize,
    pub exec: Exec,
}

impl RunOptions {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            scenario: None,
            scenario2: None,
            out: None,
            format: Format::Json,
            tol: 1e-10,
            seed: None,
            crr: false,
            timing: false,
            cases: 200,
            exec: Exec::Parallel,
        }
    }
}

/// A finished run: the report, the solution to dump as CSV, and whether the
/// inputs failed validation (as opposed to a numerical check failing).
#[derive(Debug, Clone)]
pub struct Output {
    pub report: Report,
    pub nodes: Option<(Solution, Scenario)>,
    pub invalid: bool,
}

impl Output {
    pub fn exit_code(&self) -> i32 {
        if self.invalid {
            2
        } else if self.report.passed() {
            0
        } else {
            3
        }
    }
}

fn load(path: &Option<PathBuf>, flag: &str) -> Result<ScenarioFile, CliError> {
    let path = path.as_ref().ok_or_else(|| CliError::Usage(format!("{flag} is required")))?;
    load_scenario(path).map_err(|e| match e {
        LoadError::Io(source) => CliError::Io { path: path.clone(), source },
        LoadError::Invalid(errors) => CliError::Invalid { path: path.clone(), errors },
    })
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn node_json(node: NodeId) -> Value {
    serde_json::to_value(node).expect("node ids serialize")
}

struct Clock {
    on: bool,
    entries: Vec<(String, f64)>,
}

impl Clock {
    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        if self.on {
            self.entries.push((name.into(), start.elapsed().as_secs_f64()));
        }
        out
    }
}

pub fn run(opts: &RunOptions) -> Result<Output, CliError> {
    if opts.command == Command::Suite && opts.format == Format::Csv {
        return Err(CliError::Usage("suite has no node dump; use --format json".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(CliError::Usage("--tol must be positive".into()));
    }
    let mut clock = Clock { on: opts.timing, entries: Vec::new() };
    let mut out = match opts.command {
        Command::Solve => run_solve(opts, &mut clock)?,
        Command::Picard => run_picard(opts, &mut clock)?,
        Command::Stopping => run_stopping(opts, &mut clock)?,
        Command::Compare => run_compare(opts, &mut clock)?,
        Command::Suite => run_suite(opts, &mut clock)?,
    };
    out.report.timing = clock.entries;
    Ok(out)
}

/// Write the report (or node dump) to `path`, or to stdout without one.
pub fn emit(output: &Output, format: Format, path: Option<&Path>) -> Result<(), CliError> {
    let bytes = match format {
        Format::Json => output.report.to_text().into_bytes(),
        Format::Csv => {
            let (sol, sc) = output
                .nodes
                .as_ref()
                .ok_or_else(|| CliError::Usage("this run has no solution to dump".into()))?;
            let mut buf = Vec::new();
            write_nodes(sol, sc, &mut buf).map_err(|e| CliError::Numerical(e.to_string()))?;
            buf
        }
    };
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|source| CliError::Io { path: p.to_path_buf(), source }),
        None => {
            use std::io::Write;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(&bytes)
                .and_then(|_| lock.flush())
                .map_err(|source| CliError::Io { path: PathBuf::from("<stdout>"), source })
        }
    }
}

fn scenario_section(file: &ScenarioFile, seed: Option<u64>) -> Value {
    let mut v = crate::file::scenario_to_json(file);
    if let (Value::Object(m), Some(s)) = (&mut v, seed) {
        m.insert("seed".into(), Value::from(s));
    }
    v
}

/// `(min, max)` of `K_T` over paths with positive probability.
fn k_terminal_range(sol: &Solution, sc: &Scenario) -> (f64, f64) {
    let lat = &sc.lattice;
    let n = lat.n_steps();
    let mut lo: Vec<f64> = sol.dk.step(n).map(<[f64]>::to_vec).unwrap_or_default();
    let mut hi = lo.clone();
    for k in (0..n).rev() {
        let dk = sol.dk.step(k).expect("full field");
        let (mut l, mut h) = (Vec::with_capacity(dk.len()), Vec::with_capacity(dk.len()));
        for (i, d) in dk.iter().enumerate() {
            let edges = lat.transition(k, i);
            let live = edges.edges().iter().filter(|e| e.prob > 0.0);
            l.push(d + live.clone().map(|e| lo[e.child]).fold(f64::INFINITY, f64::min));
            h.push(d + live.map(|e| hi[e.child]).fold(f64::NEG_INFINITY, f64::max));
        }
        lo = l;
        hi = h;
    }
    (lo[0], hi[0])
}

fn solution_summary(sol: &Solution, sc: &Scenario) -> Value {
    let (k_min, k_max) = k_terminal_range(sol, sc);
    let d = &sol.diagnostics;
    obj([
        ("y0", num(sol.y0())),
        (
            "k_terminal",
            obj([
                ("mean", num(d.expected_dk.iter().sum())),
                ("min", num(k_min)),
                ("max", num(k_max)),
            ]),
        ),
        ("expected_dk", nums(&d.expected_dk)),
        ("max_abs_psi", num(d.max_abs_psi)),
        ("max_cross_term", num(d.max_cross_term)),
        ("max_inner_iterations", Value::from(d.max_inner_iterations as u64)),
        ("nodes", Value::from((0..=sc.n_steps()).map(|k| sc.lattice.node_count(k) as u64).sum::<u64>())),
    ])
}

fn add_validation(report: &mut Report, sol: &Solution, sc: &Scenario, tol: f64, prefix: &str) {
    let v = validate_solution(sol, sc);
    let mut m = Map::new();
    for c in v.conditions() {
        m.insert(
            c.name.into(),
            obj([
                ("max_violation", num(c.max_violation)),
                ("worst_node", c.worst_node.map_or(Value::Null, node_json)),
                ("flagged", Value::from(c.flagged.len() as u64)),
            ]),
        );
        report.check(Check::at_most(format!("{prefix}validation.{}", c.name), c.max_violation, tol));
    }
    m.insert("driver_square_sum".into(), num(v.driver_square_sum));
    report.section(&format!("{prefix}validation"), Value::Object(m));
}

fn solve(sc: &Scenario, exec: Exec) -> Result<Solution, CliError> {
    solve_backward_with(sc, SolveOptions { exec, ..SolveOptions::default() }).map_err(numerical)
}

fn run_solve(opts: &RunOptions, clock: &mut Clock) -> Result<Output, CliError> {
    let file = load(&opts.scenario, "--scenario")?;
    let sc = &file.scenario;
    let mut report = Report::new("solve");
    report.section("scenario", scenario_section(&file, opts.seed.or(file.seed)));
    let sol = clock.time("solve", || solve(sc, opts.exec))?;
    report.section("summary", solution_summary(&sol, sc));
    if file.outputs.iter().any(|o| o == "validation") {
        clock.time("validate", || add_validation(&mut report, &sol, sc, opts.tol, ""));
    }
    if opts.crr {
        let spec = file.oracle.ok_or_else(|| {
            CliError::Usage("--oracle crr needs an \"oracle\" section with rate and strike in the scenario file".into())
        })?;
        let put = BinomialPut { horizon: sc.lattice.horizon(), n_steps: sc.n_steps(), rate: spec.rate, strike: spec.strike };
        let price = put.price();
        let gap = (price - sol.y0()).abs();
        report.section("oracle", obj([("kind", Value::from("crr")), ("price", num(price)), ("gap", num(gap))]));
        report.check(Check::at_most("oracle.crr_gap", gap, opts.tol));
    }
    if file.outputs.iter().any(|o| o == "stopping") {
        clock.time("stopping", || add_stopping(&mut report, &sol, sc, opts))?;
    }
    if file.outputs.iter().any(|o| o == "picard") {
        clock.time("picard", || add_picard(&mut report, &sol, sc, opts))?;
    }
    Ok(Output { report, nodes: Some((sol, file.scenario.clone())), invalid: false })
}

fn add_picard(report: &mut Report, backward: &Solution, sc: &Scenario, opts: &RunOptions) -> Result<Solution, CliError> {
    // The weighted norm is a squared quantity; `--tol` bounds its root.
    let mut p = PicardOptions::for_scenario(sc, 1.0, opts.tol * opts.tol, PICARD_MAX_ITER).map_err(numerical)?;
    p.exec = opts.exec;
    let (solution, history) = match solve_picard(sc, p) {
        Ok(o) => (Some(o.solution), o.history),
        Err(SolveError::MaxIter { history }) => (None, history),
        Err(e) => return Err(numerical(e)),
    };
    let distances: Vec<f64> = history.iter().map(|d| d.sqrt()).collect();
    let decreasing = distances.windows(2).all(|w| w[1] <= w[0]);
    let last = distances.last().copied().unwrap_or(f64::INFINITY);
    let mut section = Map::new();
    section.insert("beta".into(), num(p.beta));
    section.insert("iterations".into(), Value::from(history.len() as u64));
    section.insert("distances".into(), nums(&distances));
    section.insert("converged".into(), Value::from(solution.is_some()));
    report.check(Check::at_most("picard.final_distance", last, opts.tol));
    report.check(Check::flag("picard.distances_decreasing", decreasing));
    let Some(solution) = solution else {
        report.section("picard", Value::Object(section));
        return Ok(backward.clone());
    };
    // Away from the fixed point by at most the last step (contraction factor
    // at most one half), read off the Y part of the weighted norm.
    let lat = &sc.lattice;
    let law = lat.root_law();
    let mut min_weight = f64::INFINITY;
    for (k, row) in law.iter().enumerate().take(lat.n_steps()) {
        for &q in row.iter().filter(|&&q| q > 0.0) {
            min_weight = min_weight.min((p.beta * lat.time(k)).exp() * lat.dt() * q * p.beta);
        }
    }
    let bound = last / min_weight.sqrt() + 1e-12;
    let gap = solution.y.max_abs_diff_reachable(&backward.y, lat);
    section.insert("backward_gap".into(), num(gap));
    report.section("picard", Value::Object(section));
    report.check(Check::at_most("picard.backward_gap", gap, bound));
    Ok(solution)
}

fn run_picard(opts: &RunOptions, clock: &mut Clock) -> Result<Output, CliError> {
    let file = load(&opts.scenario, "--scenario")?;
    let sc = &file.scenario;
    let mut report = Report::new("picard");
    report.section("scenario", scenario_section(&file, opts.seed.or(file.seed)));
    let backward = clock.time("solve", || solve(sc, opts.exec))?;
    report.section("summary", solution_summary(&backward, sc));
    let picard = clock.time("picard", || add_picard(&mut report, &backward, sc, opts))?;
    Ok(Output { report, nodes: Some((picard, file.scenario.clone())), invalid: false })
}

fn add_stopping(report: &mut Report, sol: &Solution, sc: &Scenario, opts: &RunOptions) -> Result<(), CliError> {
    let r = stopping_report(sol, sc, opts.exec).map_err(numerical)?;
    report.section(
        "stopping",
        obj([
            ("snell", num(r.snell)),
            ("brute_force", r.brute_force.map_or(Value::Null, num)),
            ("gap", if r.brute_force.is_some() { num(r.gap) } else { Value::Null }),
            ("tau_payoff_first_hit", num(r.tau_payoff_first_hit)),
            ("tau_payoff_k_increase", num(r.tau_payoff_k_increase)),
            ("tau_disagreements", Value::Array(r.tau_disagreements.iter().copied().map(node_json).collect())),
            (
                "running_max",
                obj([
                    ("paths", Value::from(r.running_max.paths as u64)),
                    ("gap", num(r.running_max.gap)),
                    ("literal_gap", num(r.running_max.literal_gap)),
                ]),
            ),
        ]),
    );
    if r.brute_force.is_some() {
        report.check(Check::at_most("stopping.brute_force_gap", r.gap, opts.tol));
    }
    report.check(Check::at_most("stopping.first_hit_gap", (r.tau_payoff_first_hit - r.snell).abs(), opts.tol));
    report.check(Check::at_most("stopping.k_increase_gap", (r.tau_payoff_k_increase - r.snell).abs(), opts.tol));
    report.check(Check::at_most("stopping.running_max_gap", r.running_max.gap, opts.tol));
    Ok(())
}

fn run_stopping(opts: &RunOptions, clock: &mut Clock) -> Result<Output, CliError> {
    let file = load(&opts.scenario, "--scenario")?;
    let sc = &file.scenario;
    let mut report = Report::new("stopping");
    report.section("scenario", scenario_section(&file, opts.seed.or(file.seed)));
    let sol = clock.time("solve", || solve(sc, opts.exec))?;
    report.section("summary", solution_summary(&sol, sc));
    clock.time("stopping", || add_stopping(&mut report, &sol, sc, opts))?;
    Ok(Output { report, nodes: Some((sol, file.scenario.clone())), invalid: false })
}

/// Hypotheses, verdict and (with a lag) the iterate sequence for one pair.
/// Returns whether the hypotheses held.
fn add_comparison(report: &mut Report, case: &ComparisonCase, opts: &RunOptions, prefix: &str) -> Result<bool, CliError> {
    let h = case.hypotheses();
    let hyp = serde_json::to_value(h).expect("reports serialize");
    let mut section = Map::new();
    section.insert("hypotheses".into(), hyp);
    section.insert("hypotheses_hold".into(), Value::from(h.all()));
    if !h.all() {
        report.section(&format!("{prefix}comparison"), Value::Object(section));
        return Ok(false);
    }
    let verdict = run_comparison(case, opts.exec).map_err(numerical)?;
    section.insert(
        "verdict".into(),
        obj([("min_gap", num(verdict.min_gap)), ("worst_node", node_json(verdict.worst_node))]),
    );
    report.check(Check::at_least(format!("{prefix}comparison.min_gap"), verdict.min_gap, -opts.tol));
    if !case.is_plain() && h.theta_second.holds {
        match iterate_sequence(case, ITERATES, opts.exec) {
            Ok(trace) => {
                let limit = trace.limit_error();
                section.insert(
                    "iterates".into(),
                    obj([("sup_diffs", nums(&trace.sup_diffs)), ("limit_error", num(limit))]),
                );
                report.check(Check::flag(format!("{prefix}comparison.iterates_decrease"), true));
                report.check(Check::at_most(format!("{prefix}comparison.iterate_limit"), limit, ITERATE_LIMIT_TOL));
            }
            Err(ComparisonError::Monotonicity { iterate, node, excess }) => {
                section.insert(
                    "iterates".into(),
                    obj([
                        ("increase_at_iterate", Value::from(iterate as u64)),
                        ("node", node_json(node)),
                        ("excess", num(excess)),
                    ]),
                );
                report.check(Check::flag(format!("{prefix}comparison.iterates_decrease"), false));
            }
            Err(e) => return Err(numerical(e)),
        }
    }
    report.section(&format!("{prefix}comparison"), Value::Object(section));
    Ok(true)
}

fn comparison_case(a: &ScenarioFile, b: &ScenarioFile) -> Result<ComparisonCase, CliError> {
    ComparisonCase::new(a.scenario.clone(), b.scenario.clone()).map_err(|e| match e {
        ComparisonError::Incompatible(why) => CliError::Usage(format!("scenarios cannot be compared: {why}")),
        other => numerical(other),
    })
}

fn run_compare(opts: &RunOptions, clock: &mut Clock) -> Result<Output, CliError> {
    let first = load(&opts.scenario, "--scenario")?;
    let second = load(&opts.scenario2, "--scenario2")?;
    let case = comparison_case(&first, &second)?;
    let mut report = Report::new("compare");
    report.section("scenario", scenario_section(&first, opts.seed.or(first.seed)));
    report.section("scenario2", scenario_section(&second, opts.seed.or(second.seed)));
    let held = clock.time("compare", || add_comparison(&mut report, &case, opts, ""))?;
    let sol = solve(&first.scenario, opts.exec)?;
    Ok(Output { report, nodes: Some((sol, first.scenario.clone())), invalid: !held })
}

#[derive(Debug, Clone, Default)]
struct CaseOutcome {
    admissible: bool,
    min_gap: f64,
    validation: f64,
    error: Option<String>,
}

fn suite_case(seed: u64) -> CaseOutcome {
    let mut out = CaseOutcome { min_gap: f64::INFINITY, ..CaseOutcome::default() };
    let shape = random_pair_shape(seed);
    let single = ScenarioShape { n_steps: shape.n_steps, lambda: shape.lambda, form: DriverForm::H, scheme: Scheme::Explicit };
    let result = (|| -> Result<(), String> {
        let sc = random_scenario(seed, single).map_err(|e| e.to_string())?;
        let sol = solve_backward_with(&sc, SolveOptions { exec: Exec::Sequential, ..SolveOptions::default() })
            .map_err(|e| e.to_string())?;
        out.validation = validate_solution(&sol, &sc).max_violation();
        let (a, b) = random_comparison_pair(seed, shape).map_err(|e| e.to_string())?;
        let case = ComparisonCase::new(a, b).map_err(|e| e.to_string())?;
        if case.hypotheses().all() {
            out.admissible = true;
            out.min_gap = run_comparison(&case, Exec::Sequential).map_err(|e| e.to_string())?.min_gap;
        }
        Ok(())
    })();
    if let Err(e) = result {
        out.error = Some(e);
    }
    out
}

fn run_suite(opts: &RunOptions, clock: &mut Clock) -> Result<Output, CliError> {
    let mut report = Report::new("suite");
    let mut seed = opts.seed;
    let mut invalid = false;
    if opts.scenario.is_some() || opts.scenario2.is_some() {
        let first = load(&opts.scenario, "--scenario")?;
        let second = load(&opts.scenario2, "--scenario2")?;
        seed = seed.or(first.seed);
        let case = comparison_case(&first, &second)?;
        report.section("scenario", scenario_section(&first, None));
        report.section("scenario2", scenario_section(&second, None));
        invalid = !clock.time("file_pair", || add_comparison(&mut report, &case, opts, "file_pair."))?;
    }
    let base = seed.unwrap_or(0);
    let outcomes = clock.time("generated", || {
        opts.exec.map(opts.cases, |i| suite_case(base.wrapping_add(i as u64)))
    });
    let admissible: Vec<&CaseOutcome> = outcomes.iter().filter(|o| o.admissible).collect();
    let min_gap = admissible.iter().map(|o| o.min_gap).fold(f64::INFINITY, f64::min);
    let worst_validation = outcomes.iter().map(|o| o.validation).fold(0.0, f64::max);
    let failing: Vec<Value> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, o)| o.error.is_some() || o.validation > opts.tol || (o.admissible && o.min_gap < -opts.tol))
        .map(|(i, o)| {
            obj([
                ("seed", Value::from(base.wrapping_add(i as u64))),
                ("error", o.error.clone().map_or(Value::Null, Value::from)),
            ])
        })
        .collect();
    let errors = outcomes.iter().filter(|o| o.error.is_some()).count();
    report.section(
        "suite",
        obj([
            ("seed", Value::from(base)),
            ("cases", Value::from(opts.cases as u64)),
            ("admissible", Value::from(admissible.len() as u64)),
            ("min_gap", if admissible.is_empty() { Value::Null } else { num(min_gap) }),
            ("max_validation_violation", num(worst_validation)),
            ("errors", Value::from(errors as u64)),
            ("failing", Value::Array(failing)),
        ]),
    );
    if !admissible.is_empty() {
        report.check(Check::at_least("suite.comparison_min_gap", min_gap, -opts.tol));
    }
    report.check(Check::at_most("suite.validation", worst_validation, opts.tol));
    report.check(Check::at_most("suite.errors", errors as f64, 0.0));
    Ok(Output { report, nodes: None, invalid })
}
