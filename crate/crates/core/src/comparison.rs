//! Comparison of two reflected anticipated equations on a shared lattice:
//! grid checks of the hypotheses, the node-wise verdict, and the monotone
//! iterate sequence that proves it.
//!
//! Drivers are compared in `M`-form, `g = f - lambda (1 - h) u` for an
//! `H`-form `f`, since that is the driver the discrete scheme integrates.

use serde::Serialize;
use thiserror::Error;

use crate::driver::{describe, eval_checked, DriverExpr, Env, EvalError, LipschitzError, Var};
use crate::lattice::{NodeId, ProcessField};
use crate::par::Exec;
use crate::scenario::{Scenario, ScenarioError};
use crate::solver::{solve_backward_with, solve_with_anticipation, Route, Solution, SolveError, SolveOptions};

/// Tolerance for all comparison inequalities.
pub const COMPARISON_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComparisonError {
    #[error(transparent)]
    Grid(#[from] LipschitzError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("scenarios are not comparable: {0}")]
    Incompatible(&'static str),
    #[error("hypotheses do not hold: {0:?}")]
    HypothesisViolated(Box<HypothesisReport>),
    #[error("iterate {iterate} increased at {node:?} by {excess:e}")]
    Monotonicity { iterate: usize, node: NodeId, excess: f64 },
}

/// A sampled point and the value there, for witnesses.
pub type Point = Vec<(&'static str, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub lo: Point,
    pub hi: Point,
    pub value_lo: f64,
    pub value_hi: f64,
}

/// Sample points for the driver checks: every solution variable except `ez`
/// ranges over `points`; `w` over `points`; `h` over `{0, 1}`; time over
/// `times` with intensity `lambdas`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisGrid {
    pub points: Vec<f64>,
    pub times: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl HypothesisGrid {
    pub fn new(points: Vec<f64>, times: Vec<f64>, lambdas: Vec<f64>) -> Self {
        Self { points, times, lambdas }
    }

    /// Points `-2, -1, 0, 1, 2` at a single time.
    pub fn unit(lambda: f64) -> Self {
        Self::new(vec![-2.0, -1.0, 0.0, 1.0, 2.0], vec![0.0], vec![lambda])
    }

    /// One time per step of `scenario`.
    pub fn for_scenario(scenario: &Scenario) -> Self {
        let lat = &scenario.lattice;
        let n = lat.n_steps();
        Self::new(
            vec![-2.0, -1.0, 0.0, 1.0, 2.0],
            (0..n).map(|k| lat.time(k)).collect(),
            (0..n).map(|k| lat.lambda(k)).collect(),
        )
    }

    /// Drop time points that only repeat an intensity already sampled; valid
    /// when the drivers do not read `t`.
    pub fn without_time(mut self) -> Self {
        let mut times = Vec::new();
        let mut lambdas: Vec<f64> = Vec::new();
        for (&t, &l) in self.times.iter().zip(&self.lambdas) {
            if !lambdas.contains(&l) {
                times.push(t);
                lambdas.push(l);
            }
        }
        self.times = times;
        self.lambdas = lambdas;
        self
    }

    fn validate(&self) -> Result<(), LipschitzError> {
        let sorted = self.points.windows(2).all(|w| w[0] < w[1]);
        if self.points.len() < 2 || !sorted || self.points.iter().any(|p| !p.is_finite()) {
            return Err(LipschitzError::DegenerateGrid("need at least two increasing finite points"));
        }
        if self.times.is_empty() || self.times.len() != self.lambdas.len() {
            return Err(LipschitzError::DegenerateGrid("need one intensity per time point"));
        }
        Ok(())
    }

    /// Every grid point, with `ez = 0`, plus the time index.
    fn for_each(&self, mut visit: impl FnMut(usize, Env) -> Result<(), LipschitzError>) -> Result<(), LipschitzError> {
        self.validate()?;
        let p = &self.points;
        for (ti, &t) in self.times.iter().enumerate() {
            for h in [0.0, 1.0] {
                for &w in p {
                    for &y in p {
                        for &z in p {
                            for &ey in p {
                                for &u in p {
                                    let env = Env::new()
                                        .with(Var::T, t)
                                        .with(Var::W, w)
                                        .with(Var::H, h)
                                        .with(Var::Y, y)
                                        .with(Var::Z, z)
                                        .with(Var::Ey, ey)
                                        .with(Var::Ez, 0.0)
                                        .with(Var::U, u);
                                    visit(ti, env)?;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Driver as the checkers see it: a function of the point and the intensity.
trait Gen: Fn(&Env, f64) -> Result<f64, EvalError> + Sync {}
impl<T: Fn(&Env, f64) -> Result<f64, EvalError> + Sync> Gen for T {}

fn m_form_of(scenario: &Scenario) -> impl Gen + '_ {
    move |env: &Env, lambda: f64| scenario.driver.m_form(env, lambda)
}

fn plain(expr: &DriverExpr) -> impl Gen + '_ {
    move |env: &Env, _lambda: f64| expr.eval(env)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneCheck {
    pub holds: bool,
    pub witness: Option<Witness>,
}

/// Is `g` nondecreasing in the anticipated `y` slot on the grid?
pub fn check_monotone_in_anticipation(g: &DriverExpr, grid: &HypothesisGrid) -> Result<MonotoneCheck, LipschitzError> {
    monotone_with(&plain(g), grid)
}

fn monotone_with(g: &impl Gen, grid: &HypothesisGrid) -> Result<MonotoneCheck, LipschitzError> {
    let mut witness = None;
    let lo = grid.points.first().copied().unwrap_or(f64::NAN);
    grid.for_each(|ti, env| {
        // Scan once per base point: only at the lowest ey value.
        if witness.is_some() || env.get(Var::Ey) != Some(lo) {
            return Ok(());
        }
        let lambda = grid.lambdas[ti];
        let mut prev: Option<(Env, f64)> = None;
        for &x in &grid.points {
            let at = env.with(Var::Ey, x);
            let v = eval_checked(|e| g(e, lambda), &at)?;
            if let Some((pe, pv)) = prev {
                if v < pv {
                    witness = Some(Witness { lo: describe(&pe), hi: describe(&at), value_lo: pv, value_hi: v });
                    return Ok(());
                }
            }
            prev = Some((at, v));
        }
        Ok(())
    })?;
    Ok(MonotoneCheck { holds: witness.is_none(), witness })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaCheck {
    pub holds: bool,
    /// `inf r` with `r = (g(u) - g(u')) / (lambda (u - u'))`; zero when no
    /// sample has positive intensity.
    pub theta: f64,
    /// `sup |r lambda|`.
    pub max_abs_rate: f64,
    pub witness: Option<Witness>,
}

/// `g(u) - g(u') >= theta lambda (u - u')` with `theta >= -1`, sampled over
/// pairs of grid values of `u` at pre-default points with `lambda > 0`.
pub fn check_theta_condition(g: &DriverExpr, grid: &HypothesisGrid) -> Result<ThetaCheck, LipschitzError> {
    theta_with(&plain(g), grid)
}

fn theta_with(g: &impl Gen, grid: &HypothesisGrid) -> Result<ThetaCheck, LipschitzError> {
    let mut theta = f64::INFINITY;
    let mut max_abs_rate = 0.0f64;
    let mut witness = None;
    let lo = grid.points.first().copied().unwrap_or(f64::NAN);
    grid.for_each(|ti, env| {
        let lambda = grid.lambdas[ti];
        if lambda <= 0.0 || env.get(Var::H) != Some(0.0) || env.get(Var::U) != Some(lo) {
            return Ok(());
        }
        let values = grid
            .points
            .iter()
            .map(|&x| {
                let at = env.with(Var::U, x);
                eval_checked(|e| g(e, lambda), &at).map(|v| (at, x, v))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (i, (ea, ua, va)) in values.iter().enumerate() {
            for (eb, ub, vb) in &values[i + 1..] {
                let r = (vb - va) / (lambda * (ub - ua));
                max_abs_rate = max_abs_rate.max((r * lambda).abs());
                if r < theta {
                    theta = r;
                    if r < -1.0 {
                        witness = Some(Witness { lo: describe(ea), hi: describe(eb), value_lo: *va, value_hi: *vb });
                    }
                }
            }
        }
        Ok(())
    })?;
    if theta == f64::INFINITY {
        theta = 0.0;
    }
    Ok(ThetaCheck {
        holds: theta >= -1.0 - 1e-12 && max_abs_rate.is_finite(),
        theta,
        max_abs_rate,
        witness,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceCheck {
    pub holds: bool,
    pub min_gap: f64,
    pub witness: Option<Point>,
}

fn dominance_with(g1: &impl Gen, g2: &impl Gen, grid: &HypothesisGrid) -> Result<DominanceCheck, LipschitzError> {
    let mut min_gap = f64::INFINITY;
    let mut witness = None;
    grid.for_each(|ti, env| {
        let lambda = grid.lambdas[ti];
        let gap = eval_checked(|e| g1(e, lambda), &env)? - eval_checked(|e| g2(e, lambda), &env)?;
        if gap < min_gap {
            min_gap = gap;
            if gap < -COMPARISON_TOL {
                witness = Some(describe(&env));
            }
        }
        Ok(())
    })?;
    Ok(DominanceCheck { holds: min_gap >= -COMPARISON_TOL, min_gap, witness })
}

/// Outcomes of the five hypothesis checks, plus the `theta` check on the
/// second driver that the iterate sequence relies on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    /// (i) `g^2` nondecreasing in the anticipated `y`.
    pub monotone: MonotoneCheck,
    /// (ii) `ξ^1 >= ξ^2` at every terminal node.
    pub terminal_gap: f64,
    /// (iii) `S^1 >= S^2` at every node.
    pub obstacle_gap: f64,
    /// (iv) `theta` condition on `g^1`.
    pub theta_first: ThetaCheck,
    /// (v) `g^1 >= g^2` on the grid.
    pub dominance: DominanceCheck,
    pub theta_second: ThetaCheck,
}

impl HypothesisReport {
    pub fn flags(&self) -> [bool; 5] {
        [
            self.monotone.holds,
            self.terminal_gap >= -COMPARISON_TOL,
            self.obstacle_gap >= -COMPARISON_TOL,
            self.theta_first.holds,
            self.dominance.holds,
        ]
    }

    pub fn all(&self) -> bool {
        self.flags().iter().all(|&f| f)
    }
}

/// Two scenarios on the same lattice with the same lag, and the outcome of
/// the hypothesis checks. Only [`ComparisonCase::new`] produces the flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonCase {
    first: Scenario,
    second: Scenario,
    hypotheses: HypothesisReport,
}

impl ComparisonCase {
    pub fn new(first: Scenario, second: Scenario) -> Result<Self, ComparisonError> {
        let mut grid = HypothesisGrid::for_scenario(&first);
        if !first.driver.expr.uses(Var::T) && !second.driver.expr.uses(Var::T) {
            grid = grid.without_time();
        }
        Self::with_grid(first, second, &grid)
    }

    pub fn with_grid(first: Scenario, second: Scenario, grid: &HypothesisGrid) -> Result<Self, ComparisonError> {
        if first.lattice != second.lattice {
            return Err(ComparisonError::Incompatible("lattices differ"));
        }
        if first.delta_steps != second.delta_steps {
            return Err(ComparisonError::Incompatible("anticipation lags differ"));
        }
        if first.scheme != second.scheme {
            return Err(ComparisonError::Incompatible("schemes differ"));
        }
        if first.driver.expr.uses(Var::Ez) || second.driver.expr.uses(Var::Ez) {
            return Err(ComparisonError::Incompatible("drivers with an anticipated z are not covered"));
        }
        let lat = &first.lattice;
        let n = lat.n_steps();
        let mut terminal_gap = f64::INFINITY;
        for node in lat.nodes(n) {
            terminal_gap = terminal_gap.min(first.terminal_at(node)? - second.terminal_at(node)?);
        }
        let mut obstacle_gap = f64::INFINITY;
        for k in 0..=n {
            for node in lat.nodes(k) {
                obstacle_gap = obstacle_gap.min(first.obstacle_at(node)? - second.obstacle_at(node)?);
            }
        }
        let hypotheses = {
            let g1 = m_form_of(&first);
            let g2 = m_form_of(&second);
            HypothesisReport {
                monotone: monotone_with(&g2, grid)?,
                terminal_gap,
                obstacle_gap,
                theta_first: theta_with(&g1, grid)?,
                dominance: dominance_with(&g1, &g2, grid)?,
                theta_second: theta_with(&g2, grid)?,
            }
        };
        Ok(Self { first, second, hypotheses })
    }

    pub fn first(&self) -> &Scenario {
        &self.first
    }

    pub fn second(&self) -> &Scenario {
        &self.second
    }

    pub fn hypotheses(&self) -> &HypothesisReport {
        &self.hypotheses
    }

    /// `δ = 0`: the non-anticipated comparison.
    pub fn is_plain(&self) -> bool {
        self.first.delta_steps == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub min_gap: f64,
    pub worst_node: NodeId,
    pub pass: bool,
}

fn min_gap(a: &ProcessField, b: &ProcessField, case: &ComparisonCase) -> (f64, NodeId) {
    let lat = &case.first.lattice;
    let mut best = (f64::INFINITY, NodeId::ROOT);
    for k in 0..=lat.n_steps() {
        let (sa, sb) = (a.step(k).expect("full field"), b.step(k).expect("full field"));
        for (i, (x, y)) in sa.iter().zip(sb).enumerate() {
            if x - y < best.0 {
                best = (x - y, lat.node_at(k, i));
            }
        }
    }
    best
}

/// Solve both scenarios and report `min (Y^1 - Y^2)` over all nodes.
pub fn run_comparison(case: &ComparisonCase, exec: Exec) -> Result<Verdict, ComparisonError> {
    if !case.hypotheses.all() {
        return Err(ComparisonError::HypothesisViolated(Box::new(case.hypotheses.clone())));
    }
    let opts = SolveOptions { route: Route::Martingale, exec };
    let y1 = solve_backward_with(&case.first, opts)?;
    let y2 = solve_backward_with(&case.second, opts)?;
    let (gap, node) = min_gap(&y1.y, &y2.y, case);
    Ok(Verdict { min_gap: gap, worst_node: node, pass: gap >= -COMPARISON_TOL })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterateTrace {
    /// `Y^1`, the solution of the first scenario.
    pub first: Solution,
    /// `Y^3, Y^4, ...`
    pub iterates: Vec<Solution>,
    /// `sup |Y^{n} - Y^{n-1}|` for each iterate, the first against `Y^1`.
    pub sup_diffs: Vec<f64>,
    /// Direct solution of the second scenario.
    pub direct: Solution,
}

impl IterateTrace {
    pub fn limit_error(&self) -> f64 {
        self.iterates.last().map_or(f64::INFINITY, |s| s.y.max_abs_diff(&self.direct.y))
    }
}

/// `Y^3` solves the second scenario with the anticipated arguments taken
/// from `Y^1`; each later iterate takes them from its predecessor. The
/// sequence must decrease node-wise (`Y^1 >= Y^3 >= Y^4 >= ...`).
pub fn iterate_sequence(case: &ComparisonCase, n_max: usize, exec: Exec) -> Result<IterateTrace, ComparisonError> {
    let h = &case.hypotheses;
    if !h.all() || !h.theta_second.holds {
        return Err(ComparisonError::HypothesisViolated(Box::new(h.clone())));
    }
    let opts = SolveOptions { route: Route::Martingale, exec };
    let first = solve_backward_with(&case.first, opts)?;
    let direct = solve_backward_with(&case.second, opts)?;
    let mut iterates: Vec<Solution> = Vec::with_capacity(n_max);
    let mut sup_diffs = Vec::with_capacity(n_max);
    for it in 0..n_max {
        let prev = iterates.last().unwrap_or(&first);
        let next = solve_with_anticipation(&case.second, &prev.y, &prev.z, opts)?;
        let (gap, node) = min_gap(&prev.y, &next.y, case);
        if gap < -COMPARISON_TOL {
            return Err(ComparisonError::Monotonicity { iterate: it + 3, node, excess: -gap });
        }
        sup_diffs.push(prev.y.max_abs_diff(&next.y));
        iterates.push(next);
    }
    Ok(IterateTrace { first, iterates, sup_diffs, direct })
}

/// Re-evaluate a witness and confirm it violates the stated inequality.
pub fn witness_violates_monotonicity(g: &DriverExpr, w: &Witness) -> bool {
    let env = |p: &Point| p.iter().fold(Env::new(), |e, (name, v)| e.with(Var::from_name(name).expect("var"), *v));
    match (g.eval(&env(&w.lo)), g.eval(&env(&w.hi))) {
        (Ok(a), Ok(b)) => w.lo.iter().zip(&w.hi).all(|(a, b)| a.0 != "ey" || a.1 < b.1) && b < a,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{parse_driver, DriverForm};

    #[test]
    fn monotone_examples() {
        let grid = HypothesisGrid::unit(0.5);
        assert!(check_monotone_in_anticipation(&parse_driver("0.2*ey").unwrap(), &grid).unwrap().holds);
        let g = parse_driver("-ey").unwrap();
        let bad = check_monotone_in_anticipation(&g, &grid).unwrap();
        assert!(!bad.holds);
        assert!(witness_violates_monotonicity(&g, bad.witness.as_ref().unwrap()));
        assert!(check_monotone_in_anticipation(&parse_driver("min(ey, 3)").unwrap(), &grid).unwrap().holds);
    }

    #[test]
    fn theta_examples() {
        let grid = HypothesisGrid::unit(0.5);
        let c = check_theta_condition(&parse_driver("y + z").unwrap(), &grid).unwrap();
        assert!(c.holds);
        assert_eq!(c.theta, 0.0);
        let c = check_theta_condition(&parse_driver("-2*u").unwrap(), &grid).unwrap();
        assert!(!c.holds);
        assert_eq!(c.theta, -4.0);
        assert!(c.witness.is_some());
        let c = check_theta_condition(&parse_driver("0.25*u").unwrap(), &grid).unwrap();
        assert!(c.holds);
        assert_eq!(c.theta, 0.5);
    }

    fn pair(d1: &str, x1: &str, s1: &str, d2: &str, x2: &str, s2: &str) -> ComparisonCase {
        let mk = |d: &str, x: &str, s: &str| {
            Scenario::builder(1.0, 6)
                .lambda(0.3)
                .delta_steps(2)
                .form(DriverForm::M)
                .driver(d)
                .terminal(x)
                .obstacle(s)
                .build()
                .unwrap()
        };
        ComparisonCase::new(mk(d1, x1, s1), mk(d2, x2, s2)).unwrap()
    }

    #[test]
    fn identical_scenarios() {
        let c = pair("0.2*y + 0.1*ey", "max(w, -w)", "-w", "0.2*y + 0.1*ey", "max(w, -w)", "-w");
        let v = run_comparison(&c, Exec::Sequential).unwrap();
        assert_eq!(v.min_gap, 0.0);
        assert!(v.pass);
        let trace = iterate_sequence(&c, 5, Exec::Sequential).unwrap();
        assert!(trace.sup_diffs.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn shifted_terminal() {
        let c = pair("0.2*y + 0.1*ey", "1 + w", "-5", "0.2*y + 0.1*ey", "w", "-5");
        let v = run_comparison(&c, Exec::Parallel).unwrap();
        assert!(v.pass && v.min_gap > 0.0);
    }

    #[test]
    fn violated_hypothesis_is_reported() {
        let c = pair("0.2*y", "w", "-5", "0.2*y", "w + 1", "-5");
        assert!(!c.hypotheses().flags()[1]);
        assert!(matches!(run_comparison(&c, Exec::Sequential), Err(ComparisonError::HypothesisViolated(_))));
    }

    #[test]
    fn iterates_decrease_to_the_direct_solution() {
        let c = pair(
            "0.3 + 0.2*y + 0.3*ey - 0.1*u + 0.1*z",
            "0.5 + max(w, 0.2 - 0.5*w)",
            "0.1 - 0.5*w",
            "0.2*y + 0.3*ey - 0.1*u + 0.1*z",
            "max(w, 0.2 - 0.5*w)",
            "0.2 - 0.5*w - 0.1",
        );
        assert!(c.hypotheses().all());
        let trace = iterate_sequence(&c, 20, Exec::Sequential).unwrap();
        assert!(trace.limit_error() <= 1e-8);
        let one = iterate_sequence(&c, 1, Exec::Sequential).unwrap();
        assert_eq!(one.iterates.len(), 1);
    }

    #[test]
    fn rejects_mismatched_cases() {
        let a = Scenario::builder(1.0, 4).build().unwrap();
        let b = Scenario::builder(1.0, 5).build().unwrap();
        assert!(matches!(ComparisonCase::new(a.clone(), b), Err(ComparisonError::Incompatible(_))));
        let c = Scenario::builder(1.0, 4).driver("ez").build().unwrap();
        assert!(matches!(ComparisonCase::new(a, c), Err(ComparisonError::Incompatible(_))));
    }
}
