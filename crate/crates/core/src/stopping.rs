//! The reflected value as an optimal stopping problem: payoffs of adapted
//! stopping rules, exhaustive search over rules on small lattices, the
//! optimal stopping time read off the solution, and the running-maximum
//! formula for `K`.

use serde::Serialize;
use thiserror::Error;

use crate::lattice::{DefaultLattice, LatticeError, NodeId};
use crate::par::Exec;
use crate::scenario::{Scenario, ScenarioError};
use crate::solver::Solution;

/// Largest number of decision nodes the exhaustive search accepts.
pub const MAX_DECISION_NODES: usize = 22;

/// Tolerance for `Y <= S` in the first-hit rule.
pub const HIT_TOL: f64 = 1e-10;

/// Path count cap for the running-maximum check.
pub const MAX_CHECK_PATHS: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoppingError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("rule does not match the lattice: {0}")]
    RuleMismatch(String),
    #[error("{nodes} decision nodes reachable, at most {max} can be enumerated")]
    TooLarge { nodes: usize, max: usize },
}

/// Stop/continue flag per node. Terminal nodes always stop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoppingRule {
    stop: Vec<Vec<bool>>,
}

impl StoppingRule {
    pub fn from_fn(lattice: &DefaultLattice, mut stop: impl FnMut(NodeId) -> bool) -> Self {
        let n = lattice.n_steps();
        let stop = (0..=n)
            .map(|k| lattice.nodes(k).map(|node| k == n || stop(node)).collect())
            .collect();
        Self { stop }
    }

    pub fn never_early(lattice: &DefaultLattice) -> Self {
        Self::from_fn(lattice, |_| false)
    }

    pub fn immediately(lattice: &DefaultLattice) -> Self {
        Self::from_fn(lattice, |_| true)
    }

    pub fn stops(&self, lattice: &DefaultLattice, node: NodeId) -> Result<bool, StoppingError> {
        let idx = lattice.index_of(node)?;
        self.stop
            .get(node.step)
            .and_then(|s| s.get(idx))
            .copied()
            .ok_or_else(|| StoppingError::RuleMismatch(format!("no flag for {node:?}")))
    }

    pub fn set(&mut self, lattice: &DefaultLattice, node: NodeId, stop: bool) -> Result<(), StoppingError> {
        let idx = lattice.index_of(node)?;
        if node.step == lattice.n_steps() {
            return Ok(());
        }
        match self.stop.get_mut(node.step).and_then(|s| s.get_mut(idx)) {
            Some(flag) => {
                *flag = stop;
                Ok(())
            }
            None => Err(StoppingError::RuleMismatch(format!("no flag for {node:?}"))),
        }
    }

    fn check(&self, lattice: &DefaultLattice) -> Result<(), StoppingError> {
        let n = lattice.n_steps();
        if self.stop.len() != n + 1 {
            return Err(StoppingError::RuleMismatch(format!("{} steps, lattice has {}", self.stop.len(), n + 1)));
        }
        for (k, flags) in self.stop.iter().enumerate() {
            if flags.len() != lattice.node_count(k) {
                return Err(StoppingError::RuleMismatch(format!("wrong node count at step {k}")));
            }
        }
        if self.stop[n].iter().any(|s| !s) {
            return Err(StoppingError::RuleMismatch("terminal nodes must stop".into()));
        }
        Ok(())
    }
}

fn node_payoffs(solution: &Solution, scenario: &Scenario, k: usize) -> Result<Vec<f64>, StoppingError> {
    let lat = &scenario.lattice;
    if k == lat.n_steps() {
        Ok(lat.nodes(k).map(|n| scenario.terminal_at(n)).collect::<Result<_, _>>()?)
    } else {
        Ok(solution
            .obstacle
            .step(k)
            .ok_or(LatticeError::StepNotCovered(k))?
            .to_vec())
    }
}

fn check_solution(solution: &Solution, lat: &DefaultLattice) -> Result<(), StoppingError> {
    for k in 0..=lat.n_steps() {
        for f in [&solution.drive, &solution.obstacle, &solution.y, &solution.dk] {
            if f.step(k).map(<[f64]>::len) != Some(lat.node_count(k)) {
                return Err(StoppingError::RuleMismatch(format!("solution does not cover step {k}")));
            }
        }
    }
    Ok(())
}

/// `E[sum_{k < tau} F_k dt + S_tau 1_{tau < T} + ξ 1_{tau = T} | from]` for
/// the stopping time defined by `rule`, with `F` taken from the solved
/// quadruple.
pub fn stopping_payoff(
    rule: &StoppingRule,
    solution: &Solution,
    scenario: &Scenario,
    from: NodeId,
) -> Result<f64, StoppingError> {
    let lat = &scenario.lattice;
    rule.check(lat)?;
    check_solution(solution, lat)?;
    let idx = lat.index_of(from)?;
    let n = lat.n_steps();
    let dt = lat.dt();
    let mut value = node_payoffs(solution, scenario, n)?;
    for k in (from.step..n).rev() {
        let cont = lat.expect_step(k, &value, Exec::Sequential);
        let s = node_payoffs(solution, scenario, k)?;
        let f = solution.drive.step(k).expect("checked");
        value = (0..lat.node_count(k))
            .map(|i| if rule.stop[k][i] { s[i] } else { cont[i] + f[i] * dt })
            .collect();
    }
    Ok(value[idx])
}

/// Decision nodes reachable from `from` with positive probability, in
/// step order, with local child links.
struct DecisionTree {
    nodes: Vec<(usize, usize)>,
    /// `(stop payoff, F dt, children)`; a child is either a local decision
    /// node or a terminal payoff.
    data: Vec<(f64, f64, Vec<(f64, Child)>)>,
}

#[derive(Debug, Clone, Copy)]
enum Child {
    Decision(usize),
    Terminal(f64),
}

impl DecisionTree {
    fn build(solution: &Solution, scenario: &Scenario, from: NodeId) -> Result<Self, StoppingError> {
        let lat = &scenario.lattice;
        let n = lat.n_steps();
        let start = lat.index_of(from)?;
        let mut nodes = Vec::new();
        let mut frontier = vec![start];
        for k in from.step..n {
            frontier.sort_unstable();
            frontier.dedup();
            if nodes.len() + frontier.len() > MAX_DECISION_NODES {
                // Count the rest for the error message.
                let mut total = nodes.len() + frontier.len();
                let mut f = frontier.clone();
                for kk in k..n - 1 {
                    f = f
                        .iter()
                        .flat_map(|&i| lat.transition(kk, i).edges().to_vec())
                        .filter(|e| e.prob > 0.0)
                        .map(|e| e.child)
                        .collect();
                    f.sort_unstable();
                    f.dedup();
                    total += f.len();
                }
                return Err(StoppingError::TooLarge { nodes: total, max: MAX_DECISION_NODES });
            }
            let mut next = Vec::new();
            for &i in &frontier {
                nodes.push((k, i));
                next.extend(lat.transition(k, i).edges().iter().filter(|e| e.prob > 0.0).map(|e| e.child));
            }
            frontier = next;
        }

        let terminal = node_payoffs(solution, scenario, n)?;
        let dt = lat.dt();
        let mut data = Vec::with_capacity(nodes.len());
        for &(k, i) in &nodes {
            let s = solution.obstacle.step(k).expect("checked")[i];
            let f = solution.drive.step(k).expect("checked")[i];
            let children = lat
                .transition(k, i)
                .edges()
                .iter()
                .filter(|e| e.prob > 0.0)
                .map(|e| {
                    let child = if k + 1 == n {
                        Child::Terminal(terminal[e.child])
                    } else {
                        let pos = nodes
                            .iter()
                            .position(|&(kk, ii)| kk == k + 1 && ii == e.child)
                            .expect("children of decision nodes are decision nodes");
                        Child::Decision(pos)
                    };
                    (e.prob, child)
                })
                .collect();
            data.push((s, f * dt, children));
        }
        Ok(Self { nodes, data })
    }

    /// Payoff at the first decision node when node `j` stops iff bit `j` of
    /// `mask` is set.
    fn payoff(&self, mask: u64, scratch: &mut [f64]) -> f64 {
        for j in (0..self.nodes.len()).rev() {
            let (s, fdt, children) = &self.data[j];
            scratch[j] = if mask >> j & 1 == 1 {
                *s
            } else {
                let cont: f64 = children
                    .iter()
                    .map(|(p, c)| {
                        p * match *c {
                            Child::Decision(d) => scratch[d],
                            Child::Terminal(v) => v,
                        }
                    })
                    .sum();
                cont + fdt
            };
        }
        scratch[0]
    }
}

/// Exhaustive maximum of [`stopping_payoff`] over all adapted rules from
/// `from`. Rules are labelings of the positive-probability non-terminal
/// nodes reachable from `from`; among equal values the lowest labeling (in
/// node order) wins, so the result is deterministic.
pub fn brute_force_value(
    solution: &Solution,
    scenario: &Scenario,
    from: NodeId,
    exec: Exec,
) -> Result<(f64, StoppingRule), StoppingError> {
    let lat = &scenario.lattice;
    check_solution(solution, lat)?;
    if from.step == lat.n_steps() {
        lat.index_of(from)?;
        let v = scenario.terminal_at(from)?;
        return Ok((v, StoppingRule::never_early(lat)));
    }
    let tree = DecisionTree::build(solution, scenario, from)?;
    let m = tree.nodes.len();
    let total: u64 = 1 << m;
    const CHUNK: u64 = 1 << 12;
    let chunks = total.div_ceil(CHUNK) as usize;
    let best_in = |c: usize| {
        let mut scratch = vec![0.0; m];
        let lo = c as u64 * CHUNK;
        let hi = (lo + CHUNK).min(total);
        let mut best = (f64::NEG_INFINITY, lo);
        for mask in lo..hi {
            let v = tree.payoff(mask, &mut scratch);
            if v > best.0 {
                best = (v, mask);
            }
        }
        best
    };
    let best = exec
        .map(chunks, best_in)
        .into_iter()
        .fold((f64::NEG_INFINITY, 0u64), |acc, b| if b.0 > acc.0 { b } else { acc });

    let mut rule = StoppingRule::never_early(lat);
    for (j, &(k, i)) in tree.nodes.iter().enumerate() {
        rule.stop[k][i] = best.1 >> j & 1 == 1;
    }
    Ok((best.0, rule))
}

/// The two characterizations of the optimal stopping time after step
/// `t_index`: first node with `Y <= S`, and first node where `K` increases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauRules {
    pub t_index: usize,
    pub first_hit: StoppingRule,
    pub k_increase: StoppingRule,
    /// Nodes (at or after `t_index`) labelled differently by the two rules.
    pub disagreements: Vec<NodeId>,
}

impl TauRules {
    pub fn coincide(&self) -> bool {
        self.disagreements.is_empty()
    }
}

/// Stop where `Y <= S + 1e-10` (first hit), respectively where `ΔK > 0`
/// (first increase of `K` after `K_{t-}`); both stop at the horizon. Nodes
/// before `t_index` continue.
pub fn optimal_tau(solution: &Solution, scenario: &Scenario, t_index: usize) -> Result<TauRules, StoppingError> {
    let lat = &scenario.lattice;
    check_solution(solution, lat)?;
    let y = &solution.y;
    let first_hit = StoppingRule::from_fn(lat, |node| {
        let k = node.step;
        let i = lat.index_of(node).expect("lattice node");
        k >= t_index && y.step(k).expect("checked")[i] <= solution.obstacle.step(k).expect("checked")[i] + HIT_TOL
    });
    let k_increase = StoppingRule::from_fn(lat, |node| {
        let k = node.step;
        let i = lat.index_of(node).expect("lattice node");
        k >= t_index && solution.dk.step(k).expect("checked")[i] > 0.0
    });
    let mut disagreements = Vec::new();
    for k in t_index..=lat.n_steps() {
        for (i, node) in lat.nodes(k).enumerate() {
            if first_hit.stop[k][i] != k_increase.stop[k][i] {
                disagreements.push(node);
            }
        }
    }
    Ok(TauRules { t_index, first_hit, k_increase, disagreements })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StoppingReport {
    pub snell: f64,
    pub brute_force: Option<f64>,
    /// `None` when the lattice is too large to enumerate.
    pub best_rule: Option<StoppingRule>,
    pub tau_payoff_first_hit: f64,
    pub tau_payoff_k_increase: f64,
    pub tau_disagreements: Vec<NodeId>,
    /// `|snell - brute_force|`, or NaN when not enumerated.
    pub gap: f64,
    pub running_max: RunningMaxReport,
}

/// Root-level report: Snell value, exhaustive optimum when feasible, payoff
/// of both optimal-time rules and the running-maximum check.
pub fn stopping_report(solution: &Solution, scenario: &Scenario, exec: Exec) -> Result<StoppingReport, StoppingError> {
    let snell = solution.y0();
    let (brute_force, best_rule) = match brute_force_value(solution, scenario, NodeId::ROOT, exec) {
        Ok((v, r)) => (Some(v), Some(r)),
        Err(StoppingError::TooLarge { .. }) => (None, None),
        Err(e) => return Err(e),
    };
    let tau = optimal_tau(solution, scenario, 0)?;
    Ok(StoppingReport {
        snell,
        brute_force,
        best_rule,
        tau_payoff_first_hit: stopping_payoff(&tau.first_hit, solution, scenario, NodeId::ROOT)?,
        tau_payoff_k_increase: stopping_payoff(&tau.k_increase, solution, scenario, NodeId::ROOT)?,
        tau_disagreements: tau.disagreements,
        gap: brute_force.map_or(f64::NAN, |b| (snell - b).abs()),
        running_max: k_running_max_check(solution, scenario)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunningMaxReport {
    pub paths: usize,
    /// `max |(K_T - K_{t_j}) - max_{i >= j} (X_i)^-|` over paths and steps,
    /// with both stochastic integrals (and the cross term) in `X`.
    pub gap: f64,
    /// Same with only the `Z dW` integral in `X`.
    pub literal_gap: f64,
}

/// Pathwise check of `K_T - K_{t_j} = max_{j <= i <= N} (X_i)^-` where
/// `X_i = ξ + sum_{l >= i} (F_l dt - Z_l ΔW_l - U_l ΔM_l - psi_l ΔW_l ΔM_l) - S_i`.
pub fn k_running_max_check(solution: &Solution, scenario: &Scenario) -> Result<RunningMaxReport, StoppingError> {
    let lat = &scenario.lattice;
    check_solution(solution, lat)?;
    let n = lat.n_steps();
    let dt = lat.dt();
    let paths = lat.paths(MAX_CHECK_PATHS)?;
    let terminal = node_payoffs(solution, scenario, n)?;
    let get = |f: &crate::lattice::ProcessField, k: usize, i: usize| f.step(k).expect("checked")[i];
    let mut gap = 0.0f64;
    let mut literal_gap = 0.0f64;
    for path in &paths {
        let xi = terminal[path[n]];
        let mut full = xi;
        let mut literal = xi;
        let mut a = 0.0;
        // X_N = ξ - S_N; the obstacle at T is dominated by ξ.
        let s_n = get(&solution.obstacle, n, path[n]);
        let mut run_full = (-(full - s_n)).max(0.0);
        let mut run_literal = (-(literal - s_n)).max(0.0);
        for j in (0..n).rev() {
            let (i, next) = (path[j], path[j + 1]);
            let e = lat.edge_between(j, i, next).expect("path edge");
            let f = get(&solution.drive, j, i) * dt;
            let z = get(&solution.z, j, i) * e.dw;
            let rest = get(&solution.u, j, i) * e.dm + get(&solution.psi, j, i) * e.dw * e.dm;
            full += f - z - rest;
            literal += f - z;
            a += get(&solution.dk, j, i);
            let s = get(&solution.obstacle, j, i);
            run_full = run_full.max((s - full).max(0.0));
            run_literal = run_literal.max((s - literal).max(0.0));
            gap = gap.max((a - run_full).abs());
            literal_gap = literal_gap.max((a - run_literal).abs());
        }
    }
    Ok(RunningMaxReport { paths: paths.len(), gap, literal_gap })
}
