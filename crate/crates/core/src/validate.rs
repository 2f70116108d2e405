//! Post-hoc checks of a solved quadruple against the four solution
//! conditions: integrable driver, backward equation, reflection process and
//! obstacle constraint.

use serde::Serialize;

use crate::driver::Var;
use crate::lattice::NodeId;
use crate::scenario::{Scenario, Scheme};
use crate::solver::Solution;

const FLAG_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub name: &'static str,
    pub max_violation: f64,
    pub worst_node: Option<NodeId>,
    /// Nodes whose violation exceeds `1e-10`.
    pub flagged: Vec<NodeId>,
}

impl ConditionReport {
    fn new(name: &'static str) -> Self {
        Self { name, max_violation: 0.0, worst_node: None, flagged: Vec::new() }
    }

    fn record(&mut self, node: NodeId, violation: f64) {
        // NaN counts as an infinite violation.
        let v = if violation.is_nan() { f64::INFINITY } else { violation };
        if v > self.max_violation {
            self.max_violation = v;
            self.worst_node = Some(node);
        }
        if v > FLAG_TOL && !self.flagged.contains(&node) {
            self.flagged.push(node);
        }
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.max_violation <= tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// `E[sum_k F_k^2 dt]`; finite for an admissible driver.
    pub driver_square_sum: f64,
    pub integrability: ConditionReport,
    pub backward_equation: ConditionReport,
    pub reflection: ConditionReport,
    pub obstacle: ConditionReport,
    /// Shape problems: `U`, `psi` non-zero after default, `Z`, `U` non-zero at
    /// the horizon, fields not covering the lattice.
    pub structure: ConditionReport,
}

impl ValidationReport {
    pub fn conditions(&self) -> [&ConditionReport; 5] {
        [&self.integrability, &self.backward_equation, &self.reflection, &self.obstacle, &self.structure]
    }

    pub fn max_violation(&self) -> f64 {
        self.conditions().iter().map(|c| c.max_violation).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.conditions().iter().all(|c| c.holds(tol))
    }
}

/// Check `solution` against `scenario`. Never fails: problems are reported
/// as violations, with the offending nodes.
///
/// The backward-equation residual recomputes the driver from the solved
/// fields (so a corrupted `Y`, `Z`, `U` or `F` shows up) and also checks the
/// one-step martingale representation on every positive-probability edge.
pub fn validate_solution(solution: &Solution, scenario: &Scenario) -> ValidationReport {
    let lat = &scenario.lattice;
    let n = lat.n_steps();
    let dt = lat.dt();
    let law = lat.root_law();
    let mut integrability = ConditionReport::new("integrability");
    let mut backward = ConditionReport::new("backward_equation");
    let mut reflection = ConditionReport::new("reflection");
    let mut obstacle = ConditionReport::new("obstacle");
    let mut structure = ConditionReport::new("structure");

    let fields = [
        &solution.y,
        &solution.z,
        &solution.u,
        &solution.psi,
        &solution.dk,
        &solution.drive,
        &solution.obstacle,
    ];
    for k in 0..=n {
        if fields.iter().any(|f| f.step(k).map(<[f64]>::len) != Some(lat.node_count(k))) {
            structure.record(NodeId::alive(k, 0), f64::INFINITY);
        }
    }
    if structure.max_violation > 0.0 {
        return ValidationReport {
            driver_square_sum: f64::NAN,
            integrability,
            backward_equation: backward,
            reflection,
            obstacle,
            structure,
        };
    }

    let at = |f: &crate::lattice::ProcessField, k: usize, i: usize| f.step(k).expect("shape checked")[i];
    let mut square_sum = 0.0;
    let terminal = crate::lattice::ProcessField::from_steps(
        n,
        vec![lat.nodes(n).map(|m| scenario.terminal_at(m).unwrap_or(f64::NAN)).collect()],
    );

    for k in 0..=n {
        let delta_target = k + scenario.delta_steps;
        for i in 0..lat.node_count(k) {
            let node = lat.node_at(k, i);
            let y = at(&solution.y, k, i);
            let dk = at(&solution.dk, k, i);
            let s = match scenario.obstacle_at(node) {
                Ok(s) => s,
                Err(_) => {
                    obstacle.record(node, f64::INFINITY);
                    continue;
                }
            };

            obstacle.record(node, (s - y).max(0.0));
            reflection.record(node, (-dk).max(0.0));
            reflection.record(node, (dk * (y - s)).abs());

            if k == n {
                let xi = scenario.terminal_at(node).unwrap_or(f64::NAN);
                backward.record(node, (y - xi).abs());
                for f in [&solution.z, &solution.u, &solution.psi, &solution.dk] {
                    structure.record(node, at(f, k, i).abs());
                }
                continue;
            }
            if !node.is_alive() {
                structure.record(node, at(&solution.u, k, i).abs());
                structure.record(node, at(&solution.psi, k, i).abs());
            }

            let (z, u, psi) = (at(&solution.z, k, i), at(&solution.u, k, i), at(&solution.psi, k, i));
            let next = solution.y.step(k + 1).expect("shape checked");
            let trans = lat.transition(k, i);
            let expect: f64 = trans.edges().iter().map(|e| e.prob * next[e.child]).sum();
            for e in trans.edges().iter().filter(|e| e.prob > 0.0) {
                let rep = expect + z * e.dw + u * e.dm + psi * e.dw * e.dm;
                backward.record(node, (next[e.child] - rep).abs());
            }

            // Recompute F at the arguments the scheme uses.
            let y_arg = match scenario.scheme {
                Scheme::Explicit => expect,
                Scheme::Implicit => y,
            };
            let (ey, ez) = if scenario.delta_steps == 0 {
                (y_arg, z)
            } else if delta_target >= n {
                (lat.cond_expect(&terminal, n, node).unwrap_or(f64::NAN), 0.0)
            } else {
                (
                    lat.cond_expect(&solution.y, delta_target, node).unwrap_or(f64::NAN),
                    lat.cond_expect(&solution.z, delta_target, node).unwrap_or(f64::NAN),
                )
            };
            let env = scenario
                .state_env(node)
                .with(Var::Y, y_arg)
                .with(Var::Z, z)
                .with(Var::U, u)
                .with(Var::Ey, ey)
                .with(Var::Ez, ez);
            let f = match scenario.driver.m_form(&env, lat.lambda(k)) {
                Ok(f) if f.is_finite() => f,
                _ => {
                    integrability.record(node, f64::INFINITY);
                    continue;
                }
            };
            square_sum += law[k][i] * f * f * dt;
            backward.record(node, (f - at(&solution.drive, k, i)).abs());
            backward.record(node, (y - (expect + f * dt + dk)).abs());
        }
    }
    if !square_sum.is_finite() {
        integrability.record(NodeId::ROOT, f64::INFINITY);
    }

    ValidationReport {
        driver_square_sum: square_sum,
        integrability,
        backward_equation: backward,
        reflection,
        obstacle,
        structure,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::solve_backward;

    fn put_like() -> Scenario {
        Scenario::builder(1.0, 6)
            .lambda(0.4)
            .delta_steps(2)
            .driver("0.1*y - 0.2*u + 0.05*ey + 0.1*z")
            .obstacle("0.3 - 0.5*w")
            .terminal("max(0.3 - 0.5*w, h*0.1)")
            .build()
            .unwrap()
    }

    #[test]
    fn solver_output_is_clean() {
        let sc = put_like();
        let sol = solve_backward(&sc).unwrap();
        let report = validate_solution(&sol, &sc);
        assert!(report.passes(1e-10), "{report:?}");
        assert!(report.driver_square_sum.is_finite());
    }

    #[test]
    fn corrupted_y_is_localized() {
        let sc = put_like();
        let mut sol = solve_backward(&sc).unwrap();
        let node = NodeId::alive(3, 2);
        let v = sol.y.get(&sc.lattice, node).unwrap();
        sol.y.set(&sc.lattice, node, v + 0.5).unwrap();
        let report = validate_solution(&sol, &sc);
        assert!(report.backward_equation.max_violation > 0.1);
        assert_eq!(report.backward_equation.worst_node, Some(node));
        assert!(report.backward_equation.flagged.contains(&node));
    }

    #[test]
    fn negative_reflection_is_flagged() {
        let sc = put_like();
        let mut sol = solve_backward(&sc).unwrap();
        let node = NodeId::alive(2, 1);
        sol.dk.set(&sc.lattice, node, -0.01).unwrap();
        let report = validate_solution(&sol, &sc);
        assert!(report.reflection.max_violation >= 0.01);
        assert!(report.reflection.flagged.contains(&node));
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let sc = put_like();
        let mut sol = solve_backward(&sc).unwrap();
        sol.u.step_mut(2).unwrap().pop();
        let report = validate_solution(&sol, &sc);
        assert!(!report.passes(1e-10));
        assert_eq!(report.structure.max_violation, f64::INFINITY);
    }
}
