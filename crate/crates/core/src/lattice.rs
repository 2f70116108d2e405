//! Discrete filtered space: a recombining binomial Brownian grid crossed with
//! a single default jump.
//!
//! A node at step `k` is identified by the number of up-moves `j` of the
//! Brownian walk and by the step `d` at which default happened (if any).
//! Before default every node has four children: the walk moves by
//! `±sqrt(dt)` and, independently, default happens with probability
//! `p_k = lambda_k * dt`. After default the walk keeps moving (two children,
//! probability 1/2 each) and the default indicator stays frozen at 1.
//!
//! With this kernel the compensated default martingale
//! `M_k = H_k - sum_{i < k ∧ d} lambda_i dt` is an exact discrete martingale,
//! and `ΔW`, `ΔM` and `ΔW·ΔM` are mutually orthogonal at every node.

use serde::Serialize;
use thiserror::Error;

use crate::par::Exec;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatticeError {
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("number of steps must be positive")]
    NoSteps,
    #[error("intensity has {got} values but the lattice has {expected} steps")]
    IntensityLength { expected: usize, got: usize },
    #[error("intensity at step {step} is {value}, must be finite and non-negative")]
    NegativeIntensity { step: usize, value: f64 },
    #[error("intensity at step {step} is {value}, above the declared bound {bound}")]
    AboveBound { step: usize, value: f64, bound: f64 },
    #[error("default probability lambda*dt = {prob} at step {step} must be below 1 (intensity too large for the step size)")]
    ProbabilityTooLarge { step: usize, prob: f64 },
    #[error("node {0:?} is not part of the lattice")]
    UnknownNode(NodeId),
    #[error("field does not cover step {0}")]
    StepNotCovered(usize),
    #[error("cannot condition step {target} on the later step {from}")]
    StepOrder { target: usize, from: usize },
    #[error("field has {got} values at step {step}, expected {expected}")]
    FieldShape { step: usize, expected: usize, got: usize },
    #[error("too many lattice paths to enumerate ({0})")]
    TooManyPaths(usize),
}

/// Piecewise-constant default intensity, one value per time step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntensitySpec {
    values: Vec<f64>,
    lambda_max: f64,
}

impl IntensitySpec {
    pub fn new(values: Vec<f64>, lambda_max: f64) -> Result<Self, LatticeError> {
        for (step, &value) in values.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(LatticeError::NegativeIntensity { step, value });
            }
            if value > lambda_max {
                return Err(LatticeError::AboveBound { step, value, bound: lambda_max });
            }
        }
        Ok(Self { values, lambda_max })
    }

    /// The same intensity at every step, with `lambda_max = lambda`.
    pub fn constant(lambda: f64, n_steps: usize) -> Result<Self, LatticeError> {
        Self::new(vec![lambda; n_steps], lambda.max(0.0))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn at(&self, step: usize) -> f64 {
        self.values.get(step).copied().unwrap_or(0.0)
    }
}

/// Position of a node: step `k`, up-move count `j` and default step `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId {
    pub step: usize,
    pub up: usize,
    /// `None` while alive, `Some(d)` with `1 <= d <= step` once defaulted.
    pub default_step: Option<usize>,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId { step: 0, up: 0, default_step: None };

    pub fn alive(step: usize, up: usize) -> Self {
        Self { step, up, default_step: None }
    }

    pub fn defaulted(step: usize, up: usize, default_step: usize) -> Self {
        Self { step, up, default_step: Some(default_step) }
    }

    pub fn is_alive(&self) -> bool {
        self.default_step.is_none()
    }
}

/// One branch of the transition kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// Index of the child within the next step.
    pub child: usize,
    pub prob: f64,
    pub dw: f64,
    pub dh: f64,
    pub dm: f64,
}

/// Children of a node: four before default, two after.
#[derive(Debug, Clone, Copy)]
pub struct Transition {
    edges: [Edge; 4],
    len: usize,
}

impl Transition {
    pub fn edges(&self) -> &[Edge] {
        &self.edges[..self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefaultLattice {
    horizon: f64,
    n_steps: usize,
    dt: f64,
    sqrt_dt: f64,
    intensity: IntensitySpec,
}

impl DefaultLattice {
    pub fn new(horizon: f64, n_steps: usize, intensity: IntensitySpec) -> Result<Self, LatticeError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LatticeError::BadHorizon(horizon));
        }
        if n_steps == 0 {
            return Err(LatticeError::NoSteps);
        }
        if intensity.values.len() != n_steps {
            return Err(LatticeError::IntensityLength {
                expected: n_steps,
                got: intensity.values.len(),
            });
        }
        let dt = horizon / n_steps as f64;
        for (step, &lambda) in intensity.values.iter().enumerate() {
            let prob = lambda * dt;
            if prob >= 1.0 {
                return Err(LatticeError::ProbabilityTooLarge { step, prob });
            }
        }
        Ok(Self { horizon, n_steps, dt, sqrt_dt: dt.sqrt(), intensity })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn intensity(&self) -> &IntensitySpec {
        &self.intensity
    }

    pub fn lambda(&self, step: usize) -> f64 {
        self.intensity.at(step)
    }

    /// Probability of default during step `k -> k+1` for an alive node.
    pub fn default_prob(&self, step: usize) -> f64 {
        self.lambda(step) * self.dt
    }

    pub fn time(&self, step: usize) -> f64 {
        if step == self.n_steps {
            self.horizon
        } else {
            step as f64 * self.dt
        }
    }

    /// `(k+1)^2`: `k+1` alive nodes plus `k(k+1)` defaulted ones.
    pub fn node_count(&self, step: usize) -> usize {
        (step + 1) * (step + 1)
    }

    pub fn index_of(&self, node: NodeId) -> Result<usize, LatticeError> {
        let k = node.step;
        let ok = k <= self.n_steps
            && node.up <= k
            && node.default_step.is_none_or(|d| d >= 1 && d <= k);
        if !ok {
            return Err(LatticeError::UnknownNode(node));
        }
        Ok(node.default_step.unwrap_or(0) * (k + 1) + node.up)
    }

    pub fn node_at(&self, step: usize, index: usize) -> NodeId {
        let width = step + 1;
        let d = index / width;
        NodeId {
            step,
            up: index % width,
            default_step: if d == 0 { None } else { Some(d) },
        }
    }

    pub fn nodes(&self, step: usize) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.node_count(step)).map(move |i| self.node_at(step, i))
    }

    pub fn w(&self, node: NodeId) -> f64 {
        (2.0 * node.up as f64 - node.step as f64) * self.sqrt_dt
    }

    pub fn h(&self, node: NodeId) -> f64 {
        if node.is_alive() {
            0.0
        } else {
            1.0
        }
    }

    /// `tau ∧ T`: the default time when defaulted, the horizon otherwise.
    pub fn tau(&self, node: NodeId) -> f64 {
        node.default_step.map_or(self.horizon, |d| self.time(d))
    }

    pub fn transition(&self, step: usize, index: usize) -> Transition {
        debug_assert!(step < self.n_steps);
        let width = step + 1;
        let next_width = step + 2;
        let d = index / width;
        let j = index % width;
        let s = self.sqrt_dt;
        let blank = Edge { child: 0, prob: 0.0, dw: 0.0, dh: 0.0, dm: 0.0 };
        if d == 0 {
            let p = self.default_prob(step);
            let q = 0.5 * (1.0 - p);
            let r = 0.5 * p;
            let dflt = (step + 1) * next_width;
            Transition {
                edges: [
                    Edge { child: j + 1, prob: q, dw: s, dh: 0.0, dm: -p },
                    Edge { child: j, prob: q, dw: -s, dh: 0.0, dm: -p },
                    Edge { child: dflt + j + 1, prob: r, dw: s, dh: 1.0, dm: 1.0 - p },
                    Edge { child: dflt + j, prob: r, dw: -s, dh: 1.0, dm: 1.0 - p },
                ],
                len: 4,
            }
        } else {
            let base = d * next_width;
            Transition {
                edges: [
                    Edge { child: base + j + 1, prob: 0.5, dw: s, dh: 0.0, dm: 0.0 },
                    Edge { child: base + j, prob: 0.5, dw: -s, dh: 0.0, dm: 0.0 },
                    blank,
                    blank,
                ],
                len: 2,
            }
        }
    }

    /// `E[X_{k+1} | node]` for every node of step `k`.
    pub fn expect_step(&self, step: usize, next: &[f64], exec: Exec) -> Vec<f64> {
        exec.map(self.node_count(step), |i| {
            self.transition(step, i)
                .edges()
                .iter()
                .map(|e| e.prob * next[e.child])
                .sum()
        })
    }

    /// Roll values defined at step `from` back to step `target <= from`.
    pub fn expect_back(&self, values: &[f64], from: usize, target: usize, exec: Exec) -> Vec<f64> {
        let mut current = values.to_vec();
        for k in (target..from).rev() {
            current = self.expect_step(k, &current, exec);
        }
        current
    }

    /// Exact `E[field_{target} | at]` under the transition kernel.
    pub fn cond_expect(&self, field: &ProcessField, target: usize, at: NodeId) -> Result<f64, LatticeError> {
        let idx = self.index_of(at)?;
        if at.step > target {
            return Err(LatticeError::StepOrder { target, from: at.step });
        }
        let values = field.step(target).ok_or(LatticeError::StepNotCovered(target))?;
        if values.len() != self.node_count(target) {
            return Err(LatticeError::FieldShape {
                step: target,
                expected: self.node_count(target),
                got: values.len(),
            });
        }
        // Only the subtree below `at` matters; roll back the whole step, the
        // lattice is small.
        let rolled = self.expect_back(values, target, at.step, Exec::Sequential);
        Ok(rolled[idx])
    }

    /// Probability of reaching each node from the root.
    pub fn root_law(&self) -> Vec<Vec<f64>> {
        let mut law = vec![vec![1.0]];
        for k in 0..self.n_steps {
            let mut next = vec![0.0; self.node_count(k + 1)];
            for (i, &mass) in law[k].iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                for e in self.transition(k, i).edges() {
                    next[e.child] += mass * e.prob;
                }
            }
            law.push(next);
        }
        law
    }

    pub fn field_from_fn(&self, first: usize, last: usize, f: impl Fn(NodeId) -> f64) -> ProcessField {
        let steps = (first..=last)
            .map(|k| self.nodes(k).map(&f).collect())
            .collect();
        ProcessField { first_step: first, steps }
    }

    pub fn zero_field(&self) -> ProcessField {
        self.field_from_fn(0, self.n_steps, |_| 0.0)
    }

    pub fn w_field(&self) -> ProcessField {
        self.field_from_fn(0, self.n_steps, |n| self.w(n))
    }

    pub fn h_field(&self) -> ProcessField {
        self.field_from_fn(0, self.n_steps, |n| self.h(n))
    }

    /// Compensator `A_k = sum_{i < k ∧ d} lambda_i dt` of the default indicator.
    pub fn compensator(&self, node: NodeId) -> f64 {
        let stop = node.default_step.unwrap_or(node.step).min(node.step);
        (0..stop).map(|i| self.default_prob(i)).sum()
    }

    /// `M_k = H_k - A_k` on every node.
    pub fn martingale_m(&self) -> ProcessField {
        self.field_from_fn(0, self.n_steps, |n| self.h(n) - self.compensator(n))
    }

    /// All paths from the root through positive-probability edges, as node
    /// indices per step. Errors when there are more than `limit` paths.
    pub fn paths(&self, limit: usize) -> Result<Vec<Vec<usize>>, LatticeError> {
        let mut paths: Vec<Vec<usize>> = vec![vec![0]];
        for k in 0..self.n_steps {
            let mut next = Vec::with_capacity(paths.len() * 2);
            for path in &paths {
                let last = *path.last().expect("paths are never empty");
                for e in self.transition(k, last).edges() {
                    if e.prob > 0.0 {
                        let mut p = path.clone();
                        p.push(e.child);
                        next.push(p);
                    }
                }
                if next.len() > limit {
                    return Err(LatticeError::TooManyPaths(next.len()));
                }
            }
            paths = next;
        }
        Ok(paths)
    }

    /// The edge taken from `(step, from)` to `to` at `step + 1`.
    pub fn edge_between(&self, step: usize, from: usize, to: usize) -> Option<Edge> {
        self.transition(step, from).edges().iter().copied().find(|e| e.child == to)
    }

    /// Checks of the bracket and compensator identities.
    pub fn bracket_checks(&self) -> BracketReport {
        let n = self.n_steps;
        let mut report = BracketReport::default();

        // Pathwise [M]: the compensator is absolutely continuous in time, so
        // only the jumps of H contribute. Every path into a node shares its
        // default history, so the bracket is a node function; check that all
        // parents agree.
        let mut bracket: Vec<Option<f64>> = vec![Some(0.0)];
        let mut discrete_qv: Vec<Option<f64>> = vec![Some(0.0)];
        for k in 0..n {
            let mut next = vec![None; self.node_count(k + 1)];
            let mut next_qv = vec![None; self.node_count(k + 1)];
            for (i, value) in bracket.iter().enumerate() {
                let Some(value) = value else { continue };
                let qv = discrete_qv[i].unwrap_or(0.0);
                for e in self.transition(k, i).edges() {
                    let candidate = value + e.dh * e.dh;
                    match next[e.child] {
                        None => next[e.child] = Some(candidate),
                        Some(prev) => {
                            let diff: f64 = prev - candidate;
                            report.path_consistency = report.path_consistency.max(diff.abs());
                        }
                    }
                    let qv_candidate = qv + e.dm * e.dm;
                    if next_qv[e.child].is_none() {
                        next_qv[e.child] = Some(qv_candidate);
                    }
                }
            }
            bracket = next;
            discrete_qv = next_qv;
            for (i, value) in bracket.iter().enumerate() {
                let node = self.node_at(k + 1, i);
                let h = self.h(node);
                if let Some(b) = value {
                    report.max_bracket_violation = report.max_bracket_violation.max((b - h).abs());
                }
                if let Some(q) = discrete_qv[i] {
                    report.discrete_qv_excess = report.discrete_qv_excess.max((q - h).abs());
                }
            }
        }

        // One-step increments and the compensator's martingale property.
        for k in 0..n {
            for i in 0..self.node_count(k) {
                let t = self.transition(k, i);
                let (mut sw, mut sm, mut total) = (0.0f64, 0.0f64, 0.0f64);
                for e in t.edges() {
                    total += e.prob;
                    sw += e.prob * e.dw;
                    sm += e.prob * e.dm;
                }
                report.max_prob_defect = report.max_prob_defect.max((total - 1.0).abs());
                report.max_mean_dw = report.max_mean_dw.max(sw.abs());
                report.max_mean_dm = report.max_mean_dm.max(sm.abs());
            }
        }
        let m = self.martingale_m();
        for target in 1..=n {
            let values = m.step(target).expect("M covers every step");
            let mut rolled = values.to_vec();
            for k in (0..target).rev() {
                rolled = self.expect_step(k, &rolled, Exec::Sequential);
                let here = m.step(k).expect("M covers every step");
                for (a, b) in rolled.iter().zip(here) {
                    report.max_compensator_violation = report.max_compensator_violation.max((a - b).abs());
                }
            }
        }
        report
    }
}

/// Outcome of [`DefaultLattice::bracket_checks`]; every entry is a maximum
/// absolute violation.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BracketReport {
    /// `|[M]_k - H_k|` over all nodes, with `[M]` the sum of squared jumps.
    pub max_bracket_violation: f64,
    /// Disagreement of the bracket between different paths into one node.
    pub path_consistency: f64,
    /// `|E[H_k - A_k | G_j] - (H_j - A_j)|` over all `j < k`.
    pub max_compensator_violation: f64,
    pub max_mean_dw: f64,
    pub max_mean_dm: f64,
    pub max_prob_defect: f64,
    /// `|sum (ΔM)^2 - H|` including the compensator increments; this is an
    /// O(dt) discretization effect, reported for information only.
    pub discrete_qv_excess: f64,
}

impl BracketReport {
    pub fn max_violation(&self) -> f64 {
        [
            self.max_bracket_violation,
            self.path_consistency,
            self.max_compensator_violation,
            self.max_mean_dw,
            self.max_mean_dm,
            self.max_prob_defect,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Node-indexed values over a contiguous range of steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcessField {
    first_step: usize,
    steps: Vec<Vec<f64>>,
}

impl ProcessField {
    pub fn from_steps(first_step: usize, steps: Vec<Vec<f64>>) -> Self {
        Self { first_step, steps }
    }

    pub fn first_step(&self) -> usize {
        self.first_step
    }

    pub fn last_step(&self) -> usize {
        self.first_step + self.steps.len() - 1
    }

    pub fn covers(&self, step: usize) -> bool {
        step >= self.first_step && step <= self.last_step()
    }

    pub fn step(&self, step: usize) -> Option<&[f64]> {
        step.checked_sub(self.first_step)
            .and_then(|i| self.steps.get(i))
            .map(Vec::as_slice)
    }

    pub fn step_mut(&mut self, step: usize) -> Option<&mut Vec<f64>> {
        step.checked_sub(self.first_step).and_then(|i| self.steps.get_mut(i))
    }

    pub fn get(&self, lattice: &DefaultLattice, node: NodeId) -> Option<f64> {
        let idx = lattice.index_of(node).ok()?;
        self.step(node.step).and_then(|s| s.get(idx)).copied()
    }

    pub fn set(&mut self, lattice: &DefaultLattice, node: NodeId, value: f64) -> Result<(), LatticeError> {
        let idx = lattice.index_of(node)?;
        let slot = self
            .step_mut(node.step)
            .and_then(|s| s.get_mut(idx))
            .ok_or(LatticeError::StepNotCovered(node.step))?;
        *slot = value;
        Ok(())
    }

    pub fn iter_steps(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.steps.iter().enumerate().map(|(i, v)| (self.first_step + i, v.as_slice()))
    }

    /// `max |self - other|` over the common steps.
    pub fn max_abs_diff(&self, other: &ProcessField) -> f64 {
        let mut worst = 0.0f64;
        for (k, a) in self.iter_steps() {
            if let Some(b) = other.step(k) {
                for (x, y) in a.iter().zip(b) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        worst
    }

    /// `max |self - other|` over nodes the root reaches with positive
    /// probability; values elsewhere do not affect any expectation.
    pub fn max_abs_diff_reachable(&self, other: &ProcessField, lattice: &DefaultLattice) -> f64 {
        let law = lattice.root_law();
        let mut worst = 0.0f64;
        for (k, a) in self.iter_steps() {
            if let (Some(b), Some(p)) = (other.step(k), law.get(k)) {
                for ((x, y), q) in a.iter().zip(b).zip(p) {
                    if *q > 0.0 {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.steps.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(t: f64, n: usize, lambda: f64) -> DefaultLattice {
        DefaultLattice::new(t, n, IntensitySpec::constant(lambda, n).unwrap()).unwrap()
    }

    #[test]
    fn zero_intensity_is_plain_binomial() {
        let lat = lattice(1.0, 1, 0.0);
        let t = lat.transition(0, 0);
        let live: Vec<_> = t.edges().iter().filter(|e| e.prob > 0.0).collect();
        assert_eq!(live.len(), 2);
        for e in live {
            assert_eq!(e.prob, 0.5);
            assert!(lat.node_at(1, e.child).is_alive());
        }
        assert_eq!(lat.node_at(1, 0), NodeId::alive(1, 0));
        assert_eq!(lat.node_at(1, 1), NodeId::alive(1, 1));
    }

    #[test]
    fn node_count_matches_enumerated_states() {
        let lat = lattice(1.0, 2, 0.5);
        assert_eq!(lat.default_prob(0), 0.25);
        // Enumerate the states reachable through the kernel.
        let mut seen = std::collections::BTreeSet::new();
        let mut frontier = vec![NodeId::ROOT];
        for k in 0..2 {
            let mut next = Vec::new();
            for node in frontier {
                let idx = lat.index_of(node).unwrap();
                for e in lat.transition(k, idx).edges() {
                    next.push(lat.node_at(k + 1, e.child));
                }
            }
            next.sort();
            next.dedup();
            frontier = next;
        }
        seen.extend(frontier);
        assert_eq!(seen.len(), 9);
        assert_eq!(lat.node_count(2), 9);
        for (i, n) in seen.iter().enumerate() {
            let _ = i;
            assert_eq!(lat.node_at(2, lat.index_of(*n).unwrap()), *n);
        }
    }

    #[test]
    fn rejects_large_intensity() {
        let err = DefaultLattice::new(1.0, 4, IntensitySpec::constant(5.0, 4).unwrap()).unwrap_err();
        assert!(matches!(err, LatticeError::ProbabilityTooLarge { .. }));
        assert!(matches!(
            IntensitySpec::constant(-0.1, 3),
            Err(LatticeError::NegativeIntensity { .. })
        ));
    }

    #[test]
    fn cond_expect_examples() {
        let lat = lattice(1.0, 2, 0.5);
        let zero = lat.zero_field();
        assert_eq!(lat.cond_expect(&zero, 2, NodeId::ROOT).unwrap(), 0.0);

        let w = lat.w_field();
        for node in lat.nodes(1) {
            let e = lat.cond_expect(&w, 2, node).unwrap();
            assert!((e - lat.w(node)).abs() < 1e-15);
        }

        // P(default by step 2) = 1 - (1 - 0.25)^2
        let h = lat.h_field();
        let e = lat.cond_expect(&h, 2, NodeId::ROOT).unwrap();
        assert!((e - 0.4375).abs() < 1e-15);

        // m = 0 returns the value itself.
        let node = NodeId::defaulted(2, 1, 1);
        assert_eq!(lat.cond_expect(&h, 2, node).unwrap(), 1.0);
    }

    #[test]
    fn cond_expect_errors() {
        let lat = lattice(1.0, 2, 0.5);
        let h = lat.h_field();
        assert!(matches!(
            lat.cond_expect(&h, 0, NodeId::alive(1, 0)),
            Err(LatticeError::StepOrder { .. })
        ));
        assert!(matches!(
            lat.cond_expect(&h, 2, NodeId::alive(1, 3)),
            Err(LatticeError::UnknownNode(_))
        ));
        let partial = ProcessField::from_steps(0, vec![vec![0.0]]);
        assert!(matches!(
            lat.cond_expect(&partial, 2, NodeId::ROOT),
            Err(LatticeError::StepNotCovered(2))
        ));
    }

    #[test]
    fn martingale_m_examples() {
        let lat0 = lattice(1.0, 3, 0.0);
        let m0 = lat0.martingale_m();
        for k in 0..=3 {
            for node in lat0.nodes(k).filter(NodeId::is_alive) {
                assert_eq!(m0.get(&lat0, node).unwrap(), 0.0);
            }
        }

        let lat = lattice(1.0, 2, 0.5);
        let m = lat.martingale_m();
        assert!((m.get(&lat, NodeId::alive(1, 0)).unwrap() + 0.25).abs() < 1e-15);
        assert!((m.get(&lat, NodeId::defaulted(2, 0, 1)).unwrap() - 0.75).abs() < 1e-15);
        // Martingale property at every node.
        for k in 0..2 {
            let next = lat.expect_step(k, m.step(k + 1).unwrap(), Exec::Sequential);
            for (a, b) in next.iter().zip(m.step(k).unwrap()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bracket_checks_are_exact() {
        let r = lattice(1.0, 4, 0.0).bracket_checks();
        assert_eq!(r.max_violation(), 0.0);
        let r = lattice(1.0, 4, 0.5).bracket_checks();
        assert!(r.max_violation() <= 1e-12, "{r:?}");
        assert!(r.discrete_qv_excess > 0.0);
    }

    #[test]
    fn bracket_jumps_once_at_default() {
        let lat = lattice(1.0, 4, 0.5);
        // up, default during step 1 -> 2, then down, up
        let path = [
            NodeId::ROOT,
            NodeId::alive(1, 1),
            NodeId::defaulted(2, 2, 2),
            NodeId::defaulted(3, 2, 2),
            NodeId::defaulted(4, 3, 2),
        ];
        let mut bracket = 0.0;
        let mut trace = vec![0.0];
        for k in 0..4 {
            let from = lat.index_of(path[k]).unwrap();
            let to = lat.index_of(path[k + 1]).unwrap();
            let e = lat.edge_between(k, from, to).expect("edge exists");
            bracket += e.dh * e.dh;
            trace.push(bracket);
        }
        assert_eq!(trace, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn paths_are_positive_probability() {
        let lat = lattice(1.0, 3, 0.0);
        assert_eq!(lat.paths(1000).unwrap().len(), 8);
        let lat = lattice(1.0, 2, 0.5);
        // 4 first-step branches, then 4 from alive or 2 from defaulted.
        assert_eq!(lat.paths(1000).unwrap().len(), 2 * 4 + 2 * 2);
        assert!(matches!(lat.paths(3), Err(LatticeError::TooManyPaths(_))));
    }
}
