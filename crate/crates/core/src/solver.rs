//! Backward induction for the reflected anticipated equation on the default
//! lattice, and the Picard fixed-point iteration of its solution map.
//!
//! At a node of step `k` the next value `Y_{k+1}` is decomposed exactly on
//! the four orthogonal kernel functions `1, ΔW, ΔM, ΔW·ΔM`:
//!
//! ```text
//! Y_{k+1} = E[Y_{k+1} | node] + z ΔW + u ΔM + psi ΔW ΔM
//! ```
//!
//! and the value is `Y_k = max(E[Y_{k+1} | node] + F dt, S_k)` with
//! `ΔK_k = Y_k - (E[Y_{k+1} | node] + F dt)`. The jump route reaches the same
//! value by conditioning on the default branch and using `f` directly with
//! `dH = dM + lambda 1_{pre-default} dt`.

use serde::Serialize;
use thiserror::Error;

use crate::driver::{Env, EvalError, LipschitzError, Var};
use crate::lattice::{DefaultLattice, LatticeError, NodeId, ProcessField};
use crate::par::Exec;
use crate::scenario::{Scenario, ScenarioError, Scheme};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Lipschitz(#[from] LipschitzError),
    #[error("driver evaluation failed at {node:?}: {source}")]
    Eval { node: NodeId, source: EvalError },
    #[error("implicit step did not converge at {node:?} after {iterations} iterations (last change {last_change:e}); dt is too large for the driver's Lipschitz constant")]
    ImplicitDiverged { node: NodeId, iterations: usize, last_change: f64 },
    #[error("Picard iteration did not reach tolerance in {} iterations; distances {history:?}", history.len())]
    MaxIter { history: Vec<f64> },
    #[error("fields do not match the lattice: {0}")]
    LatticeMismatch(String),
    #[error("invalid options: {0}")]
    BadOptions(&'static str),
}

/// How the martingale part is split off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Route {
    /// Project on `ΔW`, `ΔM`, `ΔW·ΔM` and use the `M`-form driver `F`.
    #[default]
    Martingale,
    /// Condition on the default branch and use the `H`-form driver `f`.
    Jump,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveOptions {
    pub route: Route,
    pub exec: Exec,
}

/// `(Y, Z, U)` on the whole lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub y: ProcessField,
    pub z: ProcessField,
    pub u: ProcessField,
}

impl Triple {
    pub fn zero(lattice: &DefaultLattice) -> Self {
        Self { y: lattice.zero_field(), z: lattice.zero_field(), u: lattice.zero_field() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Diagnostics {
    /// `max |psi|` over all nodes.
    pub max_abs_psi: f64,
    /// `max |psi| * ||ΔW ΔM||_2`, the per-step size of the cross term.
    pub max_cross_term: f64,
    /// `E[ΔK_k]` under the root law, per step.
    pub expected_dk: Vec<f64>,
    /// Largest number of inner iterations used by the implicit scheme.
    pub max_inner_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub y: ProcessField,
    pub z: ProcessField,
    pub u: ProcessField,
    /// Coefficient on `ΔW·ΔM` in the one-step representation.
    pub psi: ProcessField,
    /// Reflection increment `ΔK_k` at each node; `K` along a path is the
    /// running sum with `K_{0-} = 0`.
    pub dk: ProcessField,
    /// `M`-form driver value `F` used at each node (zero at the horizon).
    pub drive: ProcessField,
    pub obstacle: ProcessField,
    pub diagnostics: Diagnostics,
}

impl Solution {
    pub fn triple(&self) -> Triple {
        Triple { y: self.y.clone(), z: self.z.clone(), u: self.u.clone() }
    }

    pub fn y0(&self) -> f64 {
        self.y.step(0).map_or(f64::NAN, |s| s[0])
    }

    /// Cumulative `K` along a path of node indices (one per step, from the
    /// root): `K_j = sum_{i < j} ΔK_i`, so that `K_T - K_{t_j}` collects the
    /// increments of steps `j..N`.
    pub fn k_along(&self, path: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(path.len());
        let mut acc = 0.0;
        for (k, &idx) in path.iter().enumerate() {
            out.push(acc);
            acc += self.dk.step(k).map_or(0.0, |s| s[idx]);
        }
        out
    }
}

/// Result of a single node update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepOutcome {
    pub y: f64,
    pub z: f64,
    pub u: f64,
    pub psi: f64,
    pub dk: f64,
    /// `F` at the node.
    pub drive: f64,
    pub inner_iterations: usize,
}

/// Where the driver arguments come from.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Freeze<'a> {
    /// Everything from the current backward pass.
    Nothing,
    /// Anticipated arguments from fixed fields, the rest current.
    Anticipation { y: &'a ProcessField, z: &'a ProcessField },
    /// All driver arguments from a previous iterate (Picard map).
    All(&'a Triple),
}

/// Anticipated and frozen arguments for one node.
#[derive(Debug, Clone, Copy, Default)]
struct NodeArgs {
    /// `None`: anticipated `y` equals the scheme's `y` argument (lag zero).
    ey: Option<f64>,
    /// `None`: anticipated `z` equals the current `z` (lag zero).
    ez: Option<f64>,
    /// Frozen `(y, z, u)` driver arguments.
    frozen: Option<(f64, f64, f64)>,
}

struct Stepper<'a> {
    scenario: &'a Scenario,
    route: Route,
}

impl Stepper<'_> {
    fn node_step(&self, k: usize, idx: usize, next_y: &[f64], obstacle: f64, args: NodeArgs) -> Result<StepOutcome, SolveError> {
        let sc = self.scenario;
        let lat = &sc.lattice;
        let dt = lat.dt();
        let node = lat.node_at(k, idx);
        let trans = lat.transition(k, idx);
        let edges = trans.edges();
        let lambda = lat.lambda(k);
        let p = lat.default_prob(k);
        let alive = node.is_alive();
        let jumps = alive && p > 0.0;

        let (expect, base, z, u, psi) = match self.route {
            Route::Martingale => {
                let mut e = 0.0;
                let mut zw = 0.0;
                let mut um = 0.0;
                let mut cross = 0.0;
                for edge in edges {
                    let v = edge.prob * next_y[edge.child];
                    e += v;
                    zw += v * edge.dw;
                    um += v * edge.dm;
                    cross += v * edge.dw * edge.dm;
                }
                let z = zw / dt;
                let (u, psi) = if jumps {
                    let var_m = p * (1.0 - p);
                    (um / var_m, cross / (dt * var_m))
                } else {
                    (0.0, 0.0)
                };
                (e, e, z, u, psi)
            }
            Route::Jump => {
                let s = lat.sqrt_dt();
                // Edges are (alive up, alive down, default up, default down).
                let (au, ad) = (next_y[edges[0].child], next_y[edges[1].child]);
                let mean_a = 0.5 * (au + ad);
                let slope_a = (au - ad) / (2.0 * s);
                if jumps {
                    let (du, dd) = (next_y[edges[2].child], next_y[edges[3].child]);
                    let mean_d = 0.5 * (du + dd);
                    let slope_d = (du - dd) / (2.0 * s);
                    let u = mean_d - mean_a;
                    let z = (1.0 - p) * slope_a + p * slope_d;
                    let e = (1.0 - p) * mean_a + p * mean_d;
                    (e, mean_a, z, u, slope_d - slope_a)
                } else {
                    (mean_a, mean_a, slope_a, 0.0, 0.0)
                }
            }
        };

        let state = sc.state_env(node);
        let eval = |y_arg: f64, z_arg: f64, u_arg: f64| -> Result<(f64, f64), SolveError> {
            let env: Env = state
                .with(Var::Y, y_arg)
                .with(Var::Z, z_arg)
                .with(Var::Ey, args.ey.unwrap_or(y_arg))
                .with(Var::Ez, args.ez.unwrap_or(z))
                .with(Var::U, u_arg);
            let big_f = sc
                .driver
                .m_form(&env, lambda)
                .map_err(|source| SolveError::Eval { node, source })?;
            let increment = match self.route {
                Route::Martingale => big_f,
                Route::Jump => sc
                    .driver
                    .h_form(&env, lambda)
                    .map_err(|source| SolveError::Eval { node, source })?,
            };
            Ok((increment, big_f))
        };

        let mut inner_iterations = 0;
        let (continuation, drive) = match (args.frozen, sc.scheme) {
            (Some((y_arg, z_arg, u_arg)), _) => {
                let (inc, f) = eval(y_arg, z_arg, u_arg)?;
                (base + inc * dt, f)
            }
            (None, Scheme::Explicit) => {
                let (inc, f) = eval(expect, z, u)?;
                (base + inc * dt, f)
            }
            (None, Scheme::Implicit) => {
                // Fixed point of y = max(E + F(y) dt, S): the driver sees the
                // reflected value, as in the continuous equation.
                let mut y = expect.max(obstacle);
                let mut last_change = f64::INFINITY;
                let mut result = None;
                for it in 1..=sc.implicit_max_iter {
                    let (inc, _) = eval(y, z, u)?;
                    let next = (base + inc * dt).max(obstacle);
                    last_change = (next - y).abs();
                    y = next;
                    if last_change <= sc.implicit_tol * (1.0 + y.abs()) {
                        let (inc, f) = eval(y, z, u)?;
                        inner_iterations = it;
                        result = Some((base + inc * dt, f));
                        break;
                    }
                }
                match result {
                    Some(r) => r,
                    None => {
                        return Err(SolveError::ImplicitDiverged {
                            node,
                            iterations: sc.implicit_max_iter,
                            last_change,
                        })
                    }
                }
            }
        };

        let y = continuation.max(obstacle);
        Ok(StepOutcome {
            y,
            z,
            u,
            psi,
            dk: y - continuation,
            drive,
            inner_iterations,
        })
    }
}

/// Per-step output of the backward pass.
struct StepFields {
    y: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
    psi: Vec<f64>,
    dk: Vec<f64>,
    drive: Vec<f64>,
    inner: usize,
}

fn terminal_values(scenario: &Scenario) -> Result<Vec<f64>, SolveError> {
    let n = scenario.n_steps();
    scenario
        .lattice
        .nodes(n)
        .map(|node| scenario.terminal_at(node).map_err(SolveError::from))
        .collect()
}

fn obstacle_field(scenario: &Scenario) -> Result<ProcessField, SolveError> {
    let lat = &scenario.lattice;
    let steps = (0..=lat.n_steps())
        .map(|k| lat.nodes(k).map(|n| scenario.obstacle_at(n).map_err(SolveError::from)).collect())
        .collect::<Result<Vec<Vec<f64>>, _>>()?;
    Ok(ProcessField::from_steps(0, steps))
}

/// Values of a `Y` source at step `a`, with `Y_t = ξ` for `t >= T`.
fn y_source<'a>(src: &'a ProcessField, terminal: &'a [f64], a: usize, n: usize) -> &'a [f64] {
    if a >= n {
        terminal
    } else {
        src.step(a).expect("source covers the lattice")
    }
}

pub(crate) fn solve_internal(scenario: &Scenario, opts: SolveOptions, freeze: Freeze<'_>) -> Result<Solution, SolveError> {
    let lat = &scenario.lattice;
    let n = lat.n_steps();
    let delta = scenario.delta_steps;
    let exec = opts.exec;
    let terminal = terminal_values(scenario)?;
    let obstacle = obstacle_field(scenario)?;
    let stepper = Stepper { scenario, route: opts.route };

    for src in match freeze {
        Freeze::Nothing => vec![],
        Freeze::Anticipation { y, z } => vec![y, z],
        Freeze::All(t) => vec![&t.y, &t.z, &t.u],
    } {
        if src.first_step() != 0 || src.last_step() < n {
            return Err(SolveError::LatticeMismatch("frozen field must cover every step".into()));
        }
        for k in 0..=n {
            if src.step(k).map(<[f64]>::len) != Some(lat.node_count(k)) {
                return Err(SolveError::LatticeMismatch(format!("frozen field has the wrong shape at step {k}")));
            }
        }
    }

    let mut y_steps: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    let mut z_steps: Vec<Vec<f64>> = vec![Vec::new(); n + 1];
    let zeros = |k: usize| vec![0.0; lat.node_count(k)];
    let mut u_steps = vec![Vec::new(); n + 1];
    let mut psi_steps = vec![Vec::new(); n + 1];
    let mut dk_steps = vec![Vec::new(); n + 1];
    let mut drive_steps = vec![Vec::new(); n + 1];
    y_steps[n] = terminal.clone();
    z_steps[n] = zeros(n);
    u_steps[n] = zeros(n);
    psi_steps[n] = zeros(n);
    dk_steps[n] = zeros(n);
    drive_steps[n] = zeros(n);
    let mut max_inner = 0;

    for k in (0..n).rev() {
        let count = lat.node_count(k);
        let a = k + delta;

        // Anticipated arguments for every node of step k.
        let (ey, ez): (Option<Vec<f64>>, Option<Vec<f64>>) = match freeze {
            Freeze::Nothing => {
                if delta == 0 {
                    (None, None)
                } else if a >= n {
                    (Some(lat.expect_back(&terminal, n, k, exec)), Some(vec![0.0; count]))
                } else {
                    (
                        Some(lat.expect_back(&y_steps[a], a, k, exec)),
                        Some(lat.expect_back(&z_steps[a], a, k, exec)),
                    )
                }
            }
            Freeze::Anticipation { y, z } | Freeze::All(Triple { y, z, .. }) => {
                if delta == 0 {
                    let ey = match scenario.scheme {
                        Scheme::Explicit => lat.expect_step(k, y_source(y, &terminal, k + 1, n), exec),
                        Scheme::Implicit => y.step(k).expect("checked").to_vec(),
                    };
                    (Some(ey), Some(z.step(k).expect("checked").to_vec()))
                } else if a >= n {
                    (Some(lat.expect_back(&terminal, n, k, exec)), Some(vec![0.0; count]))
                } else {
                    (
                        Some(lat.expect_back(y.step(a).expect("checked"), a, k, exec)),
                        Some(lat.expect_back(z.step(a).expect("checked"), a, k, exec)),
                    )
                }
            }
        };

        let frozen: Option<(Vec<f64>, &[f64], &[f64])> = match freeze {
            Freeze::All(t) => {
                let y_arg = match scenario.scheme {
                    Scheme::Explicit => lat.expect_step(k, y_source(&t.y, &terminal, k + 1, n), exec),
                    Scheme::Implicit => t.y.step(k).expect("checked").to_vec(),
                };
                Some((y_arg, t.z.step(k).expect("checked"), t.u.step(k).expect("checked")))
            }
            _ => None,
        };

        let next_y = &y_steps[k + 1];
        let s_k = obstacle.step(k).expect("obstacle covers every step");
        let outcomes = exec.try_map(count, |i| {
            let args = NodeArgs {
                ey: ey.as_ref().map(|v| v[i]),
                ez: ez.as_ref().map(|v| v[i]),
                frozen: frozen.as_ref().map(|(y, z, u)| (y[i], z[i], u[i])),
            };
            stepper.node_step(k, i, next_y, s_k[i], args)
        })?;

        let mut fields = StepFields {
            y: Vec::with_capacity(count),
            z: Vec::with_capacity(count),
            u: Vec::with_capacity(count),
            psi: Vec::with_capacity(count),
            dk: Vec::with_capacity(count),
            drive: Vec::with_capacity(count),
            inner: 0,
        };
        for o in outcomes {
            fields.y.push(o.y);
            fields.z.push(o.z);
            fields.u.push(o.u);
            fields.psi.push(o.psi);
            fields.dk.push(o.dk);
            fields.drive.push(o.drive);
            fields.inner = fields.inner.max(o.inner_iterations);
        }
        max_inner = max_inner.max(fields.inner);
        y_steps[k] = fields.y;
        z_steps[k] = fields.z;
        u_steps[k] = fields.u;
        psi_steps[k] = fields.psi;
        dk_steps[k] = fields.dk;
        drive_steps[k] = fields.drive;
    }

    let law = lat.root_law();
    let expected_dk = (0..=n)
        .map(|k| law[k].iter().zip(&dk_steps[k]).map(|(p, d)| p * d).sum())
        .collect();
    let max_abs_psi = psi_steps.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut max_cross_term = 0.0f64;
    for (k, step) in psi_steps.iter().enumerate().take(n) {
        let p = lat.default_prob(k);
        let scale = (lat.dt() * p * (1.0 - p)).sqrt();
        for (i, v) in step.iter().enumerate() {
            if lat.node_at(k, i).is_alive() {
                max_cross_term = max_cross_term.max(v.abs() * scale);
            }
        }
    }

    Ok(Solution {
        y: ProcessField::from_steps(0, y_steps),
        z: ProcessField::from_steps(0, z_steps),
        u: ProcessField::from_steps(0, u_steps),
        psi: ProcessField::from_steps(0, psi_steps),
        dk: ProcessField::from_steps(0, dk_steps),
        drive: ProcessField::from_steps(0, drive_steps),
        obstacle,
        diagnostics: Diagnostics {
            max_abs_psi,
            max_cross_term,
            expected_dk,
            max_inner_iterations: max_inner,
        },
    })
}

/// Solve by backward induction. With a positive lag the anticipated values
/// `Y_{k+δ}`, `Z_{k+δ}` are already known when step `k` is processed.
pub fn solve_backward(scenario: &Scenario) -> Result<Solution, SolveError> {
    solve_internal(scenario, SolveOptions::default(), Freeze::Nothing)
}

pub fn solve_backward_with(scenario: &Scenario, opts: SolveOptions) -> Result<Solution, SolveError> {
    solve_internal(scenario, opts, Freeze::Nothing)
}

/// Solve with the anticipated arguments read from fixed `y`, `z` fields
/// instead of the solution itself (the anticipation becomes a parameter).
pub fn solve_with_anticipation(
    scenario: &Scenario,
    y: &ProcessField,
    z: &ProcessField,
    opts: SolveOptions,
) -> Result<Solution, SolveError> {
    solve_internal(scenario, opts, Freeze::Anticipation { y, z })
}

/// One node update given the solution at later steps.
///
/// `future_y` and `future_z` must cover steps `node.step + 1 ..= N` (step
/// `N` of `future_y` holds `ξ`). Anticipated arguments are computed from
/// them by exact conditional expectation.
pub fn backward_step(
    scenario: &Scenario,
    node: NodeId,
    future_y: &ProcessField,
    future_z: &ProcessField,
    route: Route,
) -> Result<StepOutcome, SolveError> {
    let lat = &scenario.lattice;
    let n = lat.n_steps();
    let idx = lat.index_of(node)?;
    let k = node.step;
    if k >= n {
        return Err(SolveError::LatticeMismatch("no backward step at the horizon".into()));
    }
    let next_y = future_y.step(k + 1).ok_or(LatticeError::StepNotCovered(k + 1))?;
    if next_y.len() != lat.node_count(k + 1) {
        return Err(SolveError::LatticeMismatch(format!("future Y has the wrong shape at step {}", k + 1)));
    }
    let a = k + scenario.delta_steps;
    let (ey, ez) = if scenario.delta_steps == 0 {
        (None, None)
    } else if a >= n {
        let terminal = ProcessField::from_steps(n, vec![terminal_values(scenario)?]);
        (Some(lat.cond_expect(&terminal, n, node)?), Some(0.0))
    } else {
        (Some(lat.cond_expect(future_y, a, node)?), Some(lat.cond_expect(future_z, a, node)?))
    };
    let stepper = Stepper { scenario, route };
    stepper.node_step(k, idx, next_y, scenario.obstacle_at(node)?, NodeArgs { ey, ez, frozen: None })
}

/// Weighted distance between two triples:
/// `sum_k e^{beta t_k} dt E[beta |ΔY_k|^2 + |ΔZ_k|^2 + lambda_k (1 - H_k) |ΔU_k|^2]`
/// over steps `0..N`, expectation under the root law.
pub fn beta_norm(lattice: &DefaultLattice, a: &Triple, b: &Triple, beta: f64) -> Result<f64, SolveError> {
    let n = lattice.n_steps();
    let law = lattice.root_law();
    let dt = lattice.dt();
    let mut total = 0.0;
    for k in 0..n {
        let count = lattice.node_count(k);
        let get = |f: &ProcessField| -> Result<Vec<f64>, SolveError> {
            match f.step(k) {
                Some(s) if s.len() == count => Ok(s.to_vec()),
                _ => Err(SolveError::LatticeMismatch(format!("step {k} missing or misshaped"))),
            }
        };
        let (ya, yb) = (get(&a.y)?, get(&b.y)?);
        let (za, zb) = (get(&a.z)?, get(&b.z)?);
        let (ua, ub) = (get(&a.u)?, get(&b.u)?);
        let lambda = lattice.lambda(k);
        let mut step_sum = 0.0;
        for i in 0..count {
            let alive = if lattice.node_at(k, i).is_alive() { 1.0 } else { 0.0 };
            let dy = ya[i] - yb[i];
            let dz = za[i] - zb[i];
            let du = ua[i] - ub[i];
            step_sum += law[k][i] * (beta * dy * dy + dz * dz + lambda * alive * du * du);
        }
        total += (beta * lattice.time(k)).exp() * dt * step_sum;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub rho: f64,
    pub beta: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub exec: Exec,
}

impl PicardOptions {
    /// `beta = 1 + 10 rho C'^2` with `C'` the grid estimate for the scenario's
    /// `M`-form driver.
    pub fn for_scenario(scenario: &Scenario, rho: f64, tol: f64, max_iter: usize) -> Result<Self, SolveError> {
        let bound = scenario.m_form_bound(&scenario.sample_grid())?;
        Ok(Self {
            rho,
            beta: 1.0 + 10.0 * rho * bound.c_prime * bound.c_prime,
            tol,
            max_iter,
            exec: Exec::default(),
        })
    }

    fn validate(&self) -> Result<(), SolveError> {
        if !(self.rho >= 1.0) {
            return Err(SolveError::BadOptions("rho must be at least 1"));
        }
        if !(self.beta > 0.0) {
            return Err(SolveError::BadOptions("beta must be positive"));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(SolveError::BadOptions("tolerance must be positive and max_iter non-zero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardOutcome {
    pub solution: Solution,
    /// `history[n-1]` is the weighted distance between iterates `n` and `n-1`.
    pub history: Vec<f64>,
    pub beta: f64,
}

impl PicardOutcome {
    /// Ratios of consecutive distances.
    pub fn ratios(&self) -> Vec<f64> {
        self.history.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// Iterate the solution map from zero processes: each iterate solves the
/// reflected equation with every driver argument frozen at the previous
/// iterate. Stops when the weighted distance falls to `tol`.
pub fn solve_picard(scenario: &Scenario, opts: PicardOptions) -> Result<PicardOutcome, SolveError> {
    opts.validate()?;
    let lat = &scenario.lattice;
    let solve_opts = SolveOptions { route: Route::Martingale, exec: opts.exec };
    let mut current = Triple::zero(lat);
    let mut history = Vec::new();
    for _ in 0..opts.max_iter {
        let next = solve_internal(scenario, solve_opts, Freeze::All(&current))?;
        let next_triple = next.triple();
        let dist = beta_norm(lat, &next_triple, &current, opts.beta)?;
        history.push(dist);
        if dist <= opts.tol {
            return Ok(PicardOutcome { solution: next, history, beta: opts.beta });
        }
        current = next_triple;
    }
    Err(SolveError::MaxIter { history })
}
