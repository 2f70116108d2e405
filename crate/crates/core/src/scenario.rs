//! Problem statement: lattice, anticipation lag, driver, obstacle, terminal
//! payoff and the time-stepping scheme.

use serde::Serialize;
use thiserror::Error;

use crate::driver::{
    check_m_form_lipschitz, estimate_lipschitz, parse_expr, Driver, DriverExpr, DriverForm, Env, EvalError,
    LipschitzError, MFormBound, ParseError, SampleGrid, Var, VarSet,
};
use crate::lattice::{DefaultLattice, IntensitySpec, LatticeError, NodeId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("cannot parse {field}: {source}")]
    Parse { field: &'static str, source: ParseError },
    #[error("cannot evaluate {field} at {node:?}: {source}")]
    Eval { field: &'static str, node: NodeId, source: EvalError },
    #[error("terminal value {xi} is below the obstacle {obstacle} at {node:?}")]
    TerminalBelowObstacle { node: NodeId, xi: f64, obstacle: f64 },
    #[error("anticipation lag {lag} is not a whole number of steps of size {dt}")]
    LagNotOnGrid { lag: f64, dt: f64 },
    #[error("implicit tolerance must be positive and the iteration cap non-zero")]
    BadImplicitOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Scheme {
    /// Driver evaluated at `y = E[Y_{k+1} | node]`.
    #[default]
    Explicit,
    /// Driver evaluated at the reflected `y` itself, solved by an inner
    /// fixed point.
    Implicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub lattice: DefaultLattice,
    /// Anticipation lag in steps: `δ = delta_steps * dt`.
    pub delta_steps: usize,
    pub driver: Driver,
    /// `S_t` as a function of `(t, w, h)`.
    pub obstacle: DriverExpr,
    /// `ξ` as a function of `(t, w, h, tau)` evaluated at `t = T`.
    pub terminal: DriverExpr,
    pub scheme: Scheme,
    pub implicit_tol: f64,
    pub implicit_max_iter: usize,
}

impl Scenario {
    pub fn builder(horizon: f64, n_steps: usize) -> ScenarioBuilder {
        ScenarioBuilder::new(horizon, n_steps)
    }

    pub fn n_steps(&self) -> usize {
        self.lattice.n_steps()
    }

    pub fn state_env(&self, node: NodeId) -> Env {
        let lat = &self.lattice;
        Env::new()
            .with(Var::T, lat.time(node.step))
            .with(Var::W, lat.w(node))
            .with(Var::H, lat.h(node))
    }

    pub fn obstacle_at(&self, node: NodeId) -> Result<f64, ScenarioError> {
        self.obstacle
            .eval(&self.state_env(node))
            .map_err(|source| ScenarioError::Eval { field: "obstacle", node, source })
    }

    pub fn terminal_at(&self, node: NodeId) -> Result<f64, ScenarioError> {
        let env = self.state_env(node).with(Var::Tau, self.lattice.tau(node));
        self.terminal
            .eval(&env)
            .map_err(|source| ScenarioError::Eval { field: "terminal", node, source })
    }

    /// Checks `ξ >= S_T` at every terminal node and that both expressions
    /// evaluate everywhere they are needed.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.implicit_tol > 0.0) || self.implicit_max_iter == 0 {
            return Err(ScenarioError::BadImplicitOptions);
        }
        let n = self.n_steps();
        for k in 0..=n {
            for node in self.lattice.nodes(k) {
                let s = self.obstacle_at(node)?;
                if k == n {
                    let xi = self.terminal_at(node)?;
                    if xi < s {
                        return Err(ScenarioError::TerminalBelowObstacle { node, xi, obstacle: s });
                    }
                }
            }
        }
        Ok(())
    }

    /// Default sampling grid for Lipschitz estimates of this scenario's
    /// driver: one time point per step, `[-2, 2]` boxes.
    pub fn sample_grid(&self) -> SampleGrid {
        let n = self.n_steps();
        let times = (0..n).map(|k| self.lattice.time(k)).collect();
        let lambdas = (0..n).map(|k| self.lattice.lambda(k)).collect();
        SampleGrid::new(-2.0, 2.0, 9, times, lambdas)
    }

    /// Grid estimate of the `M`-form Lipschitz constant `C'`.
    pub fn m_form_bound(&self, grid: &SampleGrid) -> Result<MFormBound, LipschitzError> {
        let est = estimate_lipschitz(&self.driver.expr, grid)?;
        let bump = match self.driver.form {
            DriverForm::H => self.lattice.intensity().lambda_max(),
            // Already in M-form: no correction term to absorb.
            DriverForm::M => 0.0,
        };
        Ok(check_m_form_lipschitz(&est, bump))
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioBuilder {
    horizon: f64,
    n_steps: usize,
    lambdas: Option<Vec<f64>>,
    lambda_max: Option<f64>,
    delta_steps: usize,
    driver: String,
    form: DriverForm,
    obstacle: String,
    terminal: String,
    scheme: Scheme,
    implicit_tol: f64,
    implicit_max_iter: usize,
}

impl ScenarioBuilder {
    pub fn new(horizon: f64, n_steps: usize) -> Self {
        Self {
            horizon,
            n_steps,
            lambdas: None,
            lambda_max: None,
            delta_steps: 0,
            driver: "0".into(),
            form: DriverForm::H,
            obstacle: "-1e9".into(),
            terminal: "0".into(),
            scheme: Scheme::Explicit,
            implicit_tol: 1e-14,
            implicit_max_iter: 200,
        }
    }

    pub fn lambda(mut self, lambda: f64) -> Self {
        self.lambdas = Some(vec![lambda; self.n_steps]);
        self
    }

    pub fn lambdas(mut self, values: Vec<f64>) -> Self {
        self.lambdas = Some(values);
        self
    }

    pub fn lambda_max(mut self, bound: f64) -> Self {
        self.lambda_max = Some(bound);
        self
    }

    pub fn delta_steps(mut self, steps: usize) -> Self {
        self.delta_steps = steps;
        self
    }

    /// Lag as a time; must be a whole number of steps.
    pub fn delta(mut self, lag: f64) -> Result<Self, ScenarioError> {
        let dt = self.horizon / self.n_steps as f64;
        let steps = (lag / dt).round();
        if !(lag >= 0.0) || (steps * dt - lag).abs() > 1e-9 * dt.max(1.0) {
            return Err(ScenarioError::LagNotOnGrid { lag, dt });
        }
        self.delta_steps = steps as usize;
        Ok(self)
    }

    pub fn driver(mut self, text: impl Into<String>) -> Self {
        self.driver = text.into();
        self
    }

    pub fn form(mut self, form: DriverForm) -> Self {
        self.form = form;
        self
    }

    pub fn obstacle(mut self, text: impl Into<String>) -> Self {
        self.obstacle = text.into();
        self
    }

    pub fn terminal(mut self, text: impl Into<String>) -> Self {
        self.terminal = text.into();
        self
    }

    pub fn scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn implicit(mut self, tol: f64, max_iter: usize) -> Self {
        self.scheme = Scheme::Implicit;
        self.implicit_tol = tol;
        self.implicit_max_iter = max_iter;
        self
    }

    pub fn build(self) -> Result<Scenario, ScenarioError> {
        let values = self.lambdas.unwrap_or_else(|| vec![0.0; self.n_steps]);
        let bound = self
            .lambda_max
            .unwrap_or_else(|| values.iter().copied().fold(0.0, f64::max));
        let intensity = IntensitySpec::new(values, bound)?;
        let lattice = DefaultLattice::new(self.horizon, self.n_steps, intensity)?;
        let parse = |field: &'static str, text: &str, vars: VarSet| {
            parse_expr(text, vars).map_err(|source| ScenarioError::Parse { field, source })
        };
        let scenario = Scenario {
            lattice,
            delta_steps: self.delta_steps,
            driver: Driver::new(parse("driver", &self.driver, VarSet::DRIVER)?, self.form),
            obstacle: parse("obstacle", &self.obstacle, VarSet::OBSTACLE)?,
            terminal: parse("terminal", &self.terminal, VarSet::TERMINAL)?,
            scheme: self.scheme,
            implicit_tol: self.implicit_tol,
            implicit_max_iter: self.implicit_max_iter,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}
