//! Grid-sampled Lipschitz constants.
//!
//! Each solution variable is scanned along its axis at a set of base points;
//! the constant reported for a variable is the largest finite-difference
//! ratio seen. Values are lower bounds of the true constants, valid for the
//! sampled grid only.

use serde::Serialize;
use thiserror::Error;

use super::{DriverExpr, Env, EvalError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LipschitzError {
    #[error("degenerate grid: {0}")]
    DegenerateGrid(&'static str),
    #[error("evaluation failed at {point:?}: {source}")]
    Eval { point: Vec<(&'static str, f64)>, source: EvalError },
    #[error("non-finite value {value} at {point:?}")]
    NonFinite { point: Vec<(&'static str, f64)>, value: f64 },
}

/// Sampling box shared by every scanned variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleGrid {
    pub lo: f64,
    pub hi: f64,
    /// Points along each scanned axis.
    pub resolution: usize,
    /// Time points; `lambdas[i]` is the intensity at `times[i]`.
    pub times: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl SampleGrid {
    pub fn new(lo: f64, hi: f64, resolution: usize, times: Vec<f64>, lambdas: Vec<f64>) -> Self {
        Self { lo, hi, resolution, times, lambdas }
    }

    /// `[-2, 2]` with 9 points at a single time with intensity `lambda`.
    pub fn unit(lambda: f64) -> Self {
        Self::new(-2.0, 2.0, 9, vec![0.0], vec![lambda])
    }

    pub fn validate(&self) -> Result<(), LipschitzError> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.hi > self.lo) {
            return Err(LipschitzError::DegenerateGrid("need finite lo < hi"));
        }
        if self.resolution < 2 {
            return Err(LipschitzError::DegenerateGrid("need at least two points per axis"));
        }
        if self.times.is_empty() || self.times.len() != self.lambdas.len() {
            return Err(LipschitzError::DegenerateGrid("need one intensity per time point"));
        }
        Ok(())
    }

    pub fn axis(&self) -> Vec<f64> {
        let n = self.resolution;
        (0..n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    fn coarse(&self) -> [f64; 3] {
        [self.lo, 0.5 * (self.lo + self.hi), self.hi]
    }

    /// Visit every base point: `(time index, env)` with `t`, `w`, `h` and
    /// all solution variables bound, the solution variables on the coarse
    /// three-point grid.
    pub(crate) fn for_each_base(&self, mut visit: impl FnMut(usize, Env) -> Result<(), LipschitzError>) -> Result<(), LipschitzError> {
        let c = self.coarse();
        for (ti, &t) in self.times.iter().enumerate() {
            for h in [0.0, 1.0] {
                for &w in &c {
                    for &y in &c {
                        for &z in &c {
                            for &ey in &c {
                                for &ez in &c {
                                    for &u in &c {
                                        let env = Env::new()
                                            .with(Var::T, t)
                                            .with(Var::W, w)
                                            .with(Var::H, h)
                                            .with(Var::Y, y)
                                            .with(Var::Z, z)
                                            .with(Var::Ey, ey)
                                            .with(Var::Ez, ez)
                                            .with(Var::U, u);
                                        visit(ti, env)?;
                                    }
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

pub(crate) fn describe(env: &Env) -> Vec<(&'static str, f64)> {
    Var::ALL
        .into_iter()
        .filter_map(|v| env.get(v).map(|x| (v.name(), x)))
        .collect()
}

pub(crate) fn eval_checked(
    f: impl Fn(&Env) -> Result<f64, EvalError>,
    env: &Env,
) -> Result<f64, LipschitzError> {
    let value = f(env).map_err(|source| LipschitzError::Eval { point: describe(env), source })?;
    if !value.is_finite() {
        return Err(LipschitzError::NonFinite { point: describe(env), value });
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub c_y: f64,
    pub c_z: f64,
    pub c_ey: f64,
    pub c_ez: f64,
    /// Constant in the intensity-weighted slot: `|Δf| <= c_u lambda_t |Δu|`.
    pub c_u: f64,
    pub grid: SampleGrid,
}

impl LipschitzEstimate {
    pub fn max(&self) -> f64 {
        [self.c_y, self.c_z, self.c_ey, self.c_ez, self.c_u]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Scan `expr` along each solution variable and report the largest
/// finite-difference ratios. The `u` ratio is divided by the intensity at
/// the sample time; times with zero intensity are skipped for `u` since the
/// jump coefficient vanishes identically there.
pub fn estimate_lipschitz(expr: &DriverExpr, grid: &SampleGrid) -> Result<LipschitzEstimate, LipschitzError> {
    estimate_with(|env| expr.eval(env), grid)
}

pub(crate) fn estimate_with(
    f: impl Fn(&Env) -> Result<f64, EvalError>,
    grid: &SampleGrid,
) -> Result<LipschitzEstimate, LipschitzError> {
    grid.validate()?;
    let axis = grid.axis();
    let scanned = [Var::Y, Var::Z, Var::Ey, Var::Ez, Var::U];
    let mut best = [0.0f64; 5];

    // Integrability: the driver must be finite at the origin of the
    // solution variables on every sampled (t, w, h).
    for &t in &grid.times {
        for h in [0.0, 1.0] {
            for &w in &axis {
                let env = Env::new()
                    .with(Var::T, t)
                    .with(Var::W, w)
                    .with(Var::H, h)
                    .with(Var::Y, 0.0)
                    .with(Var::Z, 0.0)
                    .with(Var::Ey, 0.0)
                    .with(Var::Ez, 0.0)
                    .with(Var::U, 0.0);
                eval_checked(&f, &env)?;
            }
        }
    }

    grid.for_each_base(|ti, base| {
        let lambda = grid.lambdas[ti];
        for (slot, &var) in scanned.iter().enumerate() {
            if var == Var::U && lambda == 0.0 {
                continue;
            }
            let mut prev: Option<(f64, f64)> = None;
            for &x in &axis {
                let value = eval_checked(&f, &base.with(var, x))?;
                if let Some((px, pv)) = prev {
                    let mut ratio = (value - pv).abs() / (x - px);
                    if var == Var::U {
                        ratio /= lambda;
                    }
                    best[slot] = best[slot].max(ratio);
                }
                prev = Some((x, value));
            }
        }
        Ok(())
    })?;

    Ok(LipschitzEstimate {
        c_y: best[0],
        c_z: best[1],
        c_ey: best[2],
        c_ez: best[3],
        c_u: best[4],
        grid: grid.clone(),
    })
}

/// Constants for `F = f - lambda (1 - H) u`: the extra term adds 1 to the
/// intensity-weighted `u` slot whenever default is possible.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MFormBound {
    pub c_y: f64,
    pub c_z: f64,
    pub c_ey: f64,
    pub c_ez: f64,
    pub c_u: f64,
    /// Single constant covering every slot.
    pub c_prime: f64,
}

pub fn check_m_form_lipschitz(estimate: &LipschitzEstimate, lambda_max: f64) -> MFormBound {
    let bump = if lambda_max > 0.0 { 1.0 } else { 0.0 };
    let c_u = estimate.c_u + bump;
    let c_prime = [estimate.c_y, estimate.c_z, estimate.c_ey, estimate.c_ez, c_u]
        .into_iter()
        .fold(0.0, f64::max);
    MFormBound {
        c_y: estimate.c_y,
        c_z: estimate.c_z,
        c_ey: estimate.c_ey,
        c_ez: estimate.c_ez,
        c_u,
        c_prime,
    }
}
