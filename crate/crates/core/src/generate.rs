//! Seeded random scenarios for property runs.
//!
//! Obstacles are affine in `w` with a slope bounded away from zero, so a
//! continuation value landing exactly on the obstacle without a push has
//! probability zero and the two optimal-time rules agree.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::driver::DriverForm;
use crate::scenario::{Scenario, ScenarioError, Scheme};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn coef(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    // Four decimals keep the printed expressions exact.
    (r.gen_range(lo..hi) * 1e4).round() / 1e4
}

fn slope(r: &mut ChaCha8Rng) -> f64 {
    let s = coef(r, 0.2, 0.9);
    if r.gen_bool(0.5) {
        s
    } else {
        -s
    }
}

/// Shape of a random single scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioShape {
    pub n_steps: usize,
    /// Constant intensity; zero gives a plain binomial tree.
    pub lambda: f64,
    pub form: DriverForm,
    pub scheme: Scheme,
}

/// Random scenario: driver with `y`, `z`, `ey`, `ez`, `u` terms and one
/// kink; affine obstacle; terminal value `max(S_T, affine in w, h, tau)`.
pub fn random_scenario(seed: u64, shape: ScenarioShape) -> Result<Scenario, ScenarioError> {
    let r = &mut rng(seed);
    let n = shape.n_steps;
    let delta = r.gen_range(0..=n.min(4));
    let driver = format!(
        "{:?} + {:?}*y + {:?}*z + {:?}*max(ey, {:?}) + {:?}*ez + {:?}*u + {:?}*w",
        coef(r, -0.5, 0.5),
        coef(r, -0.6, 0.6),
        coef(r, -0.4, 0.4),
        coef(r, -0.5, 0.5),
        coef(r, -1.0, 1.0),
        coef(r, -0.3, 0.3),
        coef(r, -0.6, 0.6),
        coef(r, -0.3, 0.3),
    );
    let obstacle = format!(
        "{:?} + {:?}*w + {:?}*h + {:?}*t",
        coef(r, -0.3, 0.3),
        slope(r),
        coef(r, -0.5, 0.5),
        coef(r, -0.5, 0.5),
    );
    let terminal = format!(
        "max({obstacle}, {:?} + {:?}*w + {:?}*h + {:?}*h*tau)",
        coef(r, -0.5, 0.5),
        coef(r, -1.0, 1.0),
        coef(r, -1.0, 1.0),
        coef(r, -0.5, 0.5),
    );
    let mut b = Scenario::builder(1.0, n)
        .lambda(shape.lambda)
        .delta_steps(delta)
        .driver(driver)
        .form(shape.form)
        .obstacle(obstacle)
        .terminal(terminal)
        .scheme(shape.scheme);
    if shape.scheme == Scheme::Implicit {
        b = b.implicit(1e-14, 500);
    }
    b.build()
}

/// Shape of a random comparison pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairShape {
    pub n_steps: usize,
    pub lambda: f64,
    pub delta_steps: usize,
}

/// Random pair built to satisfy the terminal, obstacle and driver-dominance
/// hypotheses by construction:
/// `g^1 = g^2 + (nonnegative)`, `ξ^1 = max(ξ^2 + (nonnegative), S^1_T)`,
/// `S^1 = S^2 + (nonnegative constant)`.
///
/// Monotonicity in the anticipated `y` and the `theta` condition are left
/// to the checkers: the `ey` coefficient may be negative, and `theta` is
/// drawn from `[-1.6, -1.05]` in a quarter of the cases. Admissible `theta`
/// values stay in `[-0.7, 0.8]`, so that on the lattice the one-step
/// weights `1 + theta - O(sqrt(dt))` remain positive.
pub fn random_comparison_pair(seed: u64, shape: PairShape) -> Result<(Scenario, Scenario), ScenarioError> {
    let r = &mut rng(seed);
    let theta = if r.gen_bool(0.25) { coef(r, -1.6, -1.05) } else { coef(r, -0.7, 0.8) };
    let u_coef = ((theta * shape.lambda) * 1e6).round() / 1e6;
    let g2 = format!(
        "{:?} + {:?}*y + {:?}*z + {:?}*min(ey, {:?}) + {:?}*u + {:?}*w",
        coef(r, -0.3, 0.3),
        coef(r, -0.4, 0.4),
        coef(r, -0.25, 0.25),
        coef(r, -0.1, 0.5),
        coef(r, -0.5, 1.5),
        u_coef,
        coef(r, -0.3, 0.3),
    );
    let g1 = format!(
        "{g2} + {:?} + {:?}*abs(w) + {:?}*max(y, 0)",
        coef(r, 0.0, 0.3),
        coef(r, 0.0, 0.2),
        coef(r, 0.0, 0.1),
    );
    let s2 = format!(
        "{:?} + {:?}*w + {:?}*h + {:?}*t",
        coef(r, -0.4, 0.2),
        slope(r),
        coef(r, -0.3, 0.3),
        coef(r, -0.4, 0.4),
    );
    let s1 = format!("{s2} + {:?}", coef(r, 0.0, 0.2));
    let xi2 = format!(
        "max({s2}, {:?} + {:?}*w + {:?}*h)",
        coef(r, -0.5, 0.5),
        coef(r, -1.0, 1.0),
        coef(r, -0.6, 0.6),
    );
    let xi1 = format!(
        "max({xi2} + {:?} + {:?}*abs(w), {s1})",
        coef(r, 0.0, 0.3),
        coef(r, 0.0, 0.2),
    );
    let build = |driver: String, obstacle: &str, terminal: &str| {
        Scenario::builder(1.0, shape.n_steps)
            .lambda(shape.lambda)
            .delta_steps(shape.delta_steps)
            .form(DriverForm::M)
            .driver(driver)
            .obstacle(obstacle)
            .terminal(terminal)
            .build()
    };
    Ok((build(g1, &s1, &xi1)?, build(g2, &s2, &xi2)?))
}

/// Pair shape drawn from the default property-run family: `n` in
/// `{4, 6, 8}`, intensity zero in a fifth of the cases and otherwise in
/// `[0.1, 1.2]`, lag in `0..=3` steps.
pub fn random_pair_shape(seed: u64) -> PairShape {
    let r = &mut rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n_steps = [4, 6, 8][r.gen_range(0..3)];
    let lambda = if r.gen_bool(0.2) { 0.0 } else { coef(r, 0.1, 1.2) };
    PairShape { n_steps, lambda, delta_steps: r.gen_range(0..=3) }
}
