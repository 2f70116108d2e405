//! Reference prices on a plain binomial tree.

use serde::Serialize;

/// American put on a tree with `S = e^{W}`, `W` moving by `±sqrt(dt)` with
/// probability one half, discounted by `1 - r dt` per step.
///
/// This is the tree the lattice reduces to without default, so the value
/// must equal the reflected solution with driver `-r y`, obstacle
/// `max(K - e^w, 0)` and terminal value the same payoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinomialPut {
    pub horizon: f64,
    pub n_steps: usize,
    pub rate: f64,
    pub strike: f64,
}

impl BinomialPut {
    pub fn price(&self) -> f64 {
        let n = self.n_steps;
        let dt = self.horizon / n as f64;
        let up = dt.sqrt().exp();
        let disc = 1.0 - self.rate * dt;
        let spot = |k: usize, j: usize| up.powi(2 * j as i32 - k as i32);
        let mut values: Vec<f64> = (0..=n).map(|j| (self.strike - spot(n, j)).max(0.0)).collect();
        for k in (0..n).rev() {
            values = (0..=k)
                .map(|j| {
                    let hold = disc * 0.5 * (values[j] + values[j + 1]);
                    hold.max(self.strike - spot(k, j))
                })
                .collect();
        }
        values[0]
    }
}
