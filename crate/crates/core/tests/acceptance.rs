//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL` line with the measured quantity.
//!
//! Reference values come from oracles written here, independent of the
//! library's lattice code where possible: direct path enumeration for
//! conditional expectations and a standalone binomial put.

use std::time::{Duration, Instant};

use rabsde_core::comparison::{iterate_sequence, run_comparison, ComparisonCase};
use rabsde_core::driver::DriverForm;
use rabsde_core::generate::{random_comparison_pair, random_pair_shape, random_scenario, ScenarioShape};
use rabsde_core::lattice::{DefaultLattice, IntensitySpec, NodeId};
use rabsde_core::solver::{solve_backward_with, solve_picard, PicardOptions, Route, Solution, SolveOptions};
use rabsde_core::stopping::{brute_force_value, optimal_tau, stopping_payoff};
use rabsde_core::{Exec, Scenario, Scheme};

/// Written to the stderr handle directly so the line shows up without
/// `--nocapture`.
fn report(n: usize, name: &str, pass: bool, detail: String) {
    use std::io::Write;
    let line = format!("criterion {n} [{name}]: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn ms(d: Duration) -> String {
    format!("{:.1} ms", d.as_secs_f64() * 1e3)
}

fn seq() -> SolveOptions {
    SolveOptions { route: Route::Martingale, exec: Exec::Sequential }
}

/// Single scenarios used by several criteria: explicit and implicit, both
/// driver forms, with and without default, `n` from 2 to 10.
fn suite() -> Vec<Scenario> {
    let mut out = Vec::new();
    for seed in 0..60u64 {
        let n = 2 + (seed as usize % 9);
        let lambda = [0.0, 0.3, 0.9, 0.5, 1.2][seed as usize % 5];
        let form = if seed % 2 == 0 { DriverForm::H } else { DriverForm::M };
        let scheme = if seed % 3 == 0 { Scheme::Implicit } else { Scheme::Explicit };
        out.push(random_scenario(seed, ScenarioShape { n_steps: n, lambda, form, scheme }).unwrap());
    }
    out
}

// ---------------------------------------------------------------------------
// Independent oracles.

/// Probability of each continuation from `node` to the horizon, enumerated
/// over (number of up moves, default step), without the library's kernel.
fn terminal_law(n: usize, dt: f64, lambdas: &[f64], node: NodeId) -> Vec<(usize, Option<usize>, f64)> {
    let m = n - node.step;
    let mut out = Vec::new();
    let binom = |m: usize, j: usize| -> f64 {
        let mut c = 1.0;
        for i in 0..j {
            c = c * (m - i) as f64 / (i + 1) as f64;
        }
        c
    };
    for ups in 0..=m {
        let w_prob = binom(m, ups) / 2f64.powi(m as i32);
        match node.default_step {
            Some(d) => out.push((node.up + ups, Some(d), w_prob)),
            None => {
                let mut survive = 1.0;
                for k in node.step..n {
                    let p = lambdas[k] * dt;
                    out.push((node.up + ups, Some(k + 1), w_prob * survive * p));
                    survive *= 1.0 - p;
                }
                out.push((node.up + ups, None, w_prob * survive));
            }
        }
    }
    out
}

/// American put on `S = e^W` with `W` on a `±sqrt(dt)` walk, probability
/// one half, linear discount `1 - r dt`.
fn binomial_put(n: usize, horizon: f64, rate: f64, strike: f64) -> f64 {
    let dt = horizon / n as f64;
    let sd = dt.sqrt();
    let payoff = |k: usize, j: usize| (strike - ((2 * j) as f64 - k as f64).mul_add(sd, 0.0).exp()).max(0.0);
    let mut v: Vec<f64> = (0..=n).map(|j| payoff(n, j)).collect();
    for k in (0..n).rev() {
        let mut next = Vec::with_capacity(k + 1);
        for j in 0..=k {
            let hold = (1.0 - rate * dt) * (v[j] + v[j + 1]) / 2.0;
            next.push(if hold > payoff(k, j) { hold } else { payoff(k, j) });
        }
        v = next;
    }
    v[0]
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_martingale_structure() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for n in 1..=16 {
        for lambda in [0.0, 0.3, 0.9] {
            let lat = DefaultLattice::new(1.0, n, IntensitySpec::constant(lambda, n).unwrap()).unwrap();
            let r = lat.bracket_checks();
            worst = worst.max(r.max_mean_dw).max(r.max_mean_dm).max(r.max_bracket_violation);
            worst = worst.max(r.path_consistency).max(r.max_compensator_violation).max(r.max_prob_defect);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && elapsed < Duration::from_secs(1);
    report(1, "martingale structure", pass, format!("max violation {worst:.2e}, {}", ms(elapsed)));
    assert!(pass);
}

#[test]
fn criterion_02_conditional_expectation_identity() {
    let mut worst = 0.0f64;
    for n in [1, 2, 5, 8, 12] {
        for lambda in [0.0, 0.3, 0.9] {
            for (text, xi) in [
                ("w", (|w: f64, _h: f64| w) as fn(f64, f64) -> f64),
                ("h", |_w, h| h),
                ("w*(1 - h)", |w, h| w * (1.0 - h)),
            ] {
                let sc = Scenario::builder(1.0, n)
                    .lambda(lambda)
                    .form(DriverForm::M)
                    .obstacle("-1e9")
                    .terminal(text)
                    .build()
                    .unwrap();
                let sol = solve_backward_with(&sc, seq()).unwrap();
                let dt = 1.0 / n as f64;
                let lambdas = vec![lambda; n];
                for k in 0..=n {
                    for node in sc.lattice.nodes(k) {
                        let want: f64 = terminal_law(n, dt, &lambdas, node)
                            .into_iter()
                            .map(|(ups, d, p)| {
                                let w = (2.0 * ups as f64 - n as f64) * dt.sqrt();
                                p * xi(w, if d.is_some() { 1.0 } else { 0.0 })
                            })
                            .sum();
                        let got = sol.y.get(&sc.lattice, node).unwrap();
                        worst = worst.max((got - want).abs());
                    }
                }
            }
        }
    }
    let pass = worst <= 1e-12;
    report(2, "conditional expectation", pass, format!("max |Y - E[xi|node]| {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_03_h_form_m_form_equivalence() {
    let mut worst = 0.0f64;
    let mut count = 0;
    for seed in 0..50u64 {
        let n = 1 + (seed as usize % 10);
        let lambda = [0.3, 0.9, 0.6, 1.5, 0.1][seed as usize % 5];
        let scheme = if seed % 4 == 0 { Scheme::Implicit } else { Scheme::Explicit };
        let h = random_scenario(1000 + seed, ScenarioShape { n_steps: n, lambda, form: DriverForm::H, scheme }).unwrap();
        // The same f rewritten by hand as F = f - lambda (1 - h) u.
        let m_text = format!("({}) - {:?}*(1 - h)*u", h.driver.expr.source(), lambda);
        let mut m = h.clone();
        m.driver = rabsde_core::driver::Driver::parse(&m_text, DriverForm::M).unwrap();

        let jump = solve_backward_with(&h, SolveOptions { route: Route::Jump, exec: Exec::Sequential }).unwrap();
        let mart = solve_backward_with(&m, seq()).unwrap();
        let same_route = solve_backward_with(&h, seq()).unwrap();
        for (a, b) in [(&jump, &mart), (&jump, &same_route)] {
            worst = worst
                .max(a.y.max_abs_diff(&b.y))
                .max(a.z.max_abs_diff(&b.z))
                .max(a.u.max_abs_diff(&b.u))
                .max(a.dk.max_abs_diff(&b.dk));
        }
        count += 1;
    }
    let pass = worst <= 1e-12 && count == 50;
    report(3, "H-form/M-form equivalence", pass, format!("{count} scenarios, max field gap {worst:.2e}"));
    assert!(pass);
}

fn reflection_violation(sc: &Scenario, sol: &Solution) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..=sc.n_steps() {
        let (y, s, dk) = (sol.y.step(k).unwrap(), sol.obstacle.step(k).unwrap(), sol.dk.step(k).unwrap());
        for i in 0..y.len() {
            worst = worst.max(s[i] - y[i]).max(-dk[i]).max((dk[i] * (y[i] - s[i])).abs());
        }
    }
    worst
}

#[test]
fn criterion_04_reflection() {
    let mut worst = 0.0f64;
    let mut pushes = 0usize;
    let scenarios = suite();
    for sc in &scenarios {
        for route in [Route::Martingale, Route::Jump] {
            let sol = solve_backward_with(sc, SolveOptions { route, exec: Exec::Parallel }).unwrap();
            worst = worst.max(reflection_violation(sc, &sol));
            pushes += sol.dk.iter_steps().flat_map(|(_, s)| s.iter()).filter(|&&d| d > 0.0).count();
        }
    }
    let pass = worst <= 1e-12;
    report(
        4,
        "reflection",
        pass,
        format!("{} solves, {pushes} nodes pushed, max violation {worst:.2e}", 2 * scenarios.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_05_binomial_put_oracle() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for n in [4, 8, 16] {
        for rate in [0.04, 0.1] {
            let sc = Scenario::builder(1.0, n)
                .driver(format!("-{rate:?}*y"))
                .obstacle("max(1 - exp(w), 0)")
                .terminal("max(1 - exp(w), 0)")
                .build()
                .unwrap();
            let sol = solve_backward_with(&sc, seq()).unwrap();
            worst = worst.max((sol.y0() - binomial_put(n, 1.0, rate, 1.0)).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && elapsed < Duration::from_secs(1);
    report(5, "binomial put oracle", pass, format!("max |Y0 - put| {worst:.2e}, {}", ms(elapsed)));
    assert!(pass);
}

/// Small scenarios for exhaustive stopping: `n <= 3` with default, `n <= 5`
/// without.
fn stopping_suite() -> Vec<Scenario> {
    (0..120u64)
        .map(|seed| {
            let with_default = seed % 2 == 0;
            let (n, lambda) = if with_default {
                (1 + (seed as usize / 2) % 3, [0.3, 0.8, 1.5][seed as usize % 3])
            } else {
                (1 + (seed as usize / 2) % 5, 0.0)
            };
            let form = if seed % 3 == 0 { DriverForm::M } else { DriverForm::H };
            let scheme = if seed % 5 == 0 { Scheme::Implicit } else { Scheme::Explicit };
            random_scenario(5000 + seed, ScenarioShape { n_steps: n, lambda, form, scheme }).unwrap()
        })
        .collect()
}

#[test]
fn criterion_06_optimal_stopping_brute_force() {
    let start = Instant::now();
    let scenarios = stopping_suite();
    let mut worst = 0.0f64;
    let mut max_nodes_seen = 0;
    for sc in &scenarios {
        let sol = solve_backward_with(sc, seq()).unwrap();
        for k in 0..sc.n_steps() {
            for node in sc.lattice.nodes(k) {
                let (v, _) = brute_force_value(&sol, sc, node, Exec::Parallel).unwrap();
                worst = worst.max((v - sol.y.get(&sc.lattice, node).unwrap()).abs());
            }
        }
        let decision: usize = (0..sc.n_steps())
            .map(|k| if sc.lattice.lambda(0) > 0.0 { (k + 1) * (k + 1) } else { k + 1 })
            .sum();
        max_nodes_seen = max_nodes_seen.max(decision);
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && elapsed < Duration::from_secs(60) && scenarios.len() >= 100;
    report(
        6,
        "optimal stopping",
        pass,
        format!(
            "{} scenarios, up to {max_nodes_seen} decision nodes, max |brute - Y| {worst:.2e}, {}",
            scenarios.len(),
            ms(elapsed)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_tau_equivalence() {
    let mut disagreements = 0usize;
    let mut worst = 0.0f64;
    let mut scenarios = suite();
    scenarios.extend(stopping_suite());
    for sc in &scenarios {
        let sol = solve_backward_with(sc, seq()).unwrap();
        for t in 0..=sc.n_steps() {
            let tau = optimal_tau(&sol, sc, t).unwrap();
            disagreements += tau.disagreements.len();
            for node in sc.lattice.nodes(t) {
                let y = sol.y.get(&sc.lattice, node).unwrap();
                for rule in [&tau.first_hit, &tau.k_increase] {
                    worst = worst.max((stopping_payoff(rule, &sol, sc, node).unwrap() - y).abs());
                }
            }
        }
    }
    let pass = disagreements == 0 && worst <= 1e-10;
    report(
        7,
        "optimal time equivalence",
        pass,
        format!("{} scenarios, {disagreements} disagreeing nodes, max |payoff - Y| {worst:.2e}", scenarios.len()),
    );
    assert!(pass);
}

#[test]
fn criterion_08_picard_contraction() {
    let mut used = 0;
    let mut worst_ratio = 0.0f64;
    let mut worst_gap = 0.0f64;
    let mut seed = 0u64;
    while used < 25 && seed < 400 {
        seed += 1;
        let n = 4 + (seed as usize % 9);
        let lambda = [0.0, 0.3, 0.9, 0.5][seed as usize % 4];
        let scheme = if seed % 3 == 0 { Scheme::Implicit } else { Scheme::Explicit };
        let form = if seed % 2 == 0 { DriverForm::H } else { DriverForm::M };
        let sc = random_scenario(9000 + seed, ScenarioShape { n_steps: n, lambda, form, scheme }).unwrap();
        let bound = sc.m_form_bound(&sc.sample_grid()).unwrap();
        if bound.c_prime * sc.lattice.dt() > 0.25 {
            continue;
        }
        used += 1;
        let opts = PicardOptions { exec: Exec::Sequential, ..PicardOptions::for_scenario(&sc, 1.0, 1e-26, 500).unwrap() };
        let out = solve_picard(&sc, opts).unwrap();
        for (i, r) in out.ratios().iter().enumerate() {
            // ratios()[i] compares iterations i + 1 and i + 2.
            if i + 2 >= 3 && out.history[i] > 0.0 {
                worst_ratio = worst_ratio.max(*r);
            }
        }
        let direct = solve_backward_with(&sc, seq()).unwrap();
        // Off-support nodes (defaulted ones when lambda = 0) carry no weight
        // in the norm, so the iteration is not asked to settle them.
        worst_gap = worst_gap.max(out.solution.y.max_abs_diff_reachable(&direct.y, &sc.lattice));
    }
    let pass = used >= 20 && worst_ratio < 1.0 && worst_gap <= 1e-10;
    report(
        8,
        "Picard contraction",
        pass,
        format!("{used} scenarios, max ratio from iteration 3 {worst_ratio:.3}, max |Y_picard - Y| {worst_gap:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_comparison() {
    let start = Instant::now();
    let mut passing: Vec<(f64, bool)> = Vec::new();
    let mut next_seed = 0u64;
    while passing.len() < 1000 && next_seed < 5000 {
        let batch = next_seed..next_seed + 256;
        next_seed = batch.end;
        let results = Exec::Parallel.map(256, |i| {
            let seed = batch.start + i as u64;
            let shape = random_pair_shape(seed);
            let (a, b) = random_comparison_pair(seed, shape).unwrap();
            let case = ComparisonCase::new(a, b).unwrap();
            if !case.hypotheses().all() {
                return None;
            }
            let v = run_comparison(&case, Exec::Sequential).unwrap();
            Some((v.min_gap, case.is_plain()))
        });
        passing.extend(results.into_iter().flatten());
    }
    passing.truncate(1000);
    let failures = passing.iter().filter(|(g, _)| *g < -1e-10).count();
    let min_gap = passing.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let plain = passing.iter().filter(|p| p.1).count();
    let elapsed = start.elapsed();
    let pass = passing.len() >= 1000 && failures == 0 && plain > 0 && elapsed < Duration::from_secs(120);
    report(
        9,
        "comparison",
        pass,
        format!(
            "{} cases passing hypotheses ({plain} with zero lag), {failures} failures, min gap {min_gap:.2e}, {}",
            passing.len(),
            ms(elapsed)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_iterate_sequence() {
    let mut cases = 0;
    let mut worst_limit = 0.0f64;
    let mut seed = 20_000u64;
    while cases < 60 && seed < 22_000 {
        seed += 1;
        let shape = random_pair_shape(seed);
        let (a, b) = random_comparison_pair(seed, shape).unwrap();
        let case = ComparisonCase::new(a, b).unwrap();
        let h = case.hypotheses();
        if !h.all() || !h.theta_second.holds {
            continue;
        }
        // Monotonicity is enforced inside: a violation is an error.
        let trace = iterate_sequence(&case, 30, Exec::Sequential).unwrap();
        worst_limit = worst_limit.max(trace.limit_error());
        cases += 1;
    }
    let pass = cases >= 50 && worst_limit <= 1e-8;
    report(10, "iterate sequence", pass, format!("{cases} monotone traces, max limit error {worst_limit:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_11_psi_decay() {
    // Fixed family: terminal values whose jump size depends on w.
    let family = [
        ("0.1*y + 0.2*z - 0.3*u", "w*(1 - h)"),
        ("0.2*ey - 0.1*u", "max(w, 0) + 0.5*h*w"),
        ("0.1*y", "exp(0.5*w)*(1 - 0.5*h)"),
    ];
    let mut raw = Vec::new();
    let mut scaled = Vec::new();
    for n in [4, 8, 16, 32] {
        let mut m_raw = 0.0f64;
        let mut m_scaled = 0.0f64;
        for (driver, terminal) in family {
            let sc = Scenario::builder(1.0, n)
                .lambda(0.5)
                .delta(0.25)
                .unwrap()
                .driver(driver)
                .terminal(terminal)
                .build()
                .unwrap();
            let sol = solve_backward_with(&sc, SolveOptions { route: Route::Martingale, exec: Exec::Parallel }).unwrap();
            m_raw = m_raw.max(sol.diagnostics.max_abs_psi);
            m_scaled = m_scaled.max(sol.diagnostics.max_cross_term);
        }
        raw.push(m_raw);
        scaled.push(m_scaled);
    }
    let ratios: Vec<f64> = raw.windows(2).map(|w| w[1] / w[0]).collect();
    let scaled_ratios: Vec<f64> = scaled.windows(2).map(|w| w[1] / w[0]).collect();
    let pass = ratios.iter().all(|&r| r <= 0.6);
    report(
        11,
        "psi decay",
        pass,
        format!(
            "max|psi| {raw:.3?}, ratios {ratios:.3?}; cross-term size |psi|*||dW dM|| {:?}, ratios {scaled_ratios:.3?}",
            scaled.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>()
        ),
    );
    assert!(pass, "max|psi| does not halve under refinement: {raw:?}");
}
