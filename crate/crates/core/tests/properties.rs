use proptest::prelude::*;
use rabsde_core::driver::DriverForm;
use rabsde_core::generate::{random_scenario, ScenarioShape};
use rabsde_core::solver::{solve_backward_with, Route, SolveOptions};
use rabsde_core::stopping::{stopping_payoff, StoppingRule};
use rabsde_core::validate::validate_solution;
use rabsde_core::{Exec, NodeId, Scheme};

fn shape(n: usize, lambda: f64, implicit: bool) -> ScenarioShape {
    ScenarioShape {
        n_steps: n,
        lambda,
        form: DriverForm::H,
        scheme: if implicit { Scheme::Implicit } else { Scheme::Explicit },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solutions_validate(seed in any::<u64>(), n in 2usize..8, lambda in 0.0f64..1.2, implicit in any::<bool>()) {
        let sc = random_scenario(seed, shape(n, lambda, implicit)).unwrap();
        let sol = rabsde_core::solve_backward(&sc).unwrap();
        let report = validate_solution(&sol, &sc);
        prop_assert!(report.passes(1e-10), "{report:?}");
    }

    #[test]
    fn execution_policy_does_not_change_results(seed in any::<u64>(), n in 2usize..9, lambda in 0.0f64..1.2) {
        let sc = random_scenario(seed, shape(n, lambda, false)).unwrap();
        let seq = solve_backward_with(&sc, SolveOptions { route: Route::Martingale, exec: Exec::Sequential }).unwrap();
        let par = solve_backward_with(&sc, SolveOptions { route: Route::Martingale, exec: Exec::Parallel }).unwrap();
        prop_assert_eq!(seq, par);
    }

    #[test]
    fn any_stopping_rule_is_dominated(seed in any::<u64>(), n in 2usize..6, lambda in 0.0f64..1.2, mask in any::<u64>()) {
        let sc = random_scenario(seed, shape(n, lambda, false)).unwrap();
        let sol = rabsde_core::solve_backward(&sc).unwrap();
        let mut bit = 0u32;
        let rule = StoppingRule::from_fn(&sc.lattice, |_| {
            bit = (bit + 1) % 64;
            mask >> bit & 1 == 1
        });
        let payoff = stopping_payoff(&rule, &sol, &sc, NodeId::ROOT).unwrap();
        prop_assert!(payoff <= sol.y0() + 1e-10, "{payoff} > {}", sol.y0());
    }

    #[test]
    fn raising_the_obstacle_raises_the_solution(seed in any::<u64>(), n in 2usize..7, lambda in 0.0f64..1.2, lift in 0.0f64..0.5) {
        let sc = random_scenario(seed, shape(n, lambda, false)).unwrap();
        let mut lifted = sc.clone();
        let text = format!("({}) + {lift:?}", sc.obstacle.source());
        lifted.obstacle = rabsde_core::driver::parse_expr(&text, rabsde_core::driver::VarSet::OBSTACLE).unwrap();
        let terminal = format!("max({}, {text})", sc.terminal.source());
        lifted.terminal = rabsde_core::driver::parse_expr(&terminal, rabsde_core::driver::VarSet::TERMINAL).unwrap();
        let (Ok(a), Ok(b)) = (rabsde_core::solve_backward(&sc), rabsde_core::solve_backward(&lifted)) else {
            return Err(TestCaseError::fail("solve failed"));
        };
        let grid = rabsde_core::comparison::HypothesisGrid::for_scenario(&sc);
        let mono = rabsde_core::comparison::check_monotone_in_anticipation(&sc.driver.expr, &grid).unwrap();
        prop_assume!(mono.holds);
        let theta = rabsde_core::comparison::check_theta_condition(&sc.driver.expr, &grid).unwrap();
        prop_assume!(theta.holds && theta.theta > -0.7);
        prop_assert!(b.y0() >= a.y0() - 1e-10, "{} < {}", b.y0(), a.y0());
    }
}
