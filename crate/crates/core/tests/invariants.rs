use std::sync::Arc;

use proptest::prelude::*;

use levy_bsde::bsde::{solve_backward, Functional, Generator, SolverConfig, TerminalCondition};
use levy_bsde::levy::{replay, simulate, LevyModel, TimeNet};
use levy_bsde::malliavin::{difference_quotient, PerturbationSpec};
use levy_bsde::oracle::{TreeModel, TreeSpec};
use levy_bsde::runner::ExperimentConfig;

fn model(sigma: f64, v: f64, lambda: f64) -> LevyModel {
    LevyModel::with_atoms(0.1, sigma, &[(v, lambda), (-0.3, 0.7)], 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn net_invariants(n in 1usize..40, m in 1usize..5) {
        let net = TimeNet::equidistant(1.0, n * m, m).unwrap();
        let pts = net.points();
        prop_assert!(pts.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(*pts.last().unwrap(), 1.0);
        for c in net.coarse_points() {
            prop_assert!(pts.contains(&c));
        }
    }

    #[test]
    fn same_lineage_same_paths(seed in any::<u64>(), sigma in 0.0f64..1.0, v in 0.1f64..1.0) {
        let m = model(sigma, v, 1.5);
        let net = TimeNet::equidistant(1.0, 8, 2).unwrap();
        let a = simulate(&m, &net, 300, seed).unwrap();
        let b = simulate(&m, &net, 300, seed).unwrap();
        prop_assert_eq!(a.x_matrix(), b.x_matrix());
        let c = replay(&m, &net, 300, a.lineage()).unwrap();
        prop_assert_eq!(a.x_matrix(), c.x_matrix());
    }

    /// For `g` with `|∂₁g| + |∂₂g| ≤ 1` a jump shift of every later value by
    /// `v` moves `g` by at most `|v|`.
    #[test]
    fn lipschitz_quotient_bounded(seed in 0u64..1000, a in -1.0f64..1.0, c in -1.0f64..1.0, r in 0.0f64..1.0) {
        let b = 1.0 - a.abs();
        let g = Functional::new(
            "lip",
            vec![0.5, 1.0],
            Arc::new(move |x| a * x[0].sin() + b * (x[1] - c).abs()),
            false,
        ).unwrap();
        let m = model(0.4, 0.5, 1.0);
        let net = TimeNet::equidistant(1.0, 8, 2).unwrap();
        let bundle = simulate(&m, &net, 500, seed).unwrap();
        for v in [0.5, -0.3] {
            let q = difference_quotient(&g, &bundle, &PerturbationSpec::jump(r, v)).unwrap();
            prop_assert!(q.iter().all(|d| d.abs() <= 1.0 + 1e-12), "v = {v}");
        }
    }

    /// A functional of the values at the coarse points has the same
    /// quotient for every `r` inside one coarse interval.
    #[test]
    fn quotient_constant_within_coarse_interval(seed in 0u64..1000, u in 0.001f64..1.0, w in 0.001f64..1.0, k in 0usize..2) {
        let g = Functional::new("h", vec![0.5, 1.0], Arc::new(|x| x[0].powi(2) + (x[1] - x[0]).max(0.0)), false).unwrap();
        let m = model(0.4, 0.5, 1.0);
        let net = TimeNet::equidistant(1.0, 8, 2).unwrap();
        let bundle = simulate(&m, &net, 300, seed).unwrap();
        let lo = 0.5 * k as f64;
        let q1 = difference_quotient(&g, &bundle, &PerturbationSpec::jump(lo + 0.5 * u, 0.5)).unwrap();
        let q2 = difference_quotient(&g, &bundle, &PerturbationSpec::jump(lo + 0.5 * w, 0.5)).unwrap();
        prop_assert_eq!(q1, q2);
    }

    #[test]
    fn terminal_value_exact(seed in 0u64..1000, c in -1.0f64..1.0, strike in -0.5f64..0.5) {
        let m = model(0.3, 0.5, 1.0);
        let net = TimeNet::equidistant(1.0, 6, 1).unwrap();
        let bundle = simulate(&m, &net, 2000, seed).unwrap();
        let terminal = TerminalCondition::call(1.0, strike);
        let gen = Generator::linear(-0.5, c, vec![1.0, 1.0, 1.0]);
        let sol = solve_backward(&gen, &terminal, &bundle, &SolverConfig::default()).unwrap();
        let xi = terminal.evaluate(&bundle).unwrap();
        prop_assert_eq!(sol.y.last().unwrap(), &xi);
    }

    #[test]
    fn tree_matches_step_moments(
        gamma in -0.5f64..0.5,
        sigma in 0.0f64..1.0,
        size in 0.1f64..1.0,
        lambda in 0.1f64..1.8,
        n_steps in 2usize..6,
    ) {
        let tree = TreeModel::new(TreeSpec {
            gamma,
            sigma,
            jumps: vec![(size, lambda)],
            horizon: 1.0,
            n_steps,
            coarse: vec![0, n_steps],
        }).unwrap();
        let dt = 1.0 / n_steps as f64;
        let (mean, var) = tree.step_moments();
        prop_assert!((mean - gamma * dt).abs() <= 1e-13);
        let want = (sigma * sigma + size * size * lambda) * dt;
        prop_assert!((var - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn config_round_trip(seed in any::<u64>(), n_paths in 100usize..100_000, n in 1usize..64, k in 1usize..4) {
        let text = format!(
            r#"{{"name": "p", "kind": "solve", "seed": {seed}, "n_paths": {n_paths}, "net": {{"n": {n}}}, "params": {{"k": {k}}}}}"#
        );
        let c = ExperimentConfig::from_json(&text).unwrap();
        prop_assert_eq!(c.seed, seed);
        let again = ExperimentConfig::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(again.to_json(), c.to_json());
    }
}
