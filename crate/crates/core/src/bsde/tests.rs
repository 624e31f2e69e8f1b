use super::*;
use crate::error::Error;
use crate::levy::{simulate, LevyModel, TimeNet};

fn setup(n: usize, paths: usize) -> (LevyModel, crate::levy::PathBundle) {
    let model = LevyModel::with_atoms(0.1, 0.4, &[(0.5, 1.0), (-0.3, 2.0)], 1.0).unwrap();
    let net = TimeNet::equidistant(1.0, n, 1).unwrap();
    let b = simulate(&model, &net, paths, 11).unwrap();
    (model, b)
}

fn kappa_mass(b: &crate::levy::PathBundle, kappa: &[f64]) -> f64 {
    let m = b.mark_measure();
    kappa.iter().enumerate().map(|(a, k)| k * m.mass(a)).sum()
}

#[test]
fn terminal_x_has_unit_kernel() {
    let (model, b) = setup(16, 20_000);
    let kappa = vec![1.0, 0.5, -1.0];
    let gen = Generator::zero(kappa.clone());
    let sol = solve_backward(&gen, &TerminalCondition::x_terminal(1.0), &b, &SolverConfig::default()).unwrap();
    assert!(sol.y0.within(model.gamma(), 4.0), "{:?}", sol.y0);
    assert!(sol.zbar0.within(kappa_mass(&b, &kappa), 4.0), "{:?}", sol.zbar0);
    // Y_t = X_t + γ(T−t) up to regression noise
    let x = crate::bsde::x_columns(&b);
    let i = 8;
    let dev: f64 = (0..b.n_paths()).map(|p| (sol.y[i][p] - 0.5 * model.gamma() - x[i][p]).abs()).sum::<f64>()
        / b.n_paths() as f64;
    assert!(dev < 0.02, "{dev}");
}

#[test]
fn linear_generator_matches_closed_form() {
    let (model, b) = setup(50, 20_000);
    let kappa = vec![1.0, 1.0, 1.0];
    let (bb, c) = (0.3, 0.5);
    let gen = Generator::linear(bb, c, kappa.clone());
    let sol = solve_backward(&gen, &TerminalCondition::x_terminal(1.0), &b, &SolverConfig::default()).unwrap();
    let k = kappa_mass(&b, &kappa);
    let exact = (bb * 1.0f64).exp() * (model.gamma() + c * k);
    // discretization error is O(Δ)
    assert!((sol.y0.mean - exact).abs() < 4.0 * sol.y0.se + 0.05 * exact.abs(), "{:?} vs {exact}", sol.y0);
    let zexact = (bb * 1.0f64).exp() * k;
    assert!((sol.zbar0.mean - zexact).abs() < 4.0 * sol.zbar0.se + 0.05 * zexact, "{:?} vs {zexact}", sol.zbar0);
}

#[test]
fn per_atom_z_reproduces_zbar() {
    let (_, b) = setup(8, 5_000);
    let kappa = vec![0.2, 1.0, 3.0];
    let gen = Generator::zero(kappa.clone());
    let cfg = SolverConfig {
        z_per_atom: true,
        ..SolverConfig::default()
    };
    let sol = solve_backward(&gen, &TerminalCondition::x_squared(1.0), &b, &cfg).unwrap();
    let marks = b.mark_measure();
    let z = sol.z_atoms.as_ref().unwrap();
    let na = marks.len();
    for i in [0, 3, 7] {
        for p in 0..20 {
            let combo: f64 = (0..na).map(|a| kappa[a] * marks.mass(a) * z[i][p * na + a]).sum();
            assert!((combo - sol.z_bar[i][p]).abs() < 1e-8 * (1.0 + combo.abs()));
        }
    }
    let masses: Vec<f64> = (0..na).map(|a| marks.mass(a)).collect();
    assert!(sol.h_norm_sq(&masses).unwrap() > 0.0);
}

#[test]
fn picard_iterates_approach_backward_solution() {
    let (_, b) = setup(16, 5_000);
    let kappa = vec![1.0, 1.0, 1.0];
    let gen = Generator::affine(0.2, -0.5, 0.3, 0.1, kappa);
    let term = TerminalCondition::call(1.0, 0.0);
    let cfg = SolverConfig::default();
    let exact = solve_backward(&gen, &term, &b, &cfg).unwrap();
    let iters = picard_solve(&gen, &term, &b, &cfg, 6).unwrap();
    let gaps: Vec<f64> = iters.iter().map(|s| (s.y0.mean - exact.y0.mean).abs()).collect();
    assert!(gaps[5] < gaps[0]);
    assert!(gaps[5] < 0.02, "{gaps:?}");
}

#[test]
fn coarse_step_is_rejected() {
    let (_, b) = setup(2, 100);
    let gen = Generator::linear(3.0, 0.0, vec![0.0; 3]);
    let err = solve_backward(&gen, &TerminalCondition::x_terminal(1.0), &b, &SolverConfig::default()).unwrap_err();
    assert!(matches!(err, Error::StepTooCoarse { .. }));
}

#[test]
fn stability_gap_vanishes_for_identical_data() {
    let (_, b) = setup(8, 2_000);
    let gen = Generator::linear(0.1, 0.1, vec![1.0; 3]);
    let term = TerminalCondition::x_terminal(1.0);
    let cfg = SolverConfig::default();
    let s1 = solve_backward(&gen, &term, &b, &cfg).unwrap();
    let g = stability_gap(&s1, &s1, &gen, &gen, &b).unwrap();
    assert_eq!(g.lhs, 0.0);
    assert!(g.ratio.is_none());
    let gen2 = Generator::affine(0.0, 0.1, 0.1, 0.2, vec![1.0; 3]);
    let s2 = solve_backward(&gen2, &term, &b, &cfg).unwrap();
    let g2 = stability_gap(&s1, &s2, &gen, &gen2, &b).unwrap();
    assert!(g2.lhs > 0.0 && g2.ratio.unwrap() < 10.0, "{g2:?}");
}

#[test]
fn zbar_estimator_for_terminal_x() {
    let (_, b) = setup(4, 40_000);
    let kappa = vec![1.0, 2.0, 0.5];
    let xi = TerminalCondition::x_terminal(1.0).evaluate(&b).unwrap();
    let est = crate::stats::Estimate::from_slice(&zbar_estimator(&b, &xi, 0.0, 0.25, &kappa).unwrap());
    assert!(est.within(kappa_mass(&b, &kappa), 4.0), "{est:?}");
}
