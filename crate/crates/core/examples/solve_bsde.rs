//! Backward least-squares solve and Picard iteration for an affine generator.

use levy_bsde::bsde::{picard_solve, solve_backward, Generator, SolverConfig, TerminalCondition};
use levy_bsde::levy::{simulate, LevyModel, TimeNet};

fn main() -> levy_bsde::Result<()> {
    let model = LevyModel::with_atoms(0.1, 0.4, &[(0.5, 1.0), (-0.3, 2.0)], 1.0)?;
    let net = TimeNet::equidistant(1.0, 16, 1)?;
    let bundle = simulate(&model, &net, 20_000, 11)?;
    let gen = Generator::affine(0.2, -0.5, 0.3, 0.1, vec![1.0, 1.0, 1.0]);
    let terminal = TerminalCondition::x_squared(1.0);
    let config = SolverConfig::default();

    let sol = solve_backward(&gen, &terminal, &bundle, &config)?;
    println!("Y0 = {:.5} ± {:.5}, Zbar0 = {:.5} ± {:.5}", sol.y0.mean, sol.y0.se, sol.zbar0.mean, sol.zbar0.se);
    for (t, y, z) in sol.time_profile().into_iter().step_by(4) {
        let z = z.map_or(f64::NAN, |z| z.mean);
        println!("  t = {t:.3}: E Y = {:.5}, E Zbar = {z:.5}", y.mean);
    }

    let iterates = picard_solve(&gen, &terminal, &bundle, &config, 6)?;
    for (k, it) in iterates.iter().enumerate() {
        println!("picard {}: Y0 = {:.6}", k + 1, it.y0.mean);
    }
    Ok(())
}
