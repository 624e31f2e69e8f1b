//! Condition curves (i)-(iv) and their fitted exponents for a call on X_T.

use levy_bsde::bsde::{solve_backward, Generator, SolverConfig, TerminalCondition};
use levy_bsde::levy::{simulate, LevyModel, TimeNet};
use levy_bsde::regularity::{write_curves_csv, RegularityLab};

fn main() -> levy_bsde::Result<()> {
    let model = LevyModel::with_atoms(0.1, 0.4, &[(0.5, 1.0), (-0.3, 2.0)], 1.0)?;
    let net = TimeNet::equidistant(1.0, 64, 1)?;
    let bundle = simulate(&model, &net, 20_000, 3)?;
    let config = SolverConfig {
        z_per_atom: true,
        ..SolverConfig::default()
    };
    let terminal = TerminalCondition::call(1.0, 0.0);
    let sol = solve_backward(&Generator::zero(vec![1.0; 3]), &terminal, &bundle, &config)?;

    let lab = RegularityLab::new(&bundle, &sol, &terminal, &config)?;
    let report = lab.report(1, &[1.0, 1.0, 1.0])?;
    for (c, fit) in &report.fits {
        println!(
            "({}) theta = {:.3} [{:.3}, {:.3}] R^2 = {:.3}{}",
            c.label(),
            fit.theta,
            fit.ci[0],
            fit.ci[1],
            fit.r_squared,
            if fit.unresolved { " (within noise floor)" } else { "" }
        );
    }
    write_curves_csv(&report.curves, std::io::stdout().lock())?;
    Ok(())
}
