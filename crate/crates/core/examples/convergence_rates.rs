//! Discretization error of the backward scheme on nested nets.

use levy_bsde::bsde::{Generator, SolverConfig, TerminalCondition};
use levy_bsde::levy::{LevyModel, TimeNet};
use levy_bsde::regularity::discretization_error;

fn main() -> levy_bsde::Result<()> {
    let model = LevyModel::with_atoms(0.1, 0.4, &[(0.5, 1.0), (-0.3, 2.0)], 1.0)?;
    let nets = [4, 8, 16]
        .iter()
        .map(|&n| TimeNet::equidistant(1.0, n, 1))
        .collect::<levy_bsde::Result<Vec<_>>>()?;
    let reference = TimeNet::equidistant(1.0, 64, 1)?;
    let study = discretization_error(
        &model,
        &Generator::zero(vec![1.0; 3]),
        &TerminalCondition::call(1.0, 0.0),
        &nets,
        &reference,
        5_000,
        13,
        &SolverConfig::default(),
    )?;
    for r in &study.rows {
        println!("n = {:3}: Err = {:.4e}, var_2 = {:.4e}", r.n_intervals, r.err_tau, r.var_2);
    }
    println!("slope {:.3} ± {:.3}; half-resolution reference error {:.3e}", study.slope, study.slope_se, study.reference_check);
    Ok(())
}
