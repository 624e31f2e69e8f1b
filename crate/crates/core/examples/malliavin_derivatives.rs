//! Difference quotients, the derivative equation and the Clark-Ocone check.

use std::sync::Arc;

use levy_bsde::bsde::{solve_backward, Functional, Generator, SolverConfig, TerminalCondition};
use levy_bsde::levy::{simulate, LevyModel, TimeNet};
use levy_bsde::malliavin::{clark_ocone_check, difference_quotient, solve_uv, PerturbationSpec};
use levy_bsde::stats::Estimate;

fn main() -> levy_bsde::Result<()> {
    let model = LevyModel::with_atoms(0.1, 0.4, &[(0.5, 1.0), (-0.3, 2.0)], 1.0)?;
    let net = TimeNet::equidistant(1.0, 8, 1)?;
    let bundle = simulate(&model, &net, 20_000, 5)?;
    let config = SolverConfig::default();

    let call = Functional::new("call", vec![1.0], Arc::new(|x| (x[0] - 0.1).max(0.0)), true)?;
    for v in [0.5, -0.3] {
        let q = difference_quotient(&call, &bundle, &PerturbationSpec::jump(0.3, v))?;
        let e = Estimate::from_slice(&q);
        println!("E D_(0.3,{v:+}) call = {:.4} ± {:.4}", e.mean, e.se);
    }

    let gen = Generator::linear(0.3, 0.5, vec![1.0, 0.5, 2.0]);
    let terminal = TerminalCondition::x_terminal(1.0);
    let base = solve_backward(&gen, &terminal, &bundle, &config)?;
    let spec = PerturbationSpec::jump(net.point(2), 0.5);
    let uv = solve_uv(&gen, &terminal, &bundle, Some(&base), &spec, &config)?;
    println!("U at r = {:.3}: {:.5} (Y0 = {:.5})", spec.r, Estimate::from_slice(&uv.y[2]).mean, base.y0.mean);

    let xt = Functional::new("X_T", vec![1.0], Arc::new(|x| x[0]), false)?;
    let co = clark_ocone_check(&xt, &bundle, &config, 1e-3)?;
    println!("Clark-Ocone residual {:.2e} ± {:.2e}, L2 {:.2e}", co.residual.mean, co.residual.se, co.l2_residual);
    Ok(())
}
