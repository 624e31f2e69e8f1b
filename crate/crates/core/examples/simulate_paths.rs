//! Simulate a jump diffusion on a time net and check a few moments.

use levy_bsde::levy::{simulate, LevyModel, TimeNet};
use levy_bsde::stats::Estimate;

fn main() -> levy_bsde::Result<()> {
    let model = LevyModel::with_atoms(0.1, 0.4, &[(0.5, 1.0), (-0.3, 2.0)], 1.0)?;
    let net = TimeNet::equidistant(1.0, 16, 2)?;
    let bundle = simulate(&model, &net, 50_000, 7)?;
    let marks = bundle.mark_measure();

    println!("mark measure:");
    for (i, a) in marks.atoms().iter().enumerate() {
        println!("  {:?}: mark {:+.2}, mass {:.3}", marks.source(i), a.mark, a.mass);
    }
    let width = net.points().len();
    let x = bundle.x_matrix();
    let xt = Estimate::from_fn(bundle.n_paths(), |p| x[p * width + width - 1]);
    let var = Estimate::from_fn(bundle.n_paths(), |p| (x[p * width + width - 1] - 0.1).powi(2));
    println!("E X_T   = {:.4} ± {:.4} (exact {:.4})", xt.mean, xt.se, model.gamma());
    println!("Var X_T = {:.4} ± {:.4} (exact {:.4})", var.mean, var.se, model.variance_rate());
    println!("first path: {:?}", &bundle.x_path(0)[..5]);
    Ok(())
}
