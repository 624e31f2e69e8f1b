//! The exact binary-tree solution against the least-squares solver.

use levy_bsde::bsde::{solve_backward, Generator, SolverConfig, TerminalCondition};
use levy_bsde::oracle::{simulate_skeleton, validate_tree, TreeModel, TreeSpec};

fn main() -> levy_bsde::Result<()> {
    let tree = TreeModel::new(TreeSpec {
        gamma: 0.1,
        sigma: 0.3,
        jumps: vec![(0.5, 1.2)],
        horizon: 1.0,
        n_steps: 6,
        coarse: vec![0, 3, 6],
    })?;
    for c in validate_tree(&tree)? {
        println!("[{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
    }

    let leaves = tree.leaf_values(|x| x.last().unwrap().powi(2));
    let kappa = vec![1.0; tree.components().len()];
    let gen = Generator::linear(-1.0, 0.0, kappa);
    let exact = tree.exact_bsde(&gen, &leaves)?;

    let bundle = simulate_skeleton(&tree, 50_000, 9)?;
    let sol = solve_backward(&gen, &TerminalCondition::x_squared(1.0), &bundle, &SolverConfig::default())?;
    println!("Y0:    tree {:.5}, lsmc {:.5} ± {:.5}", exact.y0(), sol.y0.mean, sol.y0.se);
    println!("Zbar0: tree {:.5}, lsmc {:.5} ± {:.5}", exact.zbar0(), sol.zbar0.mean, sol.zbar0.se);
    Ok(())
}
