//! A terminal condition meeting (iv) but not (iii): series, asymptotics and the (iv) bound.

use levy_bsde::counterexample::{condition_iv_bound, condition_iv_quantity, counterexample_series, CounterexampleSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> levy_bsde::Result<()> {
    let spec = CounterexampleSpec::default();
    for s in [0.9, 0.99, 0.999, 0.9999] {
        let c = counterexample_series(&spec, s)?;
        println!(
            "s = {s}: ||Z_s||^2 = {:.4}, asymptotic {:.4}, ratio {:.3} (N = {})",
            c.z_norm_sq,
            c.asymptotic,
            c.ratio(),
            c.truncation
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let mut a: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        a.iter_mut().for_each(|x| *x /= norm);
        worst = worst.max(condition_iv_quantity(&a, 0.0, 0.999)?);
    }
    println!("largest (iv) quantity {worst:.4} <= {:.4}", condition_iv_bound());
    Ok(())
}
