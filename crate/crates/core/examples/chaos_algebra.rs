//! Kernel sets: norms, projections, resampling distances and the smoothness checks.

use levy_bsde::chaos::random_kernel_set;
use levy_bsde::levy::MarkAtom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> levy_bsde::Result<()> {
    let atoms = vec![
        MarkAtom { mark: 0.0, mass: 0.25 },
        MarkAtom { mark: 0.5, mass: 0.25 },
        MarkAtom { mark: -0.3, mass: 0.18 },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let set = random_kernel_set(&mut rng, vec![0.0, 0.4, 1.0], atoms, 3, 3)?;

    println!("entries {}, levels {:?}", set.n_entries(), set.level_norms_sq());
    println!("||xi||^2 = {:.6}, (E xi)^2 = {:.6}", set.norm_sq(), set.constant_term().powi(2));
    for t in [0.0, 0.2, 0.4, 0.7, 1.0] {
        println!("  ||E_t xi||^2 at t = {t}: {:.6}", set.projection_norm_sq(t)?);
    }
    println!("||E_0.7 xi - E_0.2 xi||^2 = {:.6}", set.projection_distance_sq(0.2, 0.7)?);
    println!("||xi - xi^(0.3,0.4)||^2   = {:.6}", set.resampling_distance_sq(0.3, 0.4)?);
    println!("||D xi||^2 (smooth part)  = {:.6}", set.dsmooth_norm_sq()?);

    let (l, r) = set.hsmooth_bound_check(2, 0.5, 0.8)?;
    println!("increment inequality on (0.5, 0.8]: {l:.6} <= {r:.6}");
    let b = set.resampling_bounds(1000)?;
    println!("two-sided bound holds: {} (sups {:?}, upper {:.4})", b.holds(), b.grid_sup, b.upper);
    println!("D12 check: {:?}", set.check_d12()?);
    Ok(())
}
