//! SDC factorizations of the rocket benchmark at random state pairs.
//!
//! `cargo run --release --example sdc_factorization`

use nalgebra::dvector;
use nscm::dynamics::{rocket_benchmark, sdc_factorize, sdc_measurement_factorize, RocketConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> nscm::Result<()> {
    let model = rocket_benchmark(&RocketConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut drift, mut meas): (f64, f64) = (0.0, 0.0);
    for i in 0..200 {
        let x = dvector![rng.random_range(-0.3..0.3), rng.random_range(-1.0..1.0)];
        let x_d = dvector![rng.random_range(-0.3..0.3), rng.random_range(-1.0..1.0)];
        let u_d = dvector![rng.random_range(-0.05..0.05)];
        let t = rng.random_range(0.0..10.0);
        let a = sdc_factorize(&model, &x, &x_d, &u_d, t, 10)?;
        let c = sdc_measurement_factorize(&model, &x, &x_d, t, 10)?;
        drift = drift.max(a.relative_residual());
        meas = meas.max(c.relative_residual());
        if i == 0 {
            println!("x = {:.3?}, x_d = {:.3?}, t = {t:.2}", x.as_slice(), x_d.as_slice());
            println!(
                "A = {:.4?}",
                a.matrix.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>()
            );
            println!(
                "C = {:.4?}",
                c.matrix.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>()
            );
        }
    }
    println!("worst relative residual over 200 pairs: drift {drift:.2e}, measurement {meas:.2e}");
    Ok(())
}
