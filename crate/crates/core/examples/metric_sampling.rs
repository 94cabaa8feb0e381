//! Samples optimal metrics for a scalar stochastic system over an (α, ε)
//! grid and prints the objective surface.
//!
//! `cargo run --release --example metric_sampling`

use nalgebra::{DMatrix, DVector};
use nscm::dynamics::{NoiseBounds, StateBox, SystemModel};
use nscm::mcvstem::{box_points, line_search, log_space, McvStemConfig, Mode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `dx = (−x − x³ + u) dt + 0.1 dW`.
fn damped_cubic() -> SystemModel {
    SystemModel::new("cubic", 1, |x, _| DVector::from_element(1, -x[0] - x[0].powi(3)))
        .with_actuation(1, |_, _| DMatrix::from_element(1, 1, 1.0))
        .with_control_diffusion(|_, _| DMatrix::from_element(1, 1, 0.1))
        .with_bounds(NoiseBounds { g_c: 0.1, ..NoiseBounds::default() })
}

fn main() -> nscm::Result<()> {
    let model = damped_cubic();
    let domain = StateBox::new(vec![-1.0], vec![1.0])?;
    let points = box_points(&model, &domain, None, 50, &mut ChaCha8Rng::seed_from_u64(3))?;
    let cfg = McvStemConfig {
        mode: Mode::Control,
        l_m: 0.5,
        alphas: log_space(0.1, 3.0, 5),
        epsilons: log_space(0.3, 30.0, 5),
        ..McvStemConfig::default()
    };
    let res = line_search(&cfg, &model, &points)?;
    println!("{:>8} {:>8} {:>12} {:>12}", "alpha", "eps", "objective", "bound");
    for g in &res.surface {
        if g.feasible {
            println!("{:>8.3} {:>8.3} {:>12.5e} {:>12.5e}", g.alpha, g.epsilon, g.objective, g.bound);
        } else {
            println!("{:>8.3} {:>8.3} {:>12} {:>12}", g.alpha, g.epsilon, format!("{:?}", g.status), "-");
        }
    }
    // Fully actuated, so a faster rate keeps paying off and the argmin
    // lands on the edge of this grid.
    let s = &res.samples.summary;
    println!(
        "argmin alpha {:.3} eps {:.3} (interior: {}), nu {:.4}, chi {:.4}, bound {:.4e}",
        res.alpha,
        res.epsilon,
        res.argmin_is_interior(),
        s.nu,
        s.chi,
        s.bound
    );
    Ok(())
}
