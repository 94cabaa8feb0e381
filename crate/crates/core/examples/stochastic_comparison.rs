//! Closed-loop comparison of a sampled-metric controller against SDRE on
//! the damped cubic, with the steady-state bound from the sampling step.
//!
//! `cargo run --release --example stochastic_comparison`

use nalgebra::{dvector, DMatrix, DVector};
use nscm::dynamics::{NoiseBounds, StateBox, SystemModel};
use nscm::mcvstem::{box_points, line_search, log_space, McvStemConfig};
use nscm::sim::{
    incremental_mse, run_comparison, ExperimentConfig, MetricSource, MetricTable, NamedPolicy, Policy, PolicyKind,
    SdreWeights,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn main() -> nscm::Result<()> {
    let g = 0.1;
    let model = SystemModel::new("cubic", 1, |x, _| DVector::from_element(1, -x[0] - x[0].powi(3)))
        .with_actuation(1, |_, _| DMatrix::from_element(1, 1, 1.0))
        .with_control_diffusion(move |_, _| DMatrix::from_element(1, 1, g))
        .with_bounds(NoiseBounds { g_c: g, ..NoiseBounds::default() });

    // Two open-loop copies under independent noise.
    let ou = incremental_mse(&model, &dvector![0.5], &dvector![-0.5], 10.0, 1e-2, 500, 0.5, 1)?;
    println!("open loop: E|x1 - x2|^2 settles at {:.4e} ({} samples)", ou.steady_mse, ou.samples);

    let domain = StateBox::new(vec![-1.0], vec![1.0])?;
    let points = box_points(&model, &domain, None, 60, &mut ChaCha8Rng::seed_from_u64(2))?;
    let cfg = McvStemConfig {
        l_m: 0.5,
        alphas: log_space(0.1, 3.0, 4),
        epsilons: log_space(0.3, 30.0, 4),
        ..McvStemConfig::default()
    };
    let sampled = line_search(&cfg, &model, &points)?;
    let bound = sampled.samples.summary.bound;

    let table = MetricTable::from_samples(&sampled.samples, 4)?;
    let policies = [
        NamedPolicy {
            name: "mcvstem".into(),
            kind: PolicyKind::MetricTable,
            policy: Policy::Metric(MetricSource::Table(Arc::new(table))),
        },
        NamedPolicy { name: "sdre".into(), kind: PolicyKind::Sdre, policy: Policy::Sdre(SdreWeights::default()) },
    ];
    let exp = ExperimentConfig {
        horizon: 5.0,
        dt: 1e-3,
        runs: 20,
        initial_box: Some(StateBox::new(vec![-0.5], vec![0.5])?),
        ..ExperimentConfig::default()
    };
    let rep = run_comparison(&model, &exp, &policies, bound, 11)?;
    println!("{:<10} {:>12} {:>12} {:>10}", "policy", "steady MSE", "bound", "violation");
    for p in &rep.policies {
        println!("{:<10} {:>12.4e} {:>12.4e} {:>10}", p.name, p.steady_mse, p.bound, p.violation);
    }
    Ok(())
}
