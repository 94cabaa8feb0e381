//! Fits a spectrally normalized network to metrics sampled along the rocket
//! pitch dynamics and checks the Lipschitz certificate on fresh points.
//!
//! `cargo run --release --example train_metric_network`

use nscm::dynamics::rocket::{rocket_benchmark, sampling_box, RocketConfig};
use nscm::mcvstem::{box_points, line_search, McvStemConfig, Mode};
use nscm::nn::{sn_condition_with_offset, train, verify_lipschitz, FeatureMap, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nscm::Result<()> {
    let rocket = RocketConfig::default();
    let model = rocket_benchmark(&rocket)?;
    let domain = sampling_box(&rocket)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let points = box_points(&model, &domain, None, 200, &mut rng)?;
    let l_m = 0.5;
    let cfg = McvStemConfig {
        mode: Mode::Control,
        l_m,
        nu_weight_ratio: 100.0,
        alphas: vec![0.8, 1.6, 3.2],
        epsilons: vec![10.0, 33.0, 100.0],
        ..McvStemConfig::default()
    };
    let sampled = line_search(&cfg, &model, &points)?;
    println!("sampled {} metrics at alpha {}, eps {}", sampled.samples.points.len(), sampled.alpha, sampled.epsilon);

    let features = FeatureMap { n: model.n, m: model.m, time: domain.time, reference: false };
    let tc = TrainConfig { widths: vec![64, 64, 64], epochs: 100, early_stop: 0.0, l_m, ..TrainConfig::default() };
    let res = train(&sampled.samples, features, &tc, 7)?;
    let net = &res.net;
    println!("{} epochs, train error {:.4}, test error {:.4}", res.history.len(), res.train_error, res.test_error);
    println!(
        "C_nn {:.4}, m_bar {:.4}, certified L_m {:.3e} <= {l_m}",
        net.c_nn,
        net.m_bar,
        sn_condition_with_offset(net.c_nn, net.m_bar, net.offset.norm(), net.layers())
    );

    let rep = verify_lipschitz(net, &domain, l_m, 5000, &mut rng);
    println!(
        "measured derivative Lipschitz {:.3e} (demanded {l_m}), theta slope {:.3e} <= {:.3e}, passed: {}",
        rep.measured, rep.theta_slope, rep.theta_slope_bound, rep.passed
    );
    Ok(())
}
