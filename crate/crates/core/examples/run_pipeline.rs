//! Runs sample, train, verify and simulate from a pipeline config, the same
//! path the `nscm` binary takes.
//!
//! `cargo run --release --example run_pipeline -- [config.toml] [out_dir]`

use nscm::pipeline::{run_stage, PipelineConfig, Stage, StageOutcome};
use std::path::PathBuf;

fn main() -> nscm::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("config/toy.toml"));
    let mut cfg = PipelineConfig::from_file(&config)?;
    cfg.out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("nscm-example"));

    for outcome in run_stage(&cfg, Stage::All, true)? {
        match outcome {
            StageOutcome::Sampled { alpha, epsilon, objective, bound, interior } => {
                println!(
                    "sampled: alpha {alpha}, eps {epsilon}, J {objective:.4e}, bound {bound:.4e}, interior {interior}"
                )
            }
            StageOutcome::Trained { test_error, train_error, epochs, c_nn } => {
                println!("trained: {epochs} epochs, C_nn {c_nn:.4}, errors {train_error:.4} / {test_error:.4}")
            }
            StageOutcome::Verified(rep) => {
                for c in &rep.checks {
                    println!(
                        "verify {:<34} {} ({:.3e} vs {:.3e})",
                        c.name,
                        if c.passed { "pass" } else { "FAIL" },
                        c.value,
                        c.limit
                    );
                }
            }
            StageOutcome::Simulated(rows) => {
                for (name, mse, bound, violation) in rows {
                    println!("{name:<10} steady MSE {mse:.4e}, bound {bound:.4e}, violation {violation}");
                }
            }
        }
    }
    println!("artifacts in {}", cfg.out.display());
    Ok(())
}
