use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use nscm::pipeline::{exit_code, run_stage, PipelineConfig, Stage, StageOutcome};

/// Sample, train, verify and simulate neural stochastic contraction metrics.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// sample | train | verify | simulate (alias compare) | all
    #[arg(long, default_value = "all")]
    stage: String,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grid override, e.g. "alpha=0.01:10:10;epsilon=0.1,1,10".
    #[arg(long)]
    grid_override: Option<String>,
    /// Comma-separated subset of experiment policies.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    /// Also write gnuplot-ready CSVs.
    #[arg(long)]
    emit_plots: bool,
}

fn run(args: &Args) -> nscm::Result<bool> {
    let stage: Stage = args.stage.parse()?;
    let mut cfg = PipelineConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(grid) = &args.grid_override {
        cfg.apply_grid_override(grid)?;
    }
    if let Some(names) = &args.policies {
        cfg.select_policies(names)?;
    }
    let mut ok = true;
    for outcome in run_stage(&cfg, stage, args.emit_plots)? {
        match outcome {
            StageOutcome::Sampled { alpha, epsilon, objective, bound, interior } => {
                println!("sample: alpha* = {alpha:.4}, eps* = {epsilon:.4}, J* = {objective:.6e}, bound = {bound:.6e}, interior argmin: {interior}");
            }
            StageOutcome::Trained { test_error, train_error, epochs, c_nn } => {
                println!("train: C_nn = {c_nn:.4}, {epochs} epochs, train error = {train_error:.4}, test error = {test_error:.4}");
            }
            StageOutcome::Verified(report) => {
                for c in &report.checks {
                    println!(
                        "verify: {:<32} {} (value {:.3e}, limit {:.3e})",
                        c.name,
                        if c.passed { "pass" } else { "FAIL" },
                        c.value,
                        c.limit
                    );
                }
                ok &= report.passed;
            }
            StageOutcome::Simulated(rows) => {
                println!("{:<16} {:>14} {:>14}  status", "policy", "steady MSE", "bound");
                for (name, mse, bound, violation) in rows {
                    println!(
                        "{name:<16} {mse:>14.6e} {bound:>14.6e}  {}",
                        if violation { "violates bound" } else { "within bound" }
                    );
                }
            }
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
