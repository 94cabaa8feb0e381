//! Contraction LMIs for a fixed Jacobian: feasible below the decay rate of
//! the slowest mode, infeasible above it.
//!
//! `cargo run --release --example contraction_lmi`

use nalgebra::DMatrix;
use nscm::lmi::{build_basic_contraction_blocks, DecisionLayout, LmiProblem, WdotSpec};
use nscm::sdp::{check_feasibility, solve, SolverOptions};

fn problem(f_x: &DMatrix<f64>, alpha: f64) -> nscm::Result<LmiProblem> {
    let layout = DecisionLayout::new(f_x.nrows(), 1);
    let mut p = LmiProblem::new(layout.clone());
    p.extend(build_basic_contraction_blocks(&layout, f_x, alpha, 0.0, WdotSpec::zero(), 0)?);
    // minimize the condition number χ with ν pinned
    p.objective[layout.chi] = 1.0;
    p.fix(layout.nu, 1.0);
    p.fix(layout.nu_c, 0.0);
    Ok(p)
}

fn main() -> nscm::Result<()> {
    let f_x = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -2.0]);
    let opts = SolverOptions::default();
    let mut w_half = None;
    println!("{:>6} {:>12} {:>10} {:>8}", "alpha", "status", "chi", "iters");
    for alpha in [0.1, 0.5, 0.9, 0.99, 1.1, 1.5] {
        let p = problem(&f_x, alpha)?;
        let rep = solve(&p, &opts)?;
        let chi = if rep.status.is_solved() { format!("{:.4}", rep.objective) } else { "-".into() };
        println!("{alpha:>6} {:>12} {chi:>10} {:>8}", format!("{:?}", rep.status), rep.iterations);
        if rep.status.is_solved() {
            let feas = check_feasibility(&p, &rep.y, 1e-6)?;
            assert!(feas.feasible, "{:?}", feas.worst_block);
            if alpha == 0.5 {
                w_half = Some(p.layout.wbar(&rep.y, 0));
            }
        }
    }
    if let Some(w) = w_half {
        println!("W at alpha 0.5:{w:.4}");
    }
    Ok(())
}
