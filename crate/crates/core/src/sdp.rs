//! Primal-dual interior-point solver for LMI problems.
//!
//! `min cᵀy  s.t.  F₀ⱼ + Σ yᵢ Fᵢⱼ ⪯ 0` is solved as the dual of a block
//! semidefinite program (`A = F`, `C = −F₀`, `b = −c`) through a homogeneous
//! self-dual embedding, so infeasible and unbounded problems end with a
//! certificate instead of diverging. Search directions use the HKM scaling
//! with a Mehrotra predictor-corrector; the Schur-complement system is
//! factored with an envelope Cholesky that exploits the block-arrow pattern
//! of sampled metric problems.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_eig, min_eig};
use crate::lmi::{LmiBlock, LmiProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Relative primal and dual residual tolerance.
    pub feasibility_tol: f64,
    /// Relative duality-gap tolerance.
    pub gap_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iterations: 200, feasibility_tol: 1e-8, gap_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    /// Stopped short of the requested accuracy but within 100x of it.
    NearOptimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalFailure,
}

impl SolveStatus {
    pub fn is_solved(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::NearOptimal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mu: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub relative_gap: f64,
    pub tau: f64,
    pub kappa: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    /// Full decision vector, fixed variables included.
    pub y: Vec<f64>,
    pub objective: f64,
    /// Largest eigenvalue of any constraint at `y`, each constraint divided
    /// by its [`block_scale`]; `≤ 0` means feasible.
    pub margin: f64,
    /// Same without the per-block scaling.
    pub absolute_margin: f64,
    pub iterations: usize,
    pub relative_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub log: Vec<IterationRecord>,
}

impl SolveReport {
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iteration,mu,primal_residual,dual_residual,relative_gap,tau,kappa,step")?;
        for r in &self.log {
            writeln!(
                f,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.iteration, r.mu, r.primal_residual, r.dual_residual, r.relative_gap, r.tau, r.kappa, r.step
            )?;
        }
        Ok(())
    }
}

/// Per-block constraint values at a point.
///
/// `feasible` compares eigenvalues relative to [`block_scale`] against the
/// tolerance, so constraints with large coefficients are not held to a
/// tighter standard than the solver's own residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub block_max_eig: Vec<f64>,
    /// `block_max_eig` divided by the block scale.
    pub block_relative: Vec<f64>,
    /// Worst relative value.
    pub worst: f64,
    pub worst_block: Option<String>,
    pub feasible: bool,
}

/// Evaluates every constraint of `problem` at `y`.
pub fn check_feasibility(problem: &LmiProblem, y: &[f64], tol: f64) -> Result<FeasibilityReport> {
    if y.len() != problem.nvars() {
        return Err(Error::Dimension(format!(
            "decision vector has length {}, problem has {}",
            y.len(),
            problem.nvars()
        )));
    }
    let block_max_eig: Vec<f64> = problem.blocks.iter().map(|b| max_eig(&b.evaluate(y))).collect();
    let block_relative: Vec<f64> = block_max_eig.iter().zip(&problem.blocks).map(|(e, b)| e / block_scale(b)).collect();
    let (worst, worst_block) =
        block_relative.iter().zip(&problem.blocks).fold((f64::NEG_INFINITY, None), |(w, wb), (e, b)| {
            if *e > w {
                (*e, Some(b.label.clone()))
            } else {
                (w, wb)
            }
        });
    let fixed_ok = problem.fixed.iter().all(|(i, v)| (y[*i] - v).abs() <= tol);
    Ok(FeasibilityReport { feasible: worst <= tol && fixed_ok, block_max_eig, block_relative, worst, worst_block })
}

/// `max(1, ‖F₀‖, maxᵢ ‖Fᵢ‖)` in the Frobenius norm.
pub fn block_scale(block: &LmiBlock) -> f64 {
    block.terms.iter().map(|(_, m)| m.norm()).fold(block.constant.norm(), f64::max).max(1.0)
}

struct Block {
    c: DMatrix<f64>,
    a: Vec<(usize, DMatrix<f64>)>,
}

struct Compiled {
    blocks: Vec<Block>,
    b: DVector<f64>,
    free: Vec<usize>,
    envelope: Vec<usize>,
    degree: usize,
}

fn compile(problem: &LmiProblem) -> Compiled {
    let nv = problem.nvars();
    let mut fixed = vec![None; nv];
    for (i, v) in &problem.fixed {
        fixed[*i] = Some(*v);
    }
    let free: Vec<usize> = (0..nv).filter(|i| fixed[*i].is_none()).collect();
    let mut position = vec![usize::MAX; nv];
    for (k, i) in free.iter().enumerate() {
        position[*i] = k;
    }
    let mut envelope: Vec<usize> = (0..free.len()).collect();
    let mut degree = 0;
    let blocks = problem
        .blocks
        .iter()
        .map(|blk| {
            let mut f0 = blk.constant.clone();
            let mut a = Vec::with_capacity(blk.terms.len());
            for (i, m) in &blk.terms {
                match fixed[*i] {
                    Some(v) => f0 += m * v,
                    None => a.push((position[*i], m.clone())),
                }
            }
            // Positive rescaling of a constraint leaves its feasible set unchanged.
            let scale = 1.0 / block_scale(blk);
            a.sort_by_key(|(i, _)| *i);
            let a: Vec<_> = a.into_iter().map(|(i, m)| (i, m * scale)).collect();
            if let Some(first) = a.first().map(|(i, _)| *i) {
                for (i, _) in &a {
                    envelope[*i] = envelope[*i].min(first);
                }
            }
            degree += f0.nrows();
            Block { c: -f0 * scale, a }
        })
        .collect();
    let b = DVector::from_iterator(free.len(), free.iter().map(|i| -problem.objective[*i]));
    Compiled { blocks, b, free, envelope, degree }
}

impl Compiled {
    fn apply_a(&self, mats: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.free.len());
        for (blk, x) in self.blocks.iter().zip(mats) {
            for (i, a) in &blk.a {
                out[*i] += a.dot(x);
            }
        }
        out
    }

    fn apply_at(&self, y: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.blocks
            .iter()
            .map(|blk| {
                let mut s = DMatrix::zeros(blk.c.nrows(), blk.c.nrows());
                for (i, a) in &blk.a {
                    s += a * y[*i];
                }
                s
            })
            .collect()
    }
}

/// Symmetric positive-definite matrix stored by rows within its envelope.
struct EnvelopeMatrix {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeMatrix {
    fn new(first: &[usize]) -> Self {
        let mut start = Vec::with_capacity(first.len() + 1);
        let mut total = 0;
        for (i, f) in first.iter().enumerate() {
            start.push(total);
            total += i + 1 - f;
        }
        start.push(total);
        Self { first: first.to_vec(), start, data: vec![0.0; total] }
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(j >= self.first[i]);
        self.data[self.start[i] + j - self.first[i]] += v;
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[self.start[i]..self.start[i + 1]]
    }

    fn diag(&self, i: usize) -> f64 {
        self.data[self.start[i + 1] - 1]
    }

    fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(x.len());
        for i in 0..x.len() {
            let f = self.first[i];
            for (k, v) in self.row(i).iter().enumerate() {
                let j = f + k;
                y[i] += v * x[j];
                if j < i {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    /// In-place Cholesky `M = L Lᵀ`. Pivots that collapse are replaced by a
    /// huge value, which freezes the corresponding direction.
    fn factor(&mut self) -> usize {
        let n = self.first.len();
        let mut replaced = 0;
        for i in 0..n {
            let fi = self.first[i];
            let orig_diag = self.diag(i).abs().max(1e-300);
            for j in fi..=i {
                let fj = self.first[j];
                let k0 = fi.max(fj);
                let ri = &self.data[self.start[i]..self.start[i + 1]];
                let rj = &self.data[self.start[j]..self.start[j + 1]];
                let mut s = ri[j - fi];
                let a = &ri[k0 - fi..j - fi];
                let b = &rj[k0 - fj..j - fj];
                s -= a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                let val = if j < i {
                    s / rj[j - fj]
                } else if s > 1e-14 * orig_diag {
                    s.sqrt()
                } else {
                    replaced += 1;
                    1e64
                };
                self.data[self.start[i] + j - fi] = val;
            }
        }
        replaced
    }

    fn solve_factored(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let n = rhs.len();
        let mut z = rhs.clone();
        for i in 0..n {
            let f = self.first[i];
            let row = self.row(i);
            let s: f64 = row[..i - f].iter().zip(z.rows(f, i - f).iter()).map(|(a, b)| a * b).sum();
            z[i] = (z[i] - s) / row[i - f];
        }
        for i in (0..n).rev() {
            let f = self.first[i];
            let row = self.row(i);
            z[i] /= row[i - f];
            let zi = z[i];
            for k in f..i {
                z[k] -= row[k - f] * zi;
            }
        }
        z
    }
}

struct Schur {
    m: EnvelopeMatrix,
    l: EnvelopeMatrix,
}

impl Schur {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = self.l.solve_factored(rhs);
        for _ in 0..2 {
            let r = rhs - self.m.mul(&x);
            x += self.l.solve_factored(&r);
        }
        x
    }
}

struct Direction {
    dx: Vec<DMatrix<f64>>,
    dz: Vec<DMatrix<f64>>,
    dy: DVector<f64>,
    dtau: f64,
    dkappa: f64,
}

fn sym_in_place(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Largest `α` keeping `X + α dX ⪰ 0`, for `X ≻ 0`.
fn max_step(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    if x.nrows() == 1 {
        return if dx[(0, 0)] < 0.0 { -x[(0, 0)] / dx[(0, 0)] } else { f64::INFINITY };
    }
    let Some(ch) = x.clone().cholesky() else {
        return 0.0;
    };
    let l = ch.l();
    let Some(linv) = l.try_inverse() else {
        return 0.0;
    };
    let s = &linv * dx * linv.transpose();
    let lam = min_eig(&sym_in_place(s));
    if lam >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lam
    }
}

fn inverse_spd(z: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let ch = z.clone().cholesky()?;
    Some(sym_in_place(ch.inverse()))
}

/// Solves an LMI problem.
pub fn solve(problem: &LmiProblem, opts: &SolverOptions) -> Result<SolveReport> {
    problem.validate()?;
    let cp = compile(problem);
    let m = cp.free.len();
    let nb = cp.blocks.len();
    let dims: Vec<usize> = cp.blocks.iter().map(|b| b.c.nrows()).collect();
    let eye = |d: usize| DMatrix::<f64>::identity(d, d);

    let mut x: Vec<DMatrix<f64>> = dims.iter().map(|&d| eye(d)).collect();
    let mut z: Vec<DMatrix<f64>> = dims.iter().map(|&d| eye(d)).collect();
    let mut y = DVector::<f64>::zeros(m);
    let (mut tau, mut kappa) = (1.0f64, 1.0f64);
    let nu = (cp.degree + 1) as f64;
    let b_norm = cp.b.norm();
    let c_norm = cp.blocks.iter().map(|b| b.c.norm_squared()).sum::<f64>().sqrt();

    let mut log = Vec::new();
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    let mut last = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut step = 0.0;

    for it in 0..=opts.max_iterations {
        iterations = it;
        let zinv: Option<Vec<_>> = z.iter().map(inverse_spd).collect();
        let Some(zinv) = zinv else {
            status = SolveStatus::NumericalFailure;
            break;
        };

        let ax = cp.apply_a(&x);
        let aty = cp.apply_at(&y);
        let rp = &cp.b * tau - &ax;
        let rd: Vec<DMatrix<f64>> = (0..nb).map(|k| &cp.blocks[k].c * tau - &aty[k] - &z[k]).collect();
        let cx: f64 = (0..nb).map(|k| cp.blocks[k].c.dot(&x[k])).sum();
        let by = cp.b.dot(&y);
        let rg = by - cx - kappa;
        let xz: f64 = (0..nb).map(|k| x[k].dot(&z[k])).sum();
        let mu = (xz + tau * kappa) / nu;

        let pres = rp.norm() / tau / (1.0 + b_norm);
        let dres = rd.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt() / tau / (1.0 + c_norm);
        let (pobj, dobj) = (cx / tau, by / tau);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        last = (pres, dres, gap);
        log.push(IterationRecord {
            iteration: it,
            mu,
            primal_residual: pres,
            dual_residual: dres,
            relative_gap: gap,
            tau,
            kappa,
            step,
        });
        if !mu.is_finite() || !pres.is_finite() || !dres.is_finite() {
            status = SolveStatus::NumericalFailure;
            break;
        }
        if pres <= opts.feasibility_tol && dres <= opts.feasibility_tol && gap <= opts.gap_tol {
            status = SolveStatus::Optimal;
            break;
        }
        // Certificate that the LMI itself is empty: X ⪰ 0, A(X) = 0, ⟨C, X⟩ < 0.
        if cx < 0.0 && ax.norm() / -cx <= opts.feasibility_tol && tau <= 1e-3 * kappa.max(1.0) {
            status = SolveStatus::Infeasible;
            break;
        }
        // Certificate of an unbounded objective: Aᵀy + Z = 0, bᵀy > 0.
        if by > 0.0 {
            let ray: f64 = (0..nb).map(|k| (&aty[k] + &z[k]).norm_squared()).sum::<f64>().sqrt();
            if ray / by <= opts.feasibility_tol && tau <= 1e-3 * kappa.max(1.0) {
                status = SolveStatus::Unbounded;
                break;
            }
        }
        if it == opts.max_iterations {
            break;
        }

        // Schur complement M_ij = tr(A_i X A_j Z⁻¹) and a_i = tr(A_i X C Z⁻¹).
        let mut mm = EnvelopeMatrix::new(&cp.envelope);
        let mut avec = DVector::zeros(m);
        let mut g = 0.0;
        for (k, blk) in cp.blocks.iter().enumerate() {
            let xc = &x[k] * &blk.c * &zinv[k];
            g += blk.c.dot(&xc);
            for (p, (i, ai)) in blk.a.iter().enumerate() {
                avec[*i] += ai.dot(&xc);
                let gi = &x[k] * ai * &zinv[k];
                for (j, aj) in &blk.a[..=p] {
                    mm.add(*i, *j, aj.dot(&gi));
                }
            }
        }
        let mut l = EnvelopeMatrix { first: mm.first.clone(), start: mm.start.clone(), data: mm.data.clone() };
        l.factor();
        let schur = Schur { m: mm, l };
        let q = schur.solve(&(&avec + &cp.b));
        let amb = &avec - &cp.b;
        let denom = amb.dot(&q) - g - kappa / tau;

        let direction = |eta: f64, rc: &[DMatrix<f64>], rtk: f64| -> Direction {
            let rd_eta: Vec<DMatrix<f64>> = rd.iter().map(|r| r * eta).collect();
            let xrz: Vec<DMatrix<f64>> = (0..nb).map(|k| &x[k] * &rd_eta[k] * &zinv[k]).collect();
            let rhs1 = &rp * eta - cp.apply_a(rc) + cp.apply_a(&xrz);
            let p = schur.solve(&rhs1);
            let crc: f64 = (0..nb).map(|k| cp.blocks[k].c.dot(&rc[k])).sum();
            let cxrz: f64 = (0..nb).map(|k| cp.blocks[k].c.dot(&xrz[k])).sum();
            let rhs3 = rg * eta - crc + cxrz - rtk / tau;
            let dtau = (rhs3 - amb.dot(&p)) / denom;
            let dy = &p + &q * dtau;
            let atdy = cp.apply_at(&dy);
            let dz: Vec<DMatrix<f64>> = (0..nb).map(|k| &rd_eta[k] - &atdy[k] + &cp.blocks[k].c * dtau).collect();
            let dx: Vec<DMatrix<f64>> = (0..nb).map(|k| &rc[k] - sym_in_place(&x[k] * &dz[k] * &zinv[k])).collect();
            let dkappa = (rtk - kappa * dtau) / tau;
            Direction { dx, dz, dy, dtau, dkappa }
        };
        let step_to_boundary = |d: &Direction| -> f64 {
            let mut a = f64::INFINITY;
            for k in 0..nb {
                a = a.min(max_step(&x[k], &d.dx[k])).min(max_step(&z[k], &d.dz[k]));
            }
            if d.dtau < 0.0 {
                a = a.min(-tau / d.dtau);
            }
            if d.dkappa < 0.0 {
                a = a.min(-kappa / d.dkappa);
            }
            a
        };

        // Predictor.
        let rc_aff: Vec<DMatrix<f64>> = x.iter().map(|xk| -xk).collect();
        let aff = direction(1.0, &rc_aff, -tau * kappa);
        let a_aff = step_to_boundary(&aff).min(1.0);
        let xz_aff: f64 = (0..nb).map(|k| (&x[k] + &aff.dx[k] * a_aff).dot(&(&z[k] + &aff.dz[k] * a_aff))).sum();
        let mu_aff = (xz_aff + (tau + a_aff * aff.dtau) * (kappa + a_aff * aff.dkappa)) / nu;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let rc: Vec<DMatrix<f64>> = (0..nb)
            .map(|k| &zinv[k] * (sigma * mu) - &x[k] - sym_in_place(&aff.dx[k] * &aff.dz[k] * &zinv[k]))
            .collect();
        let rtk = sigma * mu - tau * kappa - aff.dtau * aff.dkappa;
        let d = direction(1.0 - sigma, &rc, rtk);
        let a_max = step_to_boundary(&d);
        step = (0.95 * a_max).min(1.0);
        if !(step > 1e-12) {
            status = SolveStatus::NumericalFailure;
            break;
        }
        for k in 0..nb {
            x[k] = sym_in_place(&x[k] + &d.dx[k] * step);
            z[k] = sym_in_place(&z[k] + &d.dz[k] * step);
        }
        y += &d.dy * step;
        tau += d.dtau * step;
        kappa += d.dkappa * step;
    }

    let (pres, dres, gap) = last;
    if matches!(status, SolveStatus::MaxIterations | SolveStatus::NumericalFailure)
        && pres <= 100.0 * opts.feasibility_tol
        && dres <= 100.0 * opts.feasibility_tol
        && gap <= 100.0 * opts.gap_tol
    {
        status = SolveStatus::NearOptimal;
    }

    let mut full = vec![0.0; problem.nvars()];
    for (k, i) in cp.free.iter().enumerate() {
        full[*i] = y[k] / tau;
    }
    for (i, v) in &problem.fixed {
        full[*i] = *v;
    }
    let (margin, absolute_margin) =
        problem.blocks.iter().fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |(rel, abs), b| {
            let e = max_eig(&b.evaluate(&full));
            (rel.max(e / block_scale(b)), abs.max(e))
        });
    Ok(SolveReport {
        status,
        objective: problem.objective_value(&full),
        y: full,
        margin,
        absolute_margin,
        iterations,
        relative_gap: gap,
        primal_residual: pres,
        dual_residual: dres,
        log,
    })
}
