//! Oracles shared by the solver tests and the acceptance run.

use super::{max_eig_small, random_matrix, random_pd, symmetric};
use nalgebra::DMatrix;
use nscm::linalg::{max_eig, min_eig};
use nscm::lmi::{build_basic_contraction_blocks, scalar_bounds, DecisionLayout, LmiBlock, LmiProblem, WdotSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random bounded problem over `k` of the three core variables:
/// minimize `cᵀy` subject to one 2×2 LMI and `0 ≤ yᵢ ≤ 2`. Strictly
/// feasible at a random interior point.
pub struct Toy {
    pub problem: LmiProblem,
    pub vars: Vec<usize>,
    cost: Vec<f64>,
    pub f0: DMatrix<f64>,
    pub fi: Vec<DMatrix<f64>>,
}

pub fn toy(seed: u64, k: usize) -> Toy {
    let mut r = super::rng(seed);
    let mut p = LmiProblem::new(DecisionLayout::new(1, 0));
    let all = [p.layout.nu, p.layout.nu_c, p.layout.chi];
    let vars = all[..k].to_vec();
    for &i in &all[k..] {
        p.fix(i, 0.0);
    }
    let fi: Vec<DMatrix<f64>> = (0..k).map(|_| symmetric(&mut r, 2)).collect();
    let center: Vec<f64> = (0..k).map(|_| r.random_range(0.5..1.5)).collect();
    let slack = random_pd(&mut r, 2, 0.05) * 0.3;
    let mut f0 = -slack;
    for (f, c) in fi.iter().zip(&center) {
        f0 -= f * *c;
    }
    let mut blk = LmiBlock::new("toy", 2);
    blk.constant = f0.clone();
    for (f, &i) in fi.iter().zip(&vars) {
        blk.add_term(i, f.clone());
    }
    p.push(blk);
    let cost: Vec<f64> = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
    for (&i, c) in vars.iter().zip(&cost) {
        p.extend(scalar_bounds(i, &format!("y{i}"), 0.0, Some(2.0)));
        p.objective[i] = *c;
    }
    Toy { problem: p, vars, cost, f0, fi }
}

impl Toy {
    pub fn feasible(&self, y: &[f64]) -> bool {
        let mut m = self.f0.clone();
        for (f, v) in self.fi.iter().zip(y) {
            m += f * *v;
        }
        y.iter().all(|v| (0.0..=2.0).contains(v)) && max_eig_small(&m) <= 0.0
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        self.cost.iter().zip(y).map(|(c, v)| c * v).sum()
    }

    /// Exhaustive 10⁶-point grid over all but the last variable with the
    /// last one minimized exactly, then a zoom around the incumbent that
    /// only shrinks once the incumbent sits strictly inside the window.
    ///
    /// A plain lattice over every axis misses thin needles of the feasible
    /// set by more than the tolerance it is meant to check.
    pub fn grid_optimum(&self) -> f64 {
        let outer = self.vars.len() - 1;
        let per_axis: usize = if outer == 1 { 1_000_001 } else { 1001 };
        let mut best = self.scan(&vec![0.0; outer], &vec![2.0; outer], per_axis, (f64::INFINITY, vec![0.0; outer]));
        let mut step = 2.0 / (per_axis - 1) as f64;
        for _ in 0..400 {
            if step < 1e-10 || !best.0.is_finite() {
                break;
            }
            let lo: Vec<f64> = best.1.iter().map(|v| (v - 10.0 * step).max(0.0)).collect();
            let hi: Vec<f64> = best.1.iter().map(|v| (v + 10.0 * step).min(2.0)).collect();
            let next = self.scan(&lo, &hi, 21, best.clone());
            let on_edge =
                (0..outer).any(|i| (next.1[i] <= lo[i] && lo[i] > 0.0) || (next.1[i] >= hi[i] && hi[i] < 2.0));
            best = next;
            if !on_edge {
                step *= 0.5;
            }
        }
        best.0
    }

    fn scan(&self, lo: &[f64], hi: &[f64], per_axis: usize, mut best: (f64, Vec<f64>)) -> (f64, Vec<f64>) {
        let k = lo.len();
        let step: Vec<f64> = (0..k).map(|i| (hi[i] - lo[i]) / (per_axis - 1) as f64).collect();
        for idx in 0..per_axis.pow(k as u32) {
            let mut rest = idx;
            let y: Vec<f64> = (0..k)
                .map(|i| {
                    let j = rest % per_axis;
                    rest /= per_axis;
                    lo[i] + step[i] * j as f64
                })
                .collect();
            if let Some(v) = self.best_last(&y) {
                if v < best.0 {
                    best = (v, y);
                }
            }
        }
        best
    }

    /// Minimum of the objective over the last variable with the others
    /// fixed. `F(t) = A + tB ⪯ 0` holds on one interval bounded by roots of
    /// the diagonal entries and of the determinant.
    fn best_last(&self, outer: &[f64]) -> Option<f64> {
        let mut a = self.f0.clone();
        for (f, v) in self.fi.iter().zip(outer) {
            a += f * *v;
        }
        let b = self.fi.last().unwrap();
        let mut cuts = vec![0.0, 2.0];
        let mut root = |t: f64| {
            if t.is_finite() && t > 0.0 && t < 2.0 {
                cuts.push(t);
            }
        };
        for i in 0..2 {
            root(-a[(i, i)] / b[(i, i)]);
        }
        // det(A + tB) = q2 t² + q1 t + q0
        let q2 = b[(0, 0)] * b[(1, 1)] - b[(0, 1)] * b[(0, 1)];
        let q1 = a[(0, 0)] * b[(1, 1)] + b[(0, 0)] * a[(1, 1)] - 2.0 * a[(0, 1)] * b[(0, 1)];
        let q0 = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(0, 1)];
        if q2.abs() > 1e-300 {
            let disc = q1 * q1 - 4.0 * q2 * q0;
            if disc >= 0.0 {
                root((-q1 + disc.sqrt()) / (2.0 * q2));
                root((-q1 - disc.sqrt()) / (2.0 * q2));
            }
        } else {
            root(-q0 / q1);
        }
        cuts.sort_by(f64::total_cmp);
        let feasible_pieces: Vec<(f64, f64)> = cuts
            .windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| (w[0], w[1]))
            .filter(|(l, h)| {
                let mut y = outer.to_vec();
                y.push(0.5 * (l + h));
                self.feasible(&y)
            })
            .collect();
        let lo = feasible_pieces.first()?.0;
        let hi = feasible_pieces.last()?.1;
        let c = *self.cost.last().unwrap();
        let mut y = outer.to_vec();
        y.push(if c >= 0.0 { lo } else { hi });
        Some(self.value(&y))
    }
}

pub fn contraction_problem(f_x: &DMatrix<f64>, alpha: f64) -> LmiProblem {
    let layout = DecisionLayout::new(f_x.nrows(), 1);
    let mut p = LmiProblem::new(layout.clone());
    p.extend(build_basic_contraction_blocks(&layout, f_x, alpha, 0.0, WdotSpec::zero(), 0).unwrap());
    p.objective[layout.chi] = 1.0;
    p.fix(layout.nu, 1.0);
    p.fix(layout.nu_c, 0.0);
    p
}

/// One draw of the change of variables `ν = 1/ω̲`, `χ = ω̄/ω̲`, `W̄ = ν M⁻¹`.
pub struct SchurCase {
    /// `2 sym(M f_x) + α_g I + 2αM ⪯ 0` and `ω̄⁻¹ I ⪯ M ⪯ ω̲⁻¹ I`.
    pub original: bool,
    /// Largest eigenvalue over the assembled blocks at the transformed point.
    pub worst: f64,
}

/// Draws `(f_x, M, α, α_g, ω̲, ω̄)` that satisfy or violate the original
/// constraints by a clear margin; `None` when the draw has no room.
pub fn schur_instance(r: &mut ChaCha8Rng, n: usize) -> Option<SchurCase> {
    let f_x = random_matrix(r, n, n) - DMatrix::identity(n, n) * 1.5;
    let m = random_pd(r, n, 0.2);
    let alpha = r.random_range(0.05..1.0);
    let sym_part = &m * &f_x + f_x.transpose() * &m + &m * (2.0 * alpha);
    let room = -max_eig(&sym_part);
    if room <= 1e-3 {
        return None;
    }
    let rate_ok = r.random_bool(0.7);
    let alpha_g = room * if rate_ok { r.random_range(0.05..0.9) } else { r.random_range(1.1..3.0) };
    let box_ok = r.random_bool(0.7);
    let shrink = if box_ok { r.random_range(1.01..1.5) } else { r.random_range(0.6..0.99) };
    let omega_lo = 1.0 / (max_eig(&m) * shrink);
    let omega_hi = 1.0 / (min_eig(&m) / r.random_range(1.01..1.5));

    let original = max_eig(&(&sym_part + DMatrix::identity(n, n) * alpha_g)) <= 0.0
        && max_eig(&m) <= 1.0 / omega_lo
        && min_eig(&m) >= 1.0 / omega_hi;

    let nu = 1.0 / omega_lo;
    let chi = omega_hi / omega_lo;
    let wbar = m.clone().try_inverse().unwrap() * nu;
    let layout = DecisionLayout::new(n, 1);
    let blocks = build_basic_contraction_blocks(&layout, &f_x, alpha, alpha_g, WdotSpec::zero(), 0).unwrap();
    let y = layout.pack(&[wbar], nu, 0.0, chi);
    let worst = blocks.iter().map(|b| max_eig(&b.evaluate(&y))).fold(f64::NEG_INFINITY, f64::max);
    Some(SchurCase { original, worst })
}
