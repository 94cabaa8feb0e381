//! Sampling of optimal stochastic contraction metrics.
//!
//! For a fixed contraction rate `α` and noise split `ε` every sample point
//! contributes its convexified contraction constraints to one coupled SDP
//! over `(ν, ν_c, χ, {W̄ᵢ})`. A grid line search over `(α, ε)` picks the pair
//! with the smallest objective.

use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{sdc_factorize, sdc_measurement_factorize, StateBox, SystemModel, DEFAULT_QUAD_ORDER};
use crate::error::{Error, Result};
use crate::linalg::{max_eig, min_eig, pack_sym, tri_len, unpack_sym};
use crate::lmi::{
    build_basic_contraction_blocks, build_control_blocks, build_estimation_blocks, nu_cube_blocks, scalar_bounds,
    DecisionLayout, LmiBlock, LmiProblem, WdotMode, WdotSpec,
};
use crate::sdp::{check_feasibility, solve, SolveStatus, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Control,
    Estimation,
    /// Contraction of the unforced system, both trajectories driven by `G_c`.
    Basic,
}

/// Rate and steady-state constants of the bound for one `(L_m, ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    /// `α_g`, `α_gc` or `α_e1`.
    pub alpha_1: f64,
    /// `α_e2`; zero outside estimation.
    pub alpha_2: f64,
    /// `C`, `C_c` or `C_e1`.
    pub c_1: f64,
    /// `C_e2`; zero outside estimation.
    pub c_2: f64,
}

/// Bound constants for the given mode.
pub fn bound_constants(
    mode: Mode,
    bounds: &crate::dynamics::NoiseBounds,
    l_m: f64,
    eps: f64,
) -> Result<BoundConstants> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!("epsilon must be positive, got {eps}")));
    }
    if !(l_m >= 0.0) {
        return Err(Error::Domain(format!("L_m must be nonnegative, got {l_m}")));
    }
    let rate = l_m * (eps + 0.5);
    let scale = 2.0 / eps + 1.0;
    Ok(match mode {
        Mode::Basic => {
            let g2 = 2.0 * bounds.g_c * bounds.g_c;
            BoundConstants { alpha_1: rate * g2, alpha_2: 0.0, c_1: g2 * scale, c_2: 0.0 }
        }
        Mode::Control => {
            let g2 = bounds.g_c * bounds.g_c;
            BoundConstants { alpha_1: rate * g2, alpha_2: 0.0, c_1: g2 * scale, c_2: 0.0 }
        }
        Mode::Estimation => {
            let g2 = bounds.g_e * bounds.g_e;
            let cd2 = (bounds.c_bar * bounds.d_bar).powi(2);
            BoundConstants { alpha_1: rate * g2, alpha_2: rate * cd2, c_1: g2 * scale, c_2: cd2 * scale }
        }
    })
}

/// `(c₁, c₂)` such that `(C_e1 χ + C_e2 χ ν²)/(2α) ≤ (c₁χ + c₂ν)³ / (3√(3C_e1))`.
pub fn estimation_weights(c_e1: f64, c_e2: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("contraction rate must be positive, got {alpha}")));
    }
    let root = (2.0 * alpha).cbrt();
    Ok(((3.0 * c_e1).sqrt() / root, c_e2.sqrt() / root))
}

/// Steady-state mean-squared error bound.
pub fn steady_state_bound(mode: Mode, k: &BoundConstants, nu: f64, chi: f64, alpha: f64) -> f64 {
    match mode {
        Mode::Basic | Mode::Control => k.c_1 * chi / (2.0 * alpha),
        Mode::Estimation => (k.c_1 * chi + k.c_2 * chi * nu * nu) / (2.0 * alpha),
    }
}

/// Objective weights. Unset entries take the mode defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    #[serde(default)]
    pub c3: f64,
}

/// Sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McvStemConfig {
    pub mode: Mode,
    pub weights: Weights,
    /// Default `c₂` for control and basic modes as a multiple of `c₁`.
    /// Without it `ν` is unbounded along the optimal face.
    pub nu_weight_ratio: f64,
    /// Lipschitz constant of the metric derivatives.
    pub l_m: f64,
    pub alphas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub wdot: WdotMode,
    pub quad_order: usize,
    pub solver: SolverOptions,
    /// Split the samples into independently solved chunks of this size.
    pub chunk_size: Option<usize>,
}

impl Default for McvStemConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Control,
            weights: Weights::default(),
            nu_weight_ratio: 1e-3,
            l_m: 0.0,
            alphas: log_space(0.01, 10.0, 10),
            epsilons: log_space(0.1, 10.0, 10),
            wdot: WdotMode::Zero,
            quad_order: DEFAULT_QUAD_ORDER,
            solver: SolverOptions::default(),
            chunk_size: None,
        }
    }
}

impl McvStemConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for v in [w.c1, w.c2].into_iter().flatten().chain([w.c3, self.nu_weight_ratio]) {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("objective weights must be nonnegative, got {v}")));
            }
        }
        if w.c3 > 0.0 && self.mode != Mode::Control {
            return Err(Error::Config("the control-effort cost (c3) applies to control mode only".into()));
        }
        if !(self.l_m >= 0.0) {
            return Err(Error::Config(format!("L_m must be nonnegative, got {}", self.l_m)));
        }
        if self.alphas.is_empty() || self.epsilons.is_empty() {
            return Err(Error::Config("line-search grid is empty".into()));
        }
        if self.alphas.iter().chain(&self.epsilons).any(|v| !(*v > 0.0)) {
            return Err(Error::Config("grid values must be positive".into()));
        }
        if self.quad_order == 0 {
            return Err(Error::Config("quadrature order must be at least 1".into()));
        }
        if self.chunk_size == Some(0) {
            return Err(Error::Config("chunk size must be positive".into()));
        }
        self.wdot.validate()
    }
}

/// `count` logarithmically spaced values from `lo` to `hi`.
pub fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp()).collect()
}

/// One sampled state with its time and reference.
///
/// Control: `x` is the state and `(x_ref, u_ref)` the target. Estimation: `x`
/// is the estimate and `x_ref` the true state of the predefined trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub x: DVector<f64>,
    pub t: f64,
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
}

/// Uniform samples over the state box, with references either fixed at the
/// origin or drawn from `target_box` (`[x_d, u_d]` stacked).
pub fn box_points<R: Rng>(
    model: &SystemModel,
    domain: &StateBox,
    target_box: Option<&StateBox>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<SamplePoint>> {
    domain.validate()?;
    if domain.dim() != model.n {
        return Err(Error::Dimension(format!("state box has dimension {}, model has {}", domain.dim(), model.n)));
    }
    if let Some(tb) = target_box {
        if tb.dim() != model.n + model.m {
            return Err(Error::Dimension(format!("target box must have n + m = {} coordinates", model.n + model.m)));
        }
    }
    Ok((0..count)
        .map(|_| {
            let x = domain.sample_state(rng);
            let t = domain.sample_time(rng);
            let (x_ref, u_ref) = match target_box {
                Some(tb) => {
                    let z = tb.sample_state(rng);
                    (z.rows(0, model.n).into_owned(), z.rows(model.n, model.m).into_owned())
                }
                None => (DVector::zeros(model.n), DVector::zeros(model.m)),
            };
            SamplePoint { x, t, x_ref, u_ref }
        })
        .collect())
}

/// Samples along the unforced trajectory from `x0`, one every `spacing`
/// time units, integrated with classical Runge–Kutta substeps. The reference
/// is the origin.
pub fn trajectory_points(
    model: &SystemModel,
    x0: &DVector<f64>,
    t0: f64,
    spacing: f64,
    count: usize,
) -> Result<Vec<SamplePoint>> {
    if !(spacing > 0.0) {
        return Err(Error::Config("trajectory spacing must be positive".into()));
    }
    let u = DVector::zeros(model.m);
    let f = |x: &DVector<f64>, t: f64| model.closed_drift(x, t, &u);
    let sub = 20;
    let h = spacing / sub as f64;
    let mut x = x0.clone();
    let mut t = t0;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Evaluation { what: "trajectory", abscissa: t });
        }
        out.push(SamplePoint { x: x.clone(), t, x_ref: DVector::zeros(model.n), u_ref: DVector::zeros(model.m) });
        for _ in 0..sub {
            let k1 = f(&x, t);
            let k2 = f(&(&x + &k1 * (h / 2.0)), t + h / 2.0);
            let k3 = f(&(&x + &k2 * (h / 2.0)), t + h / 2.0);
            let k4 = f(&(&x + &k3 * h), t + h);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            t += h;
        }
    }
    Ok(out)
}

/// Optimizer of one coupled SDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub mode: Mode,
    pub n: usize,
    pub m: usize,
    pub samples: usize,
    pub nu: f64,
    pub nu_c: f64,
    pub chi: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub l_m: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub objective: f64,
    pub bound: f64,
    pub constants: BoundConstants,
    /// Bound on the norm of the learned metric variable (`M` for control
    /// and basic modes, `W` for estimation).
    pub m_bar: f64,
    pub margin: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

/// Sampled states with their optimal metric variables.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSampleSet {
    pub summary: SampleSummary,
    pub points: Vec<SamplePoint>,
    pub wbar: Vec<DMatrix<f64>>,
}

impl MetricSampleSet {
    /// Contraction metric `M = ν W̄⁻¹` at every sample.
    pub fn metrics(&self) -> Vec<DMatrix<f64>> {
        self.wbar.iter().map(|w| recover_metric(w, self.summary.nu, self.summary.mode)).collect()
    }

    /// Matrix learned by the network: `M` for control, `W = W̄/ν` for
    /// estimation.
    pub fn targets(&self) -> Vec<DMatrix<f64>> {
        match self.summary.mode {
            Mode::Estimation => self.wbar.iter().map(|w| w / self.summary.nu).collect(),
            _ => self.metrics(),
        }
    }

    pub fn write(&self, csv: impl AsRef<Path>, meta: impl AsRef<Path>) -> Result<()> {
        let s = &self.summary;
        let mut f = std::io::BufWriter::new(std::fs::File::create(csv)?);
        let mut header = vec!["index".to_string(), "t".to_string()];
        header.extend((0..s.n).map(|i| format!("x{i}")));
        header.extend((0..s.n).map(|i| format!("x_ref{i}")));
        header.extend((0..s.m).map(|i| format!("u_ref{i}")));
        for i in 0..s.n {
            for j in i..s.n {
                header.push(format!("wbar{i}{j}"));
            }
        }
        writeln!(f, "{}", header.join(","))?;
        for (k, (p, w)) in self.points.iter().zip(&self.wbar).enumerate() {
            let mut row = vec![k.to_string(), format!("{:e}", p.t)];
            row.extend(p.x.iter().chain(&p.x_ref).chain(&p.u_ref).map(|v| format!("{v:e}")));
            row.extend(pack_sym(w).iter().map(|v| format!("{v:e}")));
            writeln!(f, "{}", row.join(","))?;
        }
        f.flush()?;
        std::fs::write(meta, serde_json::to_string_pretty(s)? + "\n")?;
        Ok(())
    }

    pub fn read(csv: impl AsRef<Path>, meta: impl AsRef<Path>) -> Result<Self> {
        let meta = meta.as_ref();
        let text = std::fs::read_to_string(meta)?;
        let summary: SampleSummary =
            serde_json::from_str(&text).map_err(|e| Error::Parse { path: meta.to_path_buf(), msg: e.to_string() })?;
        let csv = csv.as_ref();
        let bad = |msg: String| Error::Parse { path: csv.to_path_buf(), msg };
        let (n, m) = (summary.n, summary.m);
        let width = 2 + 2 * n + m + tri_len(n);
        let mut points = Vec::new();
        let mut wbar = Vec::new();
        for (ln, line) in BufReader::new(std::fs::File::open(csv)?).lines().enumerate().skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {e}", ln + 1)))?;
            if vals.len() != width {
                return Err(bad(format!("line {}: expected {width} columns", ln + 1)));
            }
            let v = &vals[1..];
            points.push(SamplePoint {
                t: v[0],
                x: DVector::from_column_slice(&v[1..1 + n]),
                x_ref: DVector::from_column_slice(&v[1 + n..1 + 2 * n]),
                u_ref: DVector::from_column_slice(&v[1 + 2 * n..1 + 2 * n + m]),
            });
            wbar.push(unpack_sym(n, &v[1 + 2 * n + m..]));
        }
        if points.len() != summary.samples {
            return Err(bad(format!("metadata lists {} samples, file has {}", summary.samples, points.len())));
        }
        Ok(Self { summary, points, wbar })
    }
}

/// `M = ν W̄⁻¹`. For estimation this is `W⁻¹` with `W = W̄/ν`.
pub fn recover_metric(wbar: &DMatrix<f64>, nu: f64, _mode: Mode) -> DMatrix<f64> {
    let inv = wbar
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(|| wbar.clone().try_inverse().unwrap_or_else(|| wbar.clone()));
    let m = inv * nu;
    (&m + m.transpose()) * 0.5
}

/// Result of one `(α, ε)` grid point.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleOutcome {
    Feasible(Box<MetricSampleSet>),
    Infeasible { status: SolveStatus, detail: String },
}

impl SampleOutcome {
    pub fn feasible(self) -> Option<MetricSampleSet> {
        match self {
            SampleOutcome::Feasible(s) => Some(*s),
            SampleOutcome::Infeasible { .. } => None,
        }
    }
}

/// The assembled SDP with the weights used.
#[derive(Debug, Clone)]
pub struct AssembledProblem {
    pub problem: LmiProblem,
    pub constants: BoundConstants,
    pub weights: (f64, f64, f64),
    /// `ν_c` does not enter any constraint.
    pub nu_c_unused: bool,
}

/// Builds the coupled SDP for one grid point.
pub fn assemble(
    config: &McvStemConfig,
    model: &SystemModel,
    points: &[SamplePoint],
    alpha: f64,
    eps: f64,
) -> Result<AssembledProblem> {
    config.validate()?;
    if points.is_empty() {
        return Err(Error::Config("no sample points".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("contraction rate must be positive, got {alpha}")));
    }
    let k = bound_constants(config.mode, &model.bounds, config.l_m, eps)?;
    let n = model.n;
    if let WdotMode::BackwardDifference { .. } = config.wdot {
        if points.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::Config(
                "backward-difference metric derivative needs time-ordered trajectory samples".into(),
            ));
        }
    }
    let mut layout = DecisionLayout::new(n, points.len());
    let q = config.quad_order;
    let wdot_of = |i: usize| WdotSpec { mode: config.wdot, previous: (i > 0).then(|| i - 1) };

    let per_sample: Vec<Vec<LmiBlock>> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<Vec<LmiBlock>> {
            let ctx = |e: Error| Error::Assembly(format!("sample {i}: {e}"));
            match config.mode {
                Mode::Control => {
                    let a = sdc_factorize(model, &p.x, &p.x_ref, &p.u_ref, p.t, q).map_err(ctx)?;
                    let b = (model.actuation)(&p.x, p.t);
                    build_control_blocks(&layout, &a.matrix, &b, alpha, k.alpha_1, wdot_of(i), i)
                }
                Mode::Estimation => {
                    let u0 = DVector::zeros(model.m);
                    let a = sdc_factorize(model, &p.x, &p.x_ref, &u0, p.t, q).map_err(ctx)?;
                    let c = sdc_measurement_factorize(model, &p.x_ref, &p.x, p.t, q).map_err(ctx)?;
                    let c_l = model.measurement_jacobian_at(&p.x, p.t).map_err(ctx)?;
                    build_estimation_blocks(
                        &layout,
                        &a.matrix,
                        &c.matrix,
                        &c_l,
                        alpha,
                        k.alpha_1,
                        k.alpha_2,
                        wdot_of(i),
                        i,
                    )
                }
                Mode::Basic => {
                    let f_x = model.closed_drift_jacobian(&p.x, p.t, &DVector::zeros(model.m)).map_err(ctx)?;
                    build_basic_contraction_blocks(&layout, &f_x, alpha, k.alpha_1, wdot_of(i), i)
                }
            }
        })
        .collect::<Result<_>>()?;

    let mut scalar = Vec::new();
    let nu_c_unused = config.mode != Mode::Estimation || k.alpha_2 == 0.0;
    if !nu_c_unused {
        scalar.extend(nu_cube_blocks(&mut layout));
        scalar.extend(scalar_bounds(layout.nu_c, "nu_c", 0.0, None));
    }
    let nu_unused = config.mode == Mode::Basic && k.alpha_1 == 0.0;
    if !nu_unused {
        scalar.extend(scalar_bounds(layout.nu, "nu", 0.0, None));
    }

    let (c1, c2) = match config.mode {
        Mode::Estimation => estimation_weights(k.c_1, k.c_2, alpha)?,
        _ => {
            let c1 = k.c_1 / (2.0 * alpha);
            (c1, config.nu_weight_ratio * c1)
        }
    };
    let mut c1 = config.weights.c1.unwrap_or(c1);
    let c2 = config.weights.c2.unwrap_or(c2);
    if c1 <= 0.0 {
        // A noise-free bound is zero for any χ; still pick the best-conditioned metric.
        c1 = 1.0;
    }
    let c3 = config.weights.c3;
    let mut effort = None;
    if c3 > 0.0 {
        let t_idx = layout.push_aux("effort_t");
        let weight: f64 = points
            .iter()
            .map(|p| {
                let b = (model.actuation)(&p.x, p.t);
                crate::dynamics::spectral_norm_dense(&b).powi(2) * (&p.x - &p.x_ref).norm_squared()
            })
            .sum();
        // t ≥ ν²  ⟺  [[t, ν], [ν, 1]] ⪰ 0
        let mut blk = LmiBlock::new("effort_epigraph", 2);
        blk.constant = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -1.0]);
        blk.add_term(t_idx, DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.0]));
        blk.add_term(layout.nu, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]));
        scalar.push(blk);
        effort = Some((t_idx, weight));
    }

    let mut problem = LmiProblem::new(layout);
    problem.extend(per_sample.into_iter().flatten());
    problem.extend(scalar);
    problem.objective[problem.layout.chi] = c1;
    problem.objective[problem.layout.nu] = c2;
    if let Some((t_idx, weight)) = effort {
        problem.objective[t_idx] = c3 * weight;
    }
    if nu_c_unused {
        problem.fix(problem.layout.nu_c, 0.0);
    }
    if nu_unused {
        problem.fix(problem.layout.nu, 1.0);
    }
    Ok(AssembledProblem { problem, constants: k, weights: (c1, c2, c3), nu_c_unused })
}

/// Solves the coupled SDP at one `(α, ε)`.
pub fn sample_metrics(
    config: &McvStemConfig,
    model: &SystemModel,
    points: &[SamplePoint],
    alpha: f64,
    eps: f64,
) -> Result<SampleOutcome> {
    if let Some(size) = config.chunk_size {
        if size < points.len() {
            return sample_chunked(config, model, points, alpha, eps, size);
        }
    }
    let asm = assemble(config, model, points, alpha, eps)?;
    let report = solve(&asm.problem, &config.solver)
        .map_err(|e| Error::Solver(format!("grid point (alpha={alpha}, eps={eps}): {e}")))?;
    if !report.status.is_solved() {
        return Ok(SampleOutcome::Infeasible {
            status: report.status,
            detail: format!("solver status {:?} after {} iterations", report.status, report.iterations),
        });
    }
    let layout = &asm.problem.layout;
    let y = &report.y;
    let (nu, chi) = (y[layout.nu], y[layout.chi]);
    let nu_c = if asm.nu_c_unused { nu.powi(3) } else { y[layout.nu_c] };
    let wbar: Vec<DMatrix<f64>> = (0..points.len()).map(|i| layout.wbar(y, i)).collect();
    Ok(SampleOutcome::Feasible(Box::new(finish(
        config,
        model,
        points.to_vec(),
        wbar,
        (nu, nu_c, chi),
        &asm,
        alpha,
        eps,
        report.margin,
        report.iterations,
        report.status,
    ))))
}

#[allow(clippy::too_many_arguments)]
fn finish(
    config: &McvStemConfig,
    model: &SystemModel,
    points: Vec<SamplePoint>,
    wbar: Vec<DMatrix<f64>>,
    (nu, nu_c, chi): (f64, f64, f64),
    asm: &AssembledProblem,
    alpha: f64,
    eps: f64,
    margin: f64,
    iterations: usize,
    status: SolveStatus,
) -> MetricSampleSet {
    let (c1, c2, c3) = asm.weights;
    let objective = asm
        .problem
        .objective
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let l = &asm.problem.layout;
            if i == l.chi {
                c * chi
            } else if i == l.nu {
                c * nu
            } else if l.aux_index("effort_t") == Some(i) {
                c * nu * nu
            } else {
                0.0
            }
        })
        .sum();
    let mut set = MetricSampleSet {
        summary: SampleSummary {
            mode: config.mode,
            n: model.n,
            m: model.m,
            samples: points.len(),
            nu,
            nu_c,
            chi,
            alpha,
            epsilon: eps,
            l_m: config.l_m,
            c1,
            c2,
            c3,
            objective,
            bound: steady_state_bound(config.mode, &asm.constants, nu, chi, alpha),
            constants: asm.constants,
            m_bar: 0.0,
            margin,
            iterations,
            status,
        },
        points,
        wbar,
    };
    set.summary.m_bar = match config.mode {
        Mode::Estimation => chi / nu,
        _ => nu,
    };
    set
}

fn sample_chunked(
    config: &McvStemConfig,
    model: &SystemModel,
    points: &[SamplePoint],
    alpha: f64,
    eps: f64,
    size: usize,
) -> Result<SampleOutcome> {
    let single = McvStemConfig { chunk_size: None, ..config.clone() };
    let mut wbar = Vec::with_capacity(points.len());
    let (mut nu, mut chi) = (0.0f64, 1.0f64);
    for chunk in points.chunks(size) {
        match sample_metrics(&single, model, chunk, alpha, eps)? {
            SampleOutcome::Feasible(s) => {
                nu = nu.max(s.summary.nu);
                chi = chi.max(s.summary.chi);
                wbar.extend(s.wbar);
            }
            other => return Ok(other),
        }
    }
    let asm = assemble(&single, model, points, alpha, eps)?;
    let layout = &asm.problem.layout;
    let nu_c = nu.powi(3);
    let mut y = layout.pack(&wbar, nu, nu_c, chi);
    if let Some(s) = layout.aux_index("nu_cube_s") {
        y[s] = nu * nu;
    }
    if let Some(t) = layout.aux_index("effort_t") {
        y[t] = nu * nu;
    }
    let check = check_feasibility(&asm.problem, &y, 1e-8)?;
    if !check.feasible {
        return Ok(SampleOutcome::Infeasible {
            status: SolveStatus::NumericalFailure,
            detail: format!(
                "chunked solution violates {} by {:.3e} after merging (nu, chi)",
                check.worst_block.unwrap_or_default(),
                check.worst
            ),
        });
    }
    Ok(SampleOutcome::Feasible(Box::new(finish(
        config,
        model,
        points.to_vec(),
        wbar,
        (nu, nu_c, chi),
        &asm,
        alpha,
        eps,
        check.worst,
        0,
        SolveStatus::Optimal,
    ))))
}

/// One grid point of the line search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub epsilon: f64,
    pub feasible: bool,
    pub status: SolveStatus,
    pub objective: f64,
    pub bound: f64,
    pub nu: f64,
    pub chi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchResult {
    pub alpha: f64,
    pub epsilon: f64,
    pub samples: MetricSampleSet,
    /// Every grid point, α-major.
    pub surface: Vec<GridPoint>,
}

impl LineSearchResult {
    pub fn write_surface(&self, path: impl AsRef<Path>) -> Result<()> {
        write_surface(&self.surface, path)
    }

    /// Whether the argmin lies strictly inside the grid in both directions.
    pub fn argmin_is_interior(&self) -> bool {
        let alphas = unique_sorted(self.surface.iter().map(|g| g.alpha));
        let eps = unique_sorted(self.surface.iter().map(|g| g.epsilon));
        let interior = |v: &[f64], x: f64| v.len() >= 3 && x > v[0] && x < v[v.len() - 1];
        interior(&alphas, self.alpha) && interior(&eps, self.epsilon)
    }
}

fn unique_sorted(it: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = it.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

pub fn write_surface(surface: &[GridPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "alpha,epsilon,feasible,status,objective,bound,nu,chi")?;
    for g in surface {
        writeln!(
            f,
            "{:e},{:e},{},{:?},{:e},{:e},{:e},{:e}",
            g.alpha, g.epsilon, g.feasible as u8, g.status, g.objective, g.bound, g.nu, g.chi
        )?;
    }
    Ok(())
}

/// Solves every grid point in parallel and returns the feasible argmin of
/// the objective; ties go to the lexicographically smallest `(α, ε)`.
pub fn line_search(config: &McvStemConfig, model: &SystemModel, points: &[SamplePoint]) -> Result<LineSearchResult> {
    config.validate()?;
    let mut grid: Vec<(f64, f64)> =
        config.alphas.iter().flat_map(|a| config.epsilons.iter().map(move |e| (*a, *e))).collect();
    grid.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
    grid.dedup();
    let outcomes: Vec<SampleOutcome> =
        grid.par_iter().map(|&(a, e)| sample_metrics(config, model, points, a, e)).collect::<Result<_>>()?;

    let mut surface = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64)> = None;
    for (k, (&(alpha, epsilon), out)) in grid.iter().zip(&outcomes).enumerate() {
        let g = match out {
            SampleOutcome::Feasible(s) => {
                let j = s.summary.objective;
                if best.is_none_or(|(_, b)| j < b) {
                    best = Some((k, j));
                }
                GridPoint {
                    alpha,
                    epsilon,
                    feasible: true,
                    status: s.summary.status,
                    objective: j,
                    bound: s.summary.bound,
                    nu: s.summary.nu,
                    chi: s.summary.chi,
                }
            }
            SampleOutcome::Infeasible { status, .. } => GridPoint {
                alpha,
                epsilon,
                feasible: false,
                status: *status,
                objective: f64::NAN,
                bound: f64::NAN,
                nu: f64::NAN,
                chi: f64::NAN,
            },
        };
        surface.push(g);
    }
    let (k, _) = best.ok_or(Error::NoFeasibleMetric)?;
    let samples = outcomes.into_iter().nth(k).and_then(SampleOutcome::feasible).expect("feasible argmin");
    Ok(LineSearchResult { alpha: grid[k].0, epsilon: grid[k].1, samples, surface })
}

/// Guess of `L_m` from a deterministic pre-pass: samples with `L_m = 0`,
/// fits local linear models of the learned matrix around every sample,
/// and returns twice the largest difference quotient of those gradients.
pub fn estimate_lipschitz_prepass(config: &McvStemConfig, model: &SystemModel, points: &[SamplePoint]) -> Result<f64> {
    let det = McvStemConfig { l_m: 0.0, ..config.clone() };
    let result = line_search(&det, model, points)?;
    Ok(2.0 * derivative_lipschitz(&result.samples))
}

/// Largest `‖∂X/∂xₖ(xᵢ) − ∂X/∂xₖ(xⱼ)‖ / ‖xᵢ − xⱼ‖` over neighbouring samples,
/// with gradients from least-squares fits over nearest neighbours.
pub fn derivative_lipschitz(set: &MetricSampleSet) -> f64 {
    let n = set.summary.n;
    let targets = set.targets();
    let xs: Vec<&DVector<f64>> = set.points.iter().map(|p| &p.x).collect();
    let neighbours = 2 * n + 2;
    if xs.len() <= neighbours {
        return 0.0;
    }
    let knn = |i: usize| -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = (0..xs.len()).filter(|&j| j != i).map(|j| ((xs[j] - xs[i]).norm(), j)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(neighbours).map(|(_, j)| j).collect()
    };
    let gradients: Vec<Option<Vec<DMatrix<f64>>>> = (0..xs.len())
        .into_par_iter()
        .map(|i| {
            let nb = knn(i);
            let mut a = DMatrix::zeros(nb.len(), n + 1);
            for (r, &j) in nb.iter().enumerate() {
                a[(r, 0)] = 1.0;
                for c in 0..n {
                    a[(r, c + 1)] = xs[j][c] - xs[i][c];
                }
            }
            let svd = a.svd(true, true);
            let mut grads = vec![DMatrix::zeros(n, n); n];
            for (r_idx, c_idx) in crate::linalg::upper_tri_indices(n) {
                let rhs = DVector::from_iterator(nb.len(), nb.iter().map(|&j| targets[j][(r_idx, c_idx)]));
                let sol = svd.solve(&rhs, 1e-12).ok()?;
                for k in 0..n {
                    grads[k][(r_idx, c_idx)] = sol[k + 1];
                    grads[k][(c_idx, r_idx)] = sol[k + 1];
                }
            }
            Some(grads)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for i in 0..xs.len() {
        let Some(gi) = &gradients[i] else { continue };
        for j in knn(i) {
            let Some(gj) = &gradients[j] else { continue };
            let dist = (xs[i] - xs[j]).norm();
            if dist <= 1e-12 {
                continue;
            }
            for k in 0..n {
                let d = &gi[k] - &gj[k];
                worst = worst.max(max_eig(&d).abs().max(min_eig(&d).abs()) / dist);
            }
        }
    }
    worst
}

/// Re-assembles the SDP of a stored sample set at its `(α, ε)` and
/// evaluates every constraint at the stored optimizer.
pub fn check_sample_set(
    config: &McvStemConfig,
    model: &SystemModel,
    set: &MetricSampleSet,
    tol: f64,
) -> Result<crate::sdp::FeasibilityReport> {
    let cfg = McvStemConfig { mode: set.summary.mode, l_m: set.summary.l_m, chunk_size: None, ..config.clone() };
    let asm = assemble(&cfg, model, &set.points, set.summary.alpha, set.summary.epsilon)?;
    let layout = &asm.problem.layout;
    let s = &set.summary;
    let nu_c = if asm.nu_c_unused { 0.0 } else { s.nu_c };
    let mut y = layout.pack(&set.wbar, s.nu, nu_c, s.chi);
    for (index, value) in &asm.problem.fixed {
        y[*index] = *value;
    }
    // Auxiliary epigraph variables at their tightest values.
    for name in ["nu_cube_s", "effort_t"] {
        if let Some(i) = layout.aux_index(name) {
            y[i] = s.nu * s.nu;
        }
    }
    check_feasibility(&asm.problem, &y, tol)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::NoiseBounds;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn bounds(g_c: f64, g_e: f64, d_bar: f64, c_bar: f64) -> NoiseBounds {
        NoiseBounds { g_c, g_e, d_bar, c_bar }
    }

    #[test]
    fn constants_by_substitution() {
        let k = bound_constants(Mode::Control, &bounds(0.06 * 2f64.sqrt(), 0.0, 0.0, 0.0), 10.0, 1.0).unwrap();
        assert_relative_eq!(k.alpha_1, 0.108, epsilon = 1e-12);
        let k = bound_constants(Mode::Estimation, &bounds(0.0, 0.03 * 2f64.sqrt(), 0.0, 0.0), 0.5, 3.3).unwrap();
        assert_relative_eq!(k.alpha_1, 3.42e-3, epsilon = 1e-12);
        let k = bound_constants(Mode::Control, &bounds(1.0, 0.0, 0.0, 0.0), 0.0, 2.0).unwrap();
        assert_eq!(k.alpha_1, 0.0);
        assert_relative_eq!(k.c_1, 2.0);
        assert!(matches!(bound_constants(Mode::Control, &bounds(1.0, 0.0, 0.0, 0.0), 1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn weights_and_bounds() {
        let (c1, c2) = estimation_weights(3.0, 0.0, 0.5).unwrap();
        assert_relative_eq!(c1, 3.0, epsilon = 1e-12);
        assert_eq!(c2, 0.0);
        assert!(estimation_weights(1.0, 1.0, 0.0).is_err());
        let k = BoundConstants { alpha_1: 0.0, alpha_2: 0.0, c_1: 2.0, c_2: 5.0 };
        assert_relative_eq!(steady_state_bound(Mode::Control, &k, 3.0, 1.0, 1.0), 1.0);
        assert_relative_eq!(steady_state_bound(Mode::Estimation, &k, 0.0, 1.0, 1.0), 1.0);
    }

    #[test]
    fn recovered_metrics() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_relative_eq!(recover_metric(&i2, 2.0, Mode::Control), &i2 * 2.0);
        assert_relative_eq!(recover_metric(&i2, 2.0, Mode::Estimation), &i2 * 2.0);
    }

    #[test]
    fn scalar_stable_system_gives_unit_metric() {
        let model = SystemModel::new("decay", 1, |x, _| -x);
        let points = vec![SamplePoint { x: dvector![0.5], t: 0.0, x_ref: dvector![0.0], u_ref: dvector![0.0] }];
        let cfg = McvStemConfig { mode: Mode::Basic, ..Default::default() };
        let s = sample_metrics(&cfg, &model, &points, 0.5, 1.0).unwrap().feasible().unwrap();
        assert_relative_eq!(s.summary.chi, 1.0, epsilon = 1e-6);
        assert_relative_eq!(s.metrics()[0][(0, 0)], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn expanding_system_is_infeasible() {
        let model = SystemModel::new("grow", 2, |x, _| x.clone());
        let points =
            vec![SamplePoint { x: dvector![0.5, 0.1], t: 0.0, x_ref: dvector![0.0, 0.0], u_ref: dvector![0.0] }];
        let cfg = McvStemConfig { mode: Mode::Basic, ..Default::default() };
        let out = sample_metrics(&cfg, &model, &points, 0.5, 1.0).unwrap();
        assert!(matches!(out, SampleOutcome::Infeasible { status: SolveStatus::Infeasible, .. }));
    }

    #[test]
    fn log_space_endpoints() {
        let v = log_space(0.01, 10.0, 10);
        assert_relative_eq!(v[0], 0.01, epsilon = 1e-15);
        assert_relative_eq!(v[9], 10.0, epsilon = 1e-12);
    }
}
