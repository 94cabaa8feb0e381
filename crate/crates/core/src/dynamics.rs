//! Stochastic nonlinear system models and generalized state-dependent
//! coefficient (SDC) factorizations built from the line integral of the
//! Jacobian along the segment between two states.

pub mod rocket;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::gauss_legendre01;

pub use rocket::{rocket_benchmark, RocketConfig};

/// `(state, time) -> vector`.
pub type VectorMap = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
/// `(state, time) -> matrix`.
pub type MatrixMap = Arc<dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>;
/// `(state, time, input) -> ∂(f + B u)/∂x`.
/// Path parameters `c ∈ (0, 1)` on the segment `x_ref + c (x − x_ref)`
/// where the Jacobians lose smoothness.
pub type KinkMap = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> Vec<f64> + Send + Sync>;
pub type ClosedJacobian = Arc<dyn Fn(&DVector<f64>, f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Norm bounds on the noise and measurement maps.
///
/// `g_c`, `g_e` and `d_bar` bound Frobenius norms of the control diffusion,
/// estimation diffusion and measurement noise; `c_bar` bounds the 2-norm of
/// the measurement SDC matrix over all state pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseBounds {
    pub g_c: f64,
    pub g_e: f64,
    pub d_bar: f64,
    pub c_bar: f64,
}

/// A stochastic system
///
/// ```text
/// dx   = (f(x,t) + B(x,t) u) dt + G(x,t) dW
/// y dt = h(x,t) dt + D(x,t) dW₂
/// ```
///
/// with separate diffusion maps for the control and estimation settings.
#[derive(Clone)]
pub struct SystemModel {
    pub name: String,
    /// State dimension.
    pub n: usize,
    /// Input dimension.
    pub m: usize,
    /// Measurement dimension.
    pub p: usize,
    pub drift: VectorMap,
    pub actuation: MatrixMap,
    pub control_diffusion: MatrixMap,
    pub estimation_diffusion: MatrixMap,
    pub measurement: VectorMap,
    pub measurement_noise: MatrixMap,
    pub closed_jacobian: Option<ClosedJacobian>,
    pub measurement_jacobian: Option<MatrixMap>,
    /// Quadrature breakpoints for piecewise-smooth Jacobians.
    pub kinks: Option<KinkMap>,
    pub bounds: NoiseBounds,
    /// Whether the maps depend on time.
    pub time_varying: bool,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("p", &self.p)
            .field("bounds", &self.bounds)
            .field("time_varying", &self.time_varying)
            .finish_non_exhaustive()
    }
}

impl SystemModel {
    /// Autonomous model with the given drift. Actuation, noise and
    /// measurement default to zero input, zero noise and full-state output.
    pub fn new(
        name: impl Into<String>,
        n: usize,
        drift: impl Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            n,
            m: 1,
            p: n,
            drift: Arc::new(drift),
            actuation: Arc::new(move |_, _| DMatrix::zeros(n, 1)),
            control_diffusion: Arc::new(move |_, _| DMatrix::zeros(n, n)),
            estimation_diffusion: Arc::new(move |_, _| DMatrix::zeros(n, n)),
            measurement: Arc::new(|x, _| x.clone()),
            measurement_noise: Arc::new(move |_, _| DMatrix::zeros(n, n)),
            closed_jacobian: None,
            measurement_jacobian: None,
            kinks: None,
            bounds: NoiseBounds::default(),
            time_varying: false,
        }
    }

    /// Linear time-invariant model `dx = (A x + B u) dt + G dW`, `y = C x`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>) -> Self {
        let n = a.nrows();
        let a_drift = a.clone();
        let a_jac = a.clone();
        let b_act = b.clone();
        let mut model = Self::new("linear", n, move |x, _| &a_drift * x)
            .with_actuation(b.ncols(), move |_, _| b_act.clone())
            .with_closed_jacobian(move |_, _, _| a_jac.clone());
        let gf = g.norm();
        let (gc, ge) = (g.clone(), g);
        model.control_diffusion = Arc::new(move |_, _| gc.clone());
        model.estimation_diffusion = Arc::new(move |_, _| ge.clone());
        model.bounds.g_c = gf;
        model.bounds.g_e = gf;
        model.measurement_jacobian = Some(Arc::new(move |_, _| DMatrix::identity(n, n)));
        model.bounds.c_bar = 1.0;
        model
    }

    pub fn with_actuation(
        mut self,
        m: usize,
        b: impl Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.m = m;
        self.actuation = Arc::new(b);
        self
    }

    pub fn with_control_diffusion(
        mut self,
        g: impl Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.control_diffusion = Arc::new(g);
        self
    }

    pub fn with_estimation_diffusion(
        mut self,
        g: impl Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.estimation_diffusion = Arc::new(g);
        self
    }

    pub fn with_measurement(
        mut self,
        p: usize,
        h: impl Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
        d: impl Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.p = p;
        self.measurement = Arc::new(h);
        self.measurement_noise = Arc::new(d);
        self.measurement_jacobian = None;
        self
    }

    pub fn with_closed_jacobian(
        mut self,
        j: impl Fn(&DVector<f64>, f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.closed_jacobian = Some(Arc::new(j));
        self
    }

    pub fn with_kinks(mut self, k: impl Fn(&DVector<f64>, &DVector<f64>) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.kinks = Some(Arc::new(k));
        self
    }

    pub fn with_measurement_jacobian(
        mut self,
        j: impl Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.measurement_jacobian = Some(Arc::new(j));
        self
    }

    pub fn with_bounds(mut self, bounds: NoiseBounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn time_varying(mut self, yes: bool) -> Self {
        self.time_varying = yes;
        self
    }

    /// `f(x,t) + B(x,t) u`.
    pub fn closed_drift(&self, x: &DVector<f64>, t: f64, u: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x, t) + (self.actuation)(x, t) * u
    }

    /// `∂(f + B u)/∂x`, analytic when available.
    pub fn closed_drift_jacobian(&self, x: &DVector<f64>, t: f64, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        match &self.closed_jacobian {
            Some(j) => finite_matrix(j(x, t, u), "drift Jacobian"),
            None => jacobian(|q, t| self.closed_drift(q, t, u), x, t),
        }
    }

    pub fn measurement_jacobian_at(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        match &self.measurement_jacobian {
            Some(j) => finite_matrix(j(x, t), "measurement Jacobian"),
            None => jacobian(|q, t| (self.measurement)(q, t), x, t),
        }
    }

    /// Checks by sampling that the declared noise bounds dominate the
    /// sampled Frobenius norms of the diffusion maps and the 2-norm of the
    /// measurement SDC matrix.
    pub fn check_bounds<R: Rng>(&self, domain: &StateBox, samples: usize, rng: &mut R) -> Result<()> {
        let slack = 1.0 + 1e-9;
        for _ in 0..samples {
            let x = domain.sample_state(rng);
            let t = domain.sample_time(rng);
            let checks = [
                ("g_c", (self.control_diffusion)(&x, t).norm(), self.bounds.g_c),
                ("g_e", (self.estimation_diffusion)(&x, t).norm(), self.bounds.g_e),
                ("d_bar", (self.measurement_noise)(&x, t).norm(), self.bounds.d_bar),
            ];
            for (name, value, bound) in checks {
                if !value.is_finite() || value > bound * slack + 1e-12 {
                    return Err(Error::Config(format!("{name} = {bound} does not dominate sampled norm {value}")));
                }
            }
            let xhat = domain.sample_state(rng);
            let c = sdc_measurement_factorize(self, &x, &xhat, t, DEFAULT_QUAD_ORDER)?;
            let cn = spectral_norm_dense(&c.matrix);
            if cn > self.bounds.c_bar * slack + 1e-12 {
                return Err(Error::Config(format!(
                    "c_bar = {} does not dominate sampled norm {cn}",
                    self.bounds.c_bar
                )));
            }
        }
        Ok(())
    }
}

/// Largest singular value via a dense SVD.
pub fn spectral_norm_dense(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.iter().copied().fold(0.0, f64::max)
}

/// Estimates `c_bar` by sampling state pairs over the box and inflating the
/// observed maximum of `‖C(x, x̂, t)‖` by 10 %.
pub fn estimate_c_bar<R: Rng>(model: &SystemModel, domain: &StateBox, pairs: usize, rng: &mut R) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let x = domain.sample_state(rng);
        let xhat = domain.sample_state(rng);
        let t = domain.sample_time(rng);
        let c = sdc_measurement_factorize(model, &x, &xhat, t, DEFAULT_QUAD_ORDER)?;
        worst = worst.max(spectral_norm_dense(&c.matrix));
    }
    Ok(1.1 * worst)
}

/// Axis-aligned box of states with an optional time interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default)]
    pub time: Option<[f64; 2]>,
}

impl StateBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper, time: None };
        b.validate()?;
        Ok(b)
    }

    pub fn with_time(mut self, t0: f64, t1: f64) -> Result<Self> {
        if t0 > t1 {
            return Err(Error::Config(format!("time interval [{t0}, {t1}] is empty")));
        }
        self.time = Some([t0, t1]);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::Dimension(format!(
                "box bounds have lengths {} and {}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo <= hi) {
                return Err(Error::Config(format!("box coordinate {i}: {lo} > {hi}")));
            }
        }
        if let Some([t0, t1]) = self.time {
            if !(t0 <= t1) {
                return Err(Error::Config(format!("time interval [{t0}, {t1}] is empty")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    pub fn sample_state<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower.iter().zip(&self.upper).map(|(lo, hi)| if lo == hi { *lo } else { rng.random_range(*lo..=*hi) }),
        )
    }

    pub fn sample_time<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.time {
            Some([t0, t1]) if t1 > t0 => rng.random_range(t0..=t1),
            Some([t0, _]) => t0,
            None => 0.0,
        }
    }

    /// Half-widths of the box, used to scale network inputs.
    pub fn half_widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| 0.5 * (hi - lo)).collect()
    }
}

pub const DEFAULT_QUAD_ORDER: usize = 10;

/// Quadrature controls for SDC line integrals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdcOptions {
    /// Gauss–Legendre order per panel.
    pub quad_order: usize,
    /// Relative residual accepted without refinement.
    pub tol: f64,
    /// Maximum bisection depth for adaptive refinement.
    pub max_depth: usize,
    /// Cap on bisected panels; noisy Jacobians never meet `tol`.
    pub max_panels: usize,
}

impl SdcOptions {
    /// Default options, with `tol` loosened to the noise floor of central
    /// differences when the Jacobian is not analytic.
    pub fn for_order(quad_order: usize, analytic_jacobian: bool) -> Self {
        Self { quad_order, tol: if analytic_jacobian { 1e-12 } else { FD_SDC_TOL }, ..Self::default() }
    }
}

/// Residual reachable with a central-difference Jacobian; roundoff in the
/// difference quotient is around `1e-10 |f|`.
pub const FD_SDC_TOL: f64 = 1e-9;

impl Default for SdcOptions {
    fn default() -> Self {
        Self { quad_order: DEFAULT_QUAD_ORDER, tol: 1e-12, max_depth: 48, max_panels: 4096 }
    }
}

/// An SDC matrix together with the residual of its defining identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SdcResult {
    pub matrix: DMatrix<f64>,
    /// `‖A (x − x_ref) − (f̄(x) − f̄(x_ref))‖`.
    pub residual: f64,
    /// `‖f̄(x) − f̄(x_ref)‖`.
    pub difference_norm: f64,
}

impl SdcResult {
    pub fn relative_residual(&self) -> f64 {
        self.residual / (1.0 + self.difference_norm)
    }
}

/// SDC matrix `A` with `A (x − x_d) = f̄(x) − f̄(x_d)`, `f̄ = f + B u_d`,
/// computed as the line integral of `∂f̄/∂x` over the segment.
pub fn sdc_factorize(
    model: &SystemModel,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
    t: f64,
    quad_order: usize,
) -> Result<SdcResult> {
    let opts = SdcOptions::for_order(quad_order, model.closed_jacobian.is_some());
    sdc_factorize_with(model, x, x_d, u_d, t, &opts)
}

pub fn sdc_factorize_with(
    model: &SystemModel,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
    t: f64,
    opts: &SdcOptions,
) -> Result<SdcResult> {
    check_dim(x, model.n, "x")?;
    check_dim(x_d, model.n, "x_d")?;
    check_dim(u_d, model.m, "u_d")?;
    line_integral(
        |q| model.closed_drift(q, t, u_d),
        |q| model.closed_drift_jacobian(q, t, u_d),
        x,
        x_d,
        &breaks(model, x, x_d),
        opts,
        "drift Jacobian",
    )
}

/// Measurement SDC matrix `C` with `C (x − x̂) = h(x) − h(x̂)`.
/// With `x == xhat` this is the Jacobian of `h` at `x̂`.
pub fn sdc_measurement_factorize(
    model: &SystemModel,
    x: &DVector<f64>,
    xhat: &DVector<f64>,
    t: f64,
    quad_order: usize,
) -> Result<SdcResult> {
    check_dim(x, model.n, "x")?;
    check_dim(xhat, model.n, "xhat")?;
    let opts = SdcOptions::for_order(quad_order, model.measurement_jacobian.is_some());
    line_integral(
        |q| (model.measurement)(q, t),
        |q| model.measurement_jacobian_at(q, t),
        x,
        xhat,
        &breaks(model, x, xhat),
        &opts,
        "measurement Jacobian",
    )
}

/// `0`, the model's kinks inside the segment, `1`.
fn breaks(model: &SystemModel, x: &DVector<f64>, x_ref: &DVector<f64>) -> Vec<f64> {
    let mut b = vec![0.0];
    if let Some(k) = &model.kinks {
        let mut inner: Vec<f64> = k(x, x_ref).into_iter().filter(|c| *c > 0.0 && *c < 1.0).collect();
        inner.sort_by(f64::total_cmp);
        inner.dedup();
        b.extend(inner);
    }
    b.push(1.0);
    b
}

fn check_dim(v: &DVector<f64>, n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::Dimension(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(())
}

fn finite_matrix(m: DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(m)
    } else {
        Err(Error::Evaluation { what, abscissa: f64::NAN })
    }
}

fn line_integral<F, J>(
    map: F,
    jac: J,
    x: &DVector<f64>,
    x_ref: &DVector<f64>,
    breaks: &[f64],
    opts: &SdcOptions,
    what: &'static str,
) -> Result<SdcResult>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    if opts.quad_order == 0 {
        return Err(Error::Config("quadrature order must be at least 1".into()));
    }
    let delta = x - x_ref;
    let target = map(x) - map(x_ref);
    if !target.iter().all(|v| v.is_finite()) {
        return Err(Error::Evaluation { what, abscissa: f64::NAN });
    }
    let diff_norm = target.norm();

    if delta.iter().all(|v| *v == 0.0) {
        let a = jac(x).map_err(|_| Error::Evaluation { what, abscissa: 0.0 })?;
        return Ok(SdcResult { matrix: a, residual: 0.0, difference_norm: diff_norm });
    }

    let (nodes, weights) = gauss_legendre01(opts.quad_order);
    let eval = |c: f64| -> Result<DMatrix<f64>> {
        let q = x * c + x_ref * (1.0 - c);
        jac(&q).map_err(|_| Error::Evaluation { what, abscissa: c })
    };
    let panel = |a: f64, b: f64| -> Result<DMatrix<f64>> {
        let mut acc: Option<DMatrix<f64>> = None;
        for (c, w) in nodes.iter().zip(&weights) {
            let j = eval(a + (b - a) * c)? * (w * (b - a));
            acc = Some(match acc {
                Some(s) => s + j,
                None => j,
            });
        }
        Ok(acc.expect("at least one node"))
    };

    let residual_of = |a: &DMatrix<f64>| (a * &delta - &target).norm();
    let pieces = breaks.windows(2).map(|w| Ok((w[0], w[1], panel(w[0], w[1])?))).collect::<Result<Vec<_>>>()?;
    let mut a = pieces.iter().skip(1).fold(pieces[0].2.clone(), |s, p| s + &p.2);
    let mut residual = residual_of(&a);

    if residual > opts.tol * (1.0 + diff_norm) {
        // Adaptive bisection; panels whose halves agree are accepted.
        let local_tol = opts.tol * (1.0 + diff_norm) / (1.0 + delta.norm());
        let mut stack: Vec<_> = pieces.into_iter().rev().map(|(lo, hi, p)| (lo, hi, p, 0usize)).collect();
        let mut total: Option<DMatrix<f64>> = None;
        let mut budget = opts.max_panels;
        while let Some((lo, hi, whole, depth)) = stack.pop() {
            budget = budget.saturating_sub(1);
            let mid = 0.5 * (lo + hi);
            let left = panel(lo, mid)?;
            let right = panel(mid, hi)?;
            let halves = &left + &right;
            let err = (&halves - &whole).norm();
            if err <= local_tol * (hi - lo) || depth >= opts.max_depth || budget == 0 {
                total = Some(match total {
                    Some(s) => s + halves,
                    None => halves,
                });
            } else {
                stack.push((mid, hi, right, depth + 1));
                stack.push((lo, mid, left, depth + 1));
            }
        }
        let refined = total.expect("nonempty panel set");
        let refined_residual = residual_of(&refined);
        if refined_residual < residual {
            a = refined;
            residual = refined_residual;
        }
    }

    Ok(SdcResult { matrix: a, residual, difference_norm: diff_norm })
}

/// Central finite-difference Jacobian with step `1e-6 (1 + |x_i|)`.
pub fn jacobian<F>(map: F, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>, f64) -> DVector<f64>,
{
    let f0 = map(x, t);
    if !f0.iter().all(|v| v.is_finite()) {
        return Err(Error::Evaluation { what: "map", abscissa: 0.0 });
    }
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = 1e-6 * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = map(&xp, t);
        xp[i] = x[i] - h;
        let fm = map(&xp, t);
        xp[i] = x[i];
        let col = (fp - fm) / (2.0 * h);
        if !col.iter().all(|v| v.is_finite()) {
            return Err(Error::Evaluation { what: "finite-difference Jacobian", abscissa: i as f64 });
        }
        jac.set_column(i, &col);
    }
    Ok(jac)
}
