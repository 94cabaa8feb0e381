//! Euler–Maruyama simulation of the closed loops and observers, with
//! Monte-Carlo comparison of metric-based policies against the EKF and
//! SDRE baselines over common random numbers.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{sdc_factorize, sdc_measurement_factorize, StateBox, SystemModel, DEFAULT_QUAD_ORDER};
use crate::error::{Error, Result};
use crate::linalg::{solve_care, sym};
use crate::mcvstem::{MetricSampleSet, Mode};
use crate::nn::{predict_metric, SnMlp};
use crate::seed::stream;

/// States whose norm exceeds this are treated as diverged.
pub const BLOW_UP: f64 = 1e6;

/// Which diffusion map drives the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diffusion {
    Control,
    Estimation,
}

/// One simulated sample path on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SdePath {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Input applied on `[t_k, t_{k+1})`.
    pub inputs: Vec<DVector<f64>>,
    /// `y_k = h(x_k) + D ξ′_k/√Δt`; empty unless measured.
    pub measurements: Vec<DVector<f64>>,
    pub seed: u64,
    /// Time at which the state left the blow-up guard.
    pub diverged_at: Option<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn blown_up(x: &DVector<f64>) -> bool {
    !x.iter().all(|v| v.is_finite()) || x.norm() > BLOW_UP
}

/// Simulates `dx = (f + B u) dt + G dW` from `x0` with the feedback `policy`.
#[allow(clippy::too_many_arguments)]
pub fn euler_maruyama(
    model: &SystemModel,
    diffusion: Diffusion,
    x0: &DVector<f64>,
    t0: f64,
    horizon: f64,
    dt: f64,
    seed: u64,
    measure: bool,
    mut policy: impl FnMut(&DVector<f64>, f64) -> DVector<f64>,
) -> Result<SdePath> {
    if !(dt > 0.0) || !(horizon >= 0.0) {
        return Err(Error::Config(format!("need dt > 0 and horizon >= 0, got dt = {dt}, horizon = {horizon}")));
    }
    if x0.len() != model.n {
        return Err(Error::Dimension(format!("initial state has length {}, model has n = {}", x0.len(), model.n)));
    }
    let steps = (horizon / dt).round() as usize;
    let mut process = stream(seed, "process", 0);
    let mut sensor = stream(seed, "measurement", 0);
    let g_map = match diffusion {
        Diffusion::Control => &model.control_diffusion,
        Diffusion::Estimation => &model.estimation_diffusion,
    };
    let sqrt_dt = dt.sqrt();
    let mut path = SdePath {
        dt,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps),
        measurements: Vec::new(),
        seed,
        diverged_at: None,
    };
    let mut x = x0.clone();
    for k in 0..=steps {
        let t = t0 + k as f64 * dt;
        if measure {
            let d = (model.measurement_noise)(&x, t);
            let xi = gaussian(&mut sensor, d.ncols());
            path.measurements.push((model.measurement)(&x, t) + d * xi / sqrt_dt);
        }
        path.times.push(t);
        path.states.push(x.clone());
        if k == steps {
            break;
        }
        let u = policy(&x, t);
        let g = g_map(&x, t);
        let xi = gaussian(&mut process, g.ncols());
        x = &x + model.closed_drift(&x, t, &u) * dt + g * xi * sqrt_dt;
        path.inputs.push(u);
        if blown_up(&x) {
            path.diverged_at = Some(t + dt);
            break;
        }
    }
    Ok(path)
}

/// Sampled metrics looked up by nearest neighbour in normalized `(x, t)`
/// coordinates, optionally blended by inverse squared distance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    coords: Vec<DVector<f64>>,
    metrics: Vec<DMatrix<f64>>,
    center: DVector<f64>,
    scale: DVector<f64>,
    use_time: bool,
    pub neighbours: usize,
}

impl MetricTable {
    /// Table of `M` over the sampled points; references are ignored.
    pub fn from_samples(set: &MetricSampleSet, neighbours: usize) -> Result<Self> {
        if set.points.is_empty() {
            return Err(Error::Config("metric table needs at least one sample".into()));
        }
        let t_span =
            set.points.iter().map(|p| p.t).fold([f64::INFINITY, f64::NEG_INFINITY], |[a, b], t| [a.min(t), b.max(t)]);
        let use_time = t_span[1] > t_span[0];
        let raw: Vec<DVector<f64>> = set
            .points
            .iter()
            .map(|p| {
                let mut v: Vec<f64> = p.x.iter().copied().collect();
                if use_time {
                    v.push(p.t);
                }
                DVector::from_vec(v)
            })
            .collect();
        let d = raw[0].len();
        let lo = DVector::from_fn(d, |i, _| raw.iter().map(|r| r[i]).fold(f64::INFINITY, f64::min));
        let hi = DVector::from_fn(d, |i, _| raw.iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max));
        let center = (&lo + &hi) * 0.5;
        let scale = (&hi - &lo).map(|w| if w > 0.0 { 0.5 * w } else { 1.0 });
        let coords = raw.iter().map(|r| (r - &center).component_div(&scale)).collect();
        Ok(Self { coords, metrics: set.metrics(), center, scale, use_time, neighbours: neighbours.max(1) })
    }

    pub fn lookup(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let mut q: Vec<f64> = x.iter().copied().collect();
        if self.use_time {
            q.push(t);
        }
        let q = (DVector::from_vec(q) - &self.center).component_div(&self.scale);
        let mut d: Vec<(f64, usize)> =
            self.coords.iter().enumerate().map(|(i, c)| ((c - &q).norm_squared(), i)).collect();
        let k = self.neighbours.min(d.len());
        d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let near = &mut d[..k];
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if k == 1 || near[0].0 == 0.0 {
            return self.metrics[near[0].1].clone();
        }
        let mut acc = DMatrix::zeros(x.len(), x.len());
        let mut wsum = 0.0;
        for &(d2, i) in near.iter() {
            let w = 1.0 / d2;
            acc += &self.metrics[i] * w;
            wsum += w;
        }
        acc / wsum
    }
}

/// Source of the metric `M` used by the contraction-based policies.
#[derive(Debug, Clone)]
pub enum MetricSource {
    Net(Arc<SnMlp>),
    Table(Arc<MetricTable>),
}

impl MetricSource {
    /// `M` at `(x, t)`. Estimation networks learn `W = M⁻¹`.
    pub fn metric(&self, x: &DVector<f64>, t: f64, x_ref: &DVector<f64>, u_ref: &DVector<f64>) -> DMatrix<f64> {
        match self {
            MetricSource::Net(net) => {
                let (w, _) = predict_metric(net, x, t, x_ref, u_ref);
                if net.mode == Mode::Estimation {
                    invert_pd(&w)
                } else {
                    w
                }
            }
            MetricSource::Table(table) => table.lookup(x, t),
        }
    }
}

fn invert_pd(a: &DMatrix<f64>) -> DMatrix<f64> {
    match a.clone().cholesky() {
        Some(c) => sym(&c.inverse()),
        None => a.clone().pseudo_inverse(1e-12).expect("pseudo-inverse of a finite matrix"),
    }
}

/// `u = u_d − Bᵀ M (x − x_d)`.
pub fn nscm_control(
    source: &MetricSource,
    model: &SystemModel,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    let m = source.metric(x, t, x_d, u_d);
    metric_feedback(model, &m, x, x_d, u_d, t)
}

/// The feedback law for a given metric value.
pub fn metric_feedback(
    model: &SystemModel,
    m: &DMatrix<f64>,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    let b = (model.actuation)(x, t);
    u_d - b.transpose() * m * (x - x_d)
}

/// Euler step of `dx̂ = f(x̂) dt + M C_Lᵀ (y − h(x̂)) dt`, with `C_L` the
/// measurement SDC matrix at `(x̂, x̂)`.
pub fn nscm_estimate_step(
    source: &MetricSource,
    model: &SystemModel,
    xhat: &DVector<f64>,
    y: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<DVector<f64>> {
    let m = source.metric(xhat, t, xhat, &DVector::zeros(model.m));
    let c_l = sdc_measurement_factorize(model, xhat, xhat, t, DEFAULT_QUAD_ORDER)?.matrix;
    let innovation = y - (model.measurement)(xhat, t);
    Ok(xhat + ((model.drift)(xhat, t) + m * c_l.transpose() * innovation) * dt)
}

/// Weights of the SDRE baselines: `Q = q I`, `R = r I` for control, and
/// noise covariances scaled by `q` and `r` for estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdreWeights {
    pub q: f64,
    pub r: f64,
}

impl Default for SdreWeights {
    fn default() -> Self {
        Self { q: 1.0, r: 1.0 }
    }
}

/// SDRE feedback gain `K = R⁻¹ Bᵀ P` at the SDC pair of `(x, x_d)`.
pub fn sdre_gain(
    model: &SystemModel,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
    t: f64,
    w: &SdreWeights,
) -> Result<DMatrix<f64>> {
    let a = sdc_factorize(model, x, x_d, u_d, t, DEFAULT_QUAD_ORDER)?.matrix;
    let b = (model.actuation)(x, t);
    let q = DMatrix::identity(model.n, model.n) * w.q;
    let r = DMatrix::identity(model.m, model.m) * w.r;
    let p = solve_care(&a, &b, &q, &r, 1e-10, 100)?;
    Ok(b.transpose() * p / w.r)
}

/// SDRE filter gain `L = P Cᵀ R⁻¹` from the dual Riccati equation at the
/// SDC pair of `x̂` against the origin.
pub fn sdre_observer_gain(model: &SystemModel, xhat: &DVector<f64>, t: f64, w: &SdreWeights) -> Result<DMatrix<f64>> {
    let zero = DVector::zeros(model.n);
    let a = sdc_factorize(model, xhat, &zero, &DVector::zeros(model.m), t, DEFAULT_QUAD_ORDER)?.matrix;
    let c = sdc_measurement_factorize(model, xhat, &zero, t, DEFAULT_QUAD_ORDER)?.matrix;
    let g = (model.estimation_diffusion)(xhat, t);
    let d = (model.measurement_noise)(xhat, t);
    let q = &g * g.transpose() * w.q + DMatrix::identity(model.n, model.n) * 1e-9;
    let r = &d * d.transpose() * w.r + DMatrix::identity(model.p, model.p) * 1e-9;
    let p = solve_care(&a.transpose(), &c.transpose(), &q, &r, 1e-10, 100)?;
    let rinv = r.try_inverse().ok_or_else(|| Error::Solver("singular measurement covariance".into()))?;
    Ok(p * c.transpose() * rinv)
}

/// State of the continuous-discrete EKF after one step.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfStep {
    pub xhat: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// The innovation covariance needed `1e−9 I` to factor.
    pub regularized: bool,
}

/// Measurement update with `y` at `t`, then prediction to `t + Δt` with
/// `Φ = I + F Δt`, `Q = G Gᵀ Δt` and measurement covariance `D Dᵀ/Δt`.
pub fn ekf_step(
    model: &SystemModel,
    xhat: &DVector<f64>,
    cov: &DMatrix<f64>,
    y: &DVector<f64>,
    t: f64,
    dt: f64,
) -> Result<EkfStep> {
    let n = model.n;
    let h = model.measurement_jacobian_at(xhat, t)?;
    let d = (model.measurement_noise)(xhat, t);
    let r = &d * d.transpose() / dt;
    let mut s = sym(&(&h * cov * h.transpose() + &r));
    let mut regularized = false;
    let chol = match s.clone().cholesky() {
        Some(c) => c,
        None => {
            regularized = true;
            s += DMatrix::identity(s.nrows(), s.nrows()) * 1e-9;
            s.clone()
                .cholesky()
                .ok_or_else(|| Error::Factorization("innovation covariance is not positive definite".into()))?
        }
    };
    let k = chol.solve(&(&h * cov)).transpose();
    let x_upd = xhat + &k * (y - (model.measurement)(xhat, t));
    let i_kh = DMatrix::identity(n, n) - &k * &h;
    let p_upd = sym(&(&i_kh * cov * i_kh.transpose() + &k * r * k.transpose()));

    let u = DVector::zeros(model.m);
    let f = model.closed_drift_jacobian(&x_upd, t, &u)?;
    let phi = DMatrix::identity(n, n) + f * dt;
    let g = (model.estimation_diffusion)(&x_upd, t);
    let x_next = &x_upd + model.closed_drift(&x_upd, t, &u) * dt;
    let p_next = sym(&(&phi * p_upd * phi.transpose() + &g * g.transpose() * dt));
    Ok(EkfStep { xhat: x_next, cov: p_next, regularized })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Controller,
    Estimator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    NscmNet,
    MetricTable,
    Sdre,
    Ekf,
    /// Network trained on deterministic metrics (`L_m = 0`).
    NcmNet,
}

/// A policy as named in an experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub name: String,
    pub kind: PolicyKind,
    /// Network checkpoint for `nscm-net` and `ncm-net`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Sample set (CSV with its `.json` metadata) for `metric-table`.
    #[serde(default)]
    pub samples: Option<PathBuf>,
    #[serde(default = "one")]
    pub neighbours: usize,
}

fn one() -> usize {
    1
}

/// A resolved policy.
#[derive(Debug, Clone)]
pub enum Policy {
    Metric(MetricSource),
    Sdre(SdreWeights),
    Ekf { initial_cov: f64 },
}

#[derive(Debug, Clone)]
pub struct NamedPolicy {
    pub name: String,
    pub kind: PolicyKind,
    pub policy: Policy,
}

impl PolicySpec {
    /// Loads the referenced artifacts, resolving relative paths against `base`.
    pub fn resolve(&self, base: &Path, role: Role, exp: &ExperimentConfig, n: usize) -> Result<NamedPolicy> {
        let path = |p: &Option<PathBuf>, what: &str| -> Result<PathBuf> {
            let p = p.as_ref().ok_or_else(|| Error::Config(format!("policy {:?} needs a {what} path", self.name)))?;
            Ok(if p.is_absolute() { p.clone() } else { base.join(p) })
        };
        let policy = match self.kind {
            PolicyKind::NscmNet | PolicyKind::NcmNet => {
                let net = SnMlp::read_checkpoint(path(&self.checkpoint, "checkpoint")?)?;
                if net.features.n != n {
                    return Err(Error::Dimension(format!(
                        "checkpoint {:?} has n = {}, model has {n}",
                        self.name, net.features.n
                    )));
                }
                let expected = if role == Role::Estimator { Mode::Estimation } else { Mode::Control };
                if net.mode != expected && !(role == Role::Controller && net.mode == Mode::Basic) {
                    return Err(Error::Config(format!("checkpoint {:?} was trained for {:?}", self.name, net.mode)));
                }
                Policy::Metric(MetricSource::Net(Arc::new(net)))
            }
            PolicyKind::MetricTable => {
                let csv = path(&self.samples, "samples")?;
                let set = MetricSampleSet::read(&csv, csv.with_extension("json"))?;
                if set.summary.n != n {
                    return Err(Error::Dimension(format!(
                        "sample set {:?} has n = {}, model has {n}",
                        self.name, set.summary.n
                    )));
                }
                Policy::Metric(MetricSource::Table(Arc::new(MetricTable::from_samples(&set, self.neighbours)?)))
            }
            PolicyKind::Sdre => Policy::Sdre(exp.sdre),
            PolicyKind::Ekf => {
                if role != Role::Estimator {
                    return Err(Error::Config("the EKF is an estimator".into()));
                }
                Policy::Ekf { initial_cov: exp.ekf_initial_cov }
            }
        };
        Ok(NamedPolicy { name: self.name.clone(), kind: self.kind, policy })
    }
}

/// Monte-Carlo experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub role: Role,
    pub horizon: f64,
    pub dt: f64,
    pub runs: usize,
    /// Trailing fraction of the horizon averaged for the steady-state MSE.
    pub steady_fraction: f64,
    /// Initial states are drawn here; the reference state if absent.
    pub initial_box: Option<StateBox>,
    /// Standard deviation of the initial estimation error per coordinate.
    pub initial_error: f64,
    pub ekf_initial_cov: f64,
    pub sdre: SdreWeights,
    /// Fixed target `(x_d, u_d)`; zero if absent.
    pub x_ref: Option<Vec<f64>>,
    pub u_ref: Option<Vec<f64>>,
    /// Keep every k-th step in the written traces.
    pub trace_stride: usize,
    pub policies: Vec<PolicySpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            role: Role::Controller,
            horizon: 10.0,
            dt: 1e-3,
            runs: 50,
            steady_fraction: 0.2,
            initial_box: None,
            initial_error: 0.0,
            ekf_initial_cov: 1e-2,
            sdre: SdreWeights::default(),
            x_ref: None,
            u_ref: None,
            trace_stride: 10,
            policies: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.horizon > self.dt) || self.runs == 0 || self.trace_stride == 0 {
            return Err(Error::Config("experiment needs dt > 0, horizon > dt, runs > 0 and trace_stride > 0".into()));
        }
        if !(self.steady_fraction > 0.0 && self.steady_fraction <= 1.0) {
            return Err(Error::Config(format!("steady_fraction must lie in (0, 1], got {}", self.steady_fraction)));
        }
        if !(self.initial_error >= 0.0)
            || !(self.ekf_initial_cov >= 0.0)
            || !(self.sdre.q > 0.0)
            || !(self.sdre.r > 0.0)
        {
            return Err(Error::Config(
                "initial_error, ekf_initial_cov and SDRE weights must be nonnegative (weights positive)".into(),
            ));
        }
        if let Some(b) = &self.initial_box {
            b.validate()?;
        }
        let mut names: Vec<&str> = self.policies.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("policy names must be unique".into()));
        }
        if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\', ','])) {
            return Err(Error::Config("policy names must be nonempty without '/', '\\' or ','".into()));
        }
        Ok(())
    }

    fn reference(&self, model: &SystemModel) -> Result<(DVector<f64>, DVector<f64>)> {
        let get = |v: &Option<Vec<f64>>, len: usize, what: &str| -> Result<DVector<f64>> {
            match v {
                Some(v) if v.len() == len => Ok(DVector::from_column_slice(v)),
                Some(v) => Err(Error::Dimension(format!("{what} has length {}, expected {len}", v.len()))),
                None => Ok(DVector::zeros(len)),
            }
        };
        Ok((get(&self.x_ref, model.n, "x_ref")?, get(&self.u_ref, model.m, "u_ref")?))
    }
}

/// Outcome of one policy over all runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub name: String,
    pub kind: PolicyKind,
    pub role: Role,
    pub runs: usize,
    pub diverged: usize,
    /// Mean over non-diverged runs of the steady-window mean squared error.
    pub steady_mse: f64,
    pub bound: f64,
    /// Steady MSE above the bound, or any divergence.
    pub violation: bool,
    pub per_run_mse: Vec<f64>,
    /// Steps whose EKF innovation covariance was regularized, or whose SDRE
    /// solve failed and held the previous gain.
    pub flagged_steps: usize,
    #[serde(skip)]
    pub runtime_s: f64,
    #[serde(skip)]
    pub traces: Vec<Vec<f64>>,
}

/// Results of a comparison, one report per policy in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub role: Role,
    pub bound: f64,
    pub horizon: f64,
    pub dt: f64,
    pub steady_from: f64,
    pub policies: Vec<PolicyReport>,
    #[serde(skip)]
    pub trace_times: Vec<f64>,
}

struct Rollout {
    errors: Vec<f64>,
    diverged: bool,
    flagged: usize,
}

fn steady_mean(times: &[f64], errors: &[f64], from: f64) -> f64 {
    let (sum, count) = times
        .iter()
        .zip(errors)
        .filter(|(t, _)| **t >= from - 1e-12)
        .fold((0.0, 0usize), |(s, c), (_, e)| (s + e, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

fn control_rollout(
    model: &SystemModel,
    exp: &ExperimentConfig,
    policy: &Policy,
    x0: &DVector<f64>,
    refs: &(DVector<f64>, DVector<f64>),
    seed: u64,
) -> Result<Rollout> {
    let (x_d, u_d) = refs;
    let mut flagged = 0;
    let mut last_gain: Option<DMatrix<f64>> = None;
    let path =
        euler_maruyama(model, Diffusion::Control, x0, 0.0, exp.horizon, exp.dt, seed, false, |x, t| match policy {
            Policy::Metric(src) => nscm_control(src, model, x, x_d, u_d, t),
            Policy::Sdre(w) => {
                match sdre_gain(model, x, x_d, u_d, t, w) {
                    Ok(k) => last_gain = Some(k),
                    Err(_) => flagged += 1,
                }
                match &last_gain {
                    Some(k) => u_d - k * (x - x_d),
                    None => u_d.clone(),
                }
            }
            Policy::Ekf { .. } => unreachable!("rejected when resolving"),
        })?;
    Ok(Rollout {
        errors: path.states.iter().map(|x| (x - x_d).norm_squared()).collect(),
        diverged: path.diverged_at.is_some(),
        flagged,
    })
}

fn estimator_rollout(model: &SystemModel, path: &SdePath, policy: &Policy, xhat0: &DVector<f64>) -> Result<Rollout> {
    let dt = path.dt;
    let mut xhat = xhat0.clone();
    let mut cov = match policy {
        Policy::Ekf { initial_cov } => DMatrix::identity(model.n, model.n) * *initial_cov,
        _ => DMatrix::zeros(0, 0),
    };
    let mut last_gain: Option<DMatrix<f64>> = None;
    let mut flagged = 0;
    let mut errors = Vec::with_capacity(path.states.len());
    let mut diverged = path.diverged_at.is_some();
    for (k, x) in path.states.iter().enumerate() {
        errors.push((&xhat - x).norm_squared());
        if k + 1 == path.states.len() {
            break;
        }
        let (t, y) = (path.times[k], &path.measurements[k]);
        xhat = match policy {
            Policy::Metric(src) => nscm_estimate_step(src, model, &xhat, y, t, dt)?,
            Policy::Sdre(w) => {
                match sdre_observer_gain(model, &xhat, t, w) {
                    Ok(l) => last_gain = Some(l),
                    Err(_) => flagged += 1,
                }
                let correction = match &last_gain {
                    Some(l) => l * (y - (model.measurement)(&xhat, t)),
                    None => DVector::zeros(model.n),
                };
                &xhat + ((model.drift)(&xhat, t) + correction) * dt
            }
            Policy::Ekf { .. } => {
                let s = ekf_step(model, &xhat, &cov, y, t, dt)?;
                flagged += usize::from(s.regularized);
                cov = s.cov;
                s.xhat
            }
        };
        if blown_up(&xhat) {
            diverged = true;
            break;
        }
    }
    Ok(Rollout { errors, diverged, flagged })
}

/// Runs every policy over the same `exp.runs` noise realizations. Run `r`
/// draws its initial state and noise from sub-streams of `seed` indexed by
/// `r`, so every policy sees identical randomness.
pub fn run_comparison(
    model: &SystemModel,
    exp: &ExperimentConfig,
    policies: &[NamedPolicy],
    bound: f64,
    seed: u64,
) -> Result<SimulationReport> {
    exp.validate()?;
    let refs = exp.reference(model)?;
    let initial: Vec<(DVector<f64>, DVector<f64>)> = (0..exp.runs)
        .map(|r| {
            let mut rng = stream(seed, "initial-state", r as u64);
            let x0 = match &exp.initial_box {
                Some(b) => b.sample_state(&mut rng),
                None => refs.0.clone(),
            };
            let err = gaussian(&mut stream(seed, "initial-estimate", r as u64), model.n) * exp.initial_error;
            (x0.clone(), x0 + err)
        })
        .collect();
    if let Some((x0, _)) = initial.first() {
        if x0.len() != model.n {
            return Err(Error::Dimension(format!("initial box has dimension {}, model has {}", x0.len(), model.n)));
        }
    }
    let noise_seed = |r: usize| crate::seed::sub_seed(seed, "noise", r as u64);
    let truth: Vec<SdePath> = if exp.role == Role::Estimator {
        (0..exp.runs)
            .into_par_iter()
            .map(|r| {
                let u0 = DVector::zeros(model.m);
                euler_maruyama(
                    model,
                    Diffusion::Estimation,
                    &initial[r].0,
                    0.0,
                    exp.horizon,
                    exp.dt,
                    noise_seed(r),
                    true,
                    |_, _| u0.clone(),
                )
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let steps = (exp.horizon / exp.dt).round() as usize;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * exp.dt).collect();
    let steady_from = exp.horizon * (1.0 - exp.steady_fraction);
    let jobs: Vec<(usize, usize)> = (0..policies.len()).flat_map(|p| (0..exp.runs).map(move |r| (p, r))).collect();
    let outcomes: Vec<(Rollout, f64)> = jobs
        .par_iter()
        .map(|&(p, r)| {
            let start = std::time::Instant::now();
            let out = match exp.role {
                Role::Controller => {
                    control_rollout(model, exp, &policies[p].policy, &initial[r].0, &refs, noise_seed(r))
                }
                Role::Estimator => estimator_rollout(model, &truth[r], &policies[p].policy, &initial[r].1),
            }?;
            Ok((out, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<_>>()?;

    let trace_times: Vec<f64> = times.iter().step_by(exp.trace_stride).copied().collect();
    let mut reports = Vec::with_capacity(policies.len());
    for (p, named) in policies.iter().enumerate() {
        let runs = &outcomes[p * exp.runs..(p + 1) * exp.runs];
        let per_run_mse: Vec<f64> = runs
            .iter()
            .map(|(o, _)| if o.diverged { f64::INFINITY } else { steady_mean(&times, &o.errors, steady_from) })
            .collect();
        let finite: Vec<f64> = per_run_mse.iter().copied().filter(|v| v.is_finite()).collect();
        let diverged = runs.iter().filter(|(o, _)| o.diverged).count();
        let steady_mse = if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 };
        reports.push(PolicyReport {
            name: named.name.clone(),
            kind: named.kind,
            role: exp.role,
            runs: exp.runs,
            diverged,
            steady_mse,
            bound,
            violation: diverged > 0 || !(steady_mse <= bound),
            per_run_mse,
            flagged_steps: runs.iter().map(|(o, _)| o.flagged).sum(),
            runtime_s: runs.iter().map(|(_, s)| s).sum(),
            traces: runs
                .iter()
                .map(|(o, _)| {
                    (0..trace_times.len())
                        .map(|i| o.errors.get(i * exp.trace_stride).copied().unwrap_or(f64::NAN))
                        .collect()
                })
                .collect(),
        });
    }
    Ok(SimulationReport {
        role: exp.role,
        bound,
        horizon: exp.horizon,
        dt: exp.dt,
        steady_from,
        policies: reports,
        trace_times,
    })
}

impl SimulationReport {
    /// Mean squared error over non-diverged runs at each trace time.
    pub fn mean_trace(&self, policy: usize) -> Vec<f64> {
        let p = &self.policies[policy];
        (0..self.trace_times.len())
            .map(|i| {
                let vals: Vec<f64> = p.traces.iter().map(|t| t[i]).filter(|v| v.is_finite()).collect();
                if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            })
            .collect()
    }

    /// Writes `comparison.csv`, `summary.json` and one `trace_<policy>.csv`
    /// per policy into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("comparison.csv"))?);
        writeln!(f, "policy,kind,role,runs,diverged,steady_mse,bound,violation")?;
        for p in &self.policies {
            writeln!(
                f,
                "{},{},{},{},{},{:e},{:e},{}",
                p.name,
                serde_json::to_value(p.kind)?.as_str().unwrap_or_default(),
                serde_json::to_value(p.role)?.as_str().unwrap_or_default(),
                p.runs,
                p.diverged,
                p.steady_mse,
                p.bound,
                p.violation as u8
            )?;
        }
        f.flush()?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(self)? + "\n")?;
        for (k, p) in self.policies.iter().enumerate() {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("trace_{}.csv", p.name)))?);
            write!(f, "t,mean")?;
            for r in 0..p.traces.len() {
                write!(f, ",run_{r}")?;
            }
            writeln!(f)?;
            let mean = self.mean_trace(k);
            for (i, t) in self.trace_times.iter().enumerate() {
                write!(f, "{t:e},{:e}", mean[i])?;
                for tr in &p.traces {
                    write!(f, ",{:e}", tr[i])?;
                }
                writeln!(f)?;
            }
            f.flush()?;
        }
        Ok(())
    }
}

/// Mean squared distance between two independently driven copies of the
/// unforced system, as in the incremental-stability bound.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalReport {
    pub times: Vec<f64>,
    pub mean_sq: Vec<f64>,
    /// Average of `mean_sq` over the steady window.
    pub steady_mse: f64,
    /// Samples entering `steady_mse` (runs × steady-window points).
    pub samples: usize,
}

/// Simulates `runs` pairs from `(x1, x2)` and averages `‖x₁ − x₂‖²`.
#[allow(clippy::too_many_arguments)]
pub fn incremental_mse(
    model: &SystemModel,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    horizon: f64,
    dt: f64,
    runs: usize,
    steady_fraction: f64,
    seed: u64,
) -> Result<IncrementalReport> {
    let u0 = DVector::zeros(model.m);
    let pairs: Vec<Vec<f64>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let a = euler_maruyama(
                model,
                Diffusion::Control,
                x1,
                0.0,
                horizon,
                dt,
                crate::seed::sub_seed(seed, "first", r as u64),
                false,
                |_, _| u0.clone(),
            )?;
            let b = euler_maruyama(
                model,
                Diffusion::Control,
                x2,
                0.0,
                horizon,
                dt,
                crate::seed::sub_seed(seed, "second", r as u64),
                false,
                |_, _| u0.clone(),
            )?;
            if a.diverged_at.is_some() || b.diverged_at.is_some() {
                return Err(Error::Solver("incremental simulation diverged".into()));
            }
            Ok(a.states.iter().zip(&b.states).map(|(p, q)| (p - q).norm_squared()).collect())
        })
        .collect::<Result<_>>()?;
    let len = pairs.first().map_or(0, Vec::len);
    let times: Vec<f64> = (0..len).map(|k| k as f64 * dt).collect();
    let mean_sq: Vec<f64> = (0..len).map(|k| pairs.iter().map(|p| p[k]).sum::<f64>() / runs as f64).collect();
    let from = horizon * (1.0 - steady_fraction);
    let window = times.iter().filter(|t| **t >= from - 1e-12).count();
    Ok(IncrementalReport { steady_mse: steady_mean(&times, &mean_sq, from), samples: window * runs, times, mean_sq })
}
