//! Configuration-driven stages: sample, train, verify and simulate.
//!
//! One TOML file describes the model, sampler, network, experiment and
//! seed. Every stage reads its inputs from and writes its artifacts to the
//! output directory, so stages can be rerun independently.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::rocket::{rocket_benchmark, sampling_box, RocketConfig};
use crate::dynamics::{NoiseBounds, StateBox, SystemModel};
use crate::error::{Error, Result};
use crate::mcvstem::{
    box_points, check_sample_set, estimate_lipschitz_prepass, line_search, log_space, trajectory_points, GridPoint,
    McvStemConfig, MetricSampleSet, Mode,
};
use crate::nn::{sample_features, train, verify_lipschitz, FeatureMap, SnMlp, TrainConfig};
use crate::seed::stream;
use crate::sim::{incremental_mse, run_comparison, Role, SimulationReport};

/// System under study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Missile pitch dynamics from a coefficient file (bundled default if absent).
    Rocket {
        #[serde(default)]
        coefficients: Option<PathBuf>,
        #[serde(default)]
        augmentation_gain: Option<[f64; 2]>,
    },
    /// `dx = (A x + B u) dt + G dW`, `y = C x + D ξ`.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        g: Vec<Vec<f64>>,
        #[serde(default)]
        c: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        d: Option<Vec<Vec<f64>>>,
        state_box: StateBox,
    },
    /// Scalar `dx = (a x − k x³ + u) dt + g dW`, `y = x + d ξ`.
    Cubic {
        a: f64,
        k: f64,
        g: f64,
        #[serde(default)]
        d: f64,
        state_box: StateBox,
    },
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Config(format!("{what} must be a nonempty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ModelSpec {
    /// The model and its default sampling box.
    pub fn build(&self, base: &Path) -> Result<(SystemModel, StateBox)> {
        match self {
            ModelSpec::Rocket { coefficients, augmentation_gain } => {
                let mut cfg = match coefficients {
                    Some(p) => RocketConfig::from_file(resolve(base, p))?,
                    None => RocketConfig::default(),
                };
                if let Some(k) = augmentation_gain {
                    cfg.augmentation_gain = *k;
                }
                Ok((rocket_benchmark(&cfg)?, sampling_box(&cfg)?))
            }
            ModelSpec::Linear { a, b, g, c, d, state_box } => {
                let (a, b, g) = (matrix(a, "a")?, matrix(b, "b")?, matrix(g, "g")?);
                let n = a.nrows();
                if a.ncols() != n || b.nrows() != n || g.nrows() != n || state_box.dim() != n {
                    return Err(Error::Dimension("a, b, g and state_box must agree on n".into()));
                }
                let c = match c {
                    Some(c) => matrix(c, "c")?,
                    None => DMatrix::identity(n, n),
                };
                if c.ncols() != n {
                    return Err(Error::Dimension("c must have n columns".into()));
                }
                let p = c.nrows();
                let d = match d {
                    Some(d) => matrix(d, "d")?,
                    None => DMatrix::zeros(p, p),
                };
                if d.nrows() != p {
                    return Err(Error::Dimension("d must have as many rows as c".into()));
                }
                let (c1, c2, d1) = (c.clone(), c.clone(), d.clone());
                let mut model = SystemModel::linear(a, b, g)
                    .with_measurement(p, move |x, _| &c1 * x, move |_, _| d1.clone())
                    .with_measurement_jacobian(move |_, _| c2.clone());
                model.bounds.d_bar = d.norm();
                model.bounds.c_bar = crate::dynamics::spectral_norm_dense(&c);
                Ok((model, state_box.clone()))
            }
            ModelSpec::Cubic { a, k, g, d, state_box } => {
                if state_box.dim() != 1 {
                    return Err(Error::Dimension("cubic model is scalar".into()));
                }
                let (a, k, g, d) = (*a, *k, *g, *d);
                let model =
                    SystemModel::new("cubic", 1, move |x, _| DVector::from_element(1, a * x[0] - k * x[0].powi(3)))
                        .with_actuation(1, |_, _| DMatrix::from_element(1, 1, 1.0))
                        .with_closed_jacobian(move |x, _, _| DMatrix::from_element(1, 1, a - 3.0 * k * x[0] * x[0]))
                        .with_control_diffusion(move |_, _| DMatrix::from_element(1, 1, g))
                        .with_estimation_diffusion(move |_, _| DMatrix::from_element(1, 1, g))
                        .with_measurement(1, |x, _| x.clone(), move |_, _| DMatrix::from_element(1, 1, d))
                        .with_measurement_jacobian(|_, _| DMatrix::from_element(1, 1, 1.0))
                        .with_bounds(NoiseBounds { g_c: g.abs(), g_e: g.abs(), d_bar: d.abs(), c_bar: 1.0 });
                Ok((model, state_box.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SampleSource {
    /// Uniform over the state box.
    Box,
    /// Along the unforced trajectory from `x0`.
    Trajectory { x0: Vec<f64>, spacing: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub samples: usize,
    pub source: SampleSource,
    /// Overrides the model's default box.
    pub state_box: Option<StateBox>,
    /// Box over stacked `(x_d, u_d)`; references are zero if absent.
    pub target_box: Option<StateBox>,
    /// Replace `mcvstem.l_m` by the deterministic pre-pass estimate.
    pub estimate_l_m: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { samples: 1000, source: SampleSource::Box, state_box: None, target_box: None, estimate_l_m: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// State pairs for the Lipschitz check.
    pub pairs: usize,
    /// Random inputs for the norm check.
    pub norm_samples: usize,
    /// Relative LMI tolerance for the stored samples.
    pub feasibility_tol: f64,
    /// Two-trajectory runs of the incremental-stability check.
    pub ou_runs: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { pairs: 10_000, norm_samples: 10_000, feasibility_tol: 1e-6, ou_runs: 400 }
    }
}

/// Everything one pipeline run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub model: ModelSpec,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub mcvstem: McvStemConfig,
    #[serde(default)]
    pub network: TrainConfig,
    #[serde(default)]
    pub experiment: crate::sim::ExperimentConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Training certifies the `L_m` the samples were drawn with, so a separate
/// `network.l_m` would be silently ignored.
fn reject_network_l_m(s: &str) -> Result<()> {
    let set = s
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("network").and_then(|n| n.as_table()).map(|n| n.contains_key("l_m")))
        .unwrap_or(false);
    if set {
        return Err(Error::Config("set L_m as mcvstem.l_m; the network is certified for the sampled value".into()));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        reject_network_l_m(s)?;
        let mut cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s =
            std::fs::read_to_string(path).map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
        reject_network_l_m(&s)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cfg: Self =
            toml::from_str(&s).map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
        cfg.base_dir = base;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.mcvstem.validate()?;
        self.network.validate()?;
        self.experiment.validate()?;
        if self.sampling.samples == 0 {
            return Err(Error::Config("sampling.samples must be positive".into()));
        }
        Ok(())
    }

    /// Output directory; relative paths resolve against the working directory.
    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn role(&self) -> Role {
        match self.mcvstem.mode {
            Mode::Estimation => Role::Estimator,
            Mode::Control | Mode::Basic => Role::Controller,
        }
    }

    /// Applies `alpha=…;epsilon=…` where each value is either `lo:hi:count`
    /// (log-spaced) or a comma-separated list.
    pub fn apply_grid_override(&mut self, spec: &str) -> Result<()> {
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid override {part:?} is not key=value")))?;
            let bad = || Error::Config(format!("cannot parse grid values {value:?}"));
            let values = if let [lo, hi, count] = value.split(':').collect::<Vec<_>>()[..] {
                let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
                let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
                let count: usize = count.trim().parse().map_err(|_| bad())?;
                if count == 0 || !(lo > 0.0) || !(hi >= lo) {
                    return Err(bad());
                }
                log_space(lo, hi, count)
            } else {
                value.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?
            };
            match key.trim() {
                "alpha" | "alphas" => self.mcvstem.alphas = values,
                "epsilon" | "epsilons" | "eps" => self.mcvstem.epsilons = values,
                other => return Err(Error::Config(format!("unknown grid axis {other:?}"))),
            }
        }
        self.mcvstem.validate()
    }

    /// Keeps only the named policies, in the given order.
    pub fn select_policies(&mut self, names: &[String]) -> Result<()> {
        let mut kept = Vec::with_capacity(names.len());
        for name in names {
            let p = self
                .experiment
                .policies
                .iter()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Config(format!("no policy named {name:?} in the experiment")))?;
            kept.push(p.clone());
        }
        self.experiment.policies = kept;
        Ok(())
    }

    fn model(&self) -> Result<(SystemModel, StateBox)> {
        let (model, default_box) = self.model.build(&self.base_dir)?;
        let domain = self.sampling.state_box.clone().unwrap_or(default_box);
        if domain.dim() != model.n {
            return Err(Error::Dimension(format!(
                "sampling box has dimension {}, model has {}",
                domain.dim(),
                model.n
            )));
        }
        Ok((model, domain))
    }

    fn features(&self, model: &SystemModel, domain: &StateBox) -> FeatureMap {
        FeatureMap {
            n: model.n,
            m: model.m,
            time: if model.time_varying { domain.time } else { None },
            reference: self.sampling.target_box.is_some(),
        }
    }
}

/// Artifact names inside the output directory.
pub mod files {
    pub const SAMPLES: &str = "samples.csv";
    pub const SAMPLES_META: &str = "samples.json";
    pub const SURFACE: &str = "surface.csv";
    pub const CHECKPOINT: &str = "network.ckpt";
    pub const TRAINING: &str = "training.csv";
    pub const VERIFY: &str = "verify.json";
    pub const PLOT_SURFACE: &str = "plot_surface.csv";
    pub const PLOT_ERRORS: &str = "plot_errors.csv";
    pub const LOG: &str = "nscm.log";
}

/// Stage results shown to the user.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Sampled { alpha: f64, epsilon: f64, objective: f64, bound: f64, interior: bool },
    Trained { test_error: f64, train_error: f64, epochs: usize, c_nn: f64 },
    Verified(VerifyReport),
    Simulated(Vec<(String, f64, f64, bool)>),
}

fn log_line(cfg: &PipelineConfig, msg: &str) -> Result<()> {
    let path = cfg.out_dir().join(files::LOG);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{msg}")?;
    Ok(())
}

/// Starts a fresh log whose header carries the only timestamp.
pub fn start_log(cfg: &PipelineConfig, stage: &str) -> Result<()> {
    std::fs::create_dir_all(cfg.out_dir())?;
    let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut f = std::fs::File::create(cfg.out_dir().join(files::LOG))?;
    writeln!(f, "# nscm {stage} started at unix time {secs}, seed {}", cfg.seed)?;
    Ok(())
}

fn sample_points(
    cfg: &PipelineConfig,
    model: &SystemModel,
    domain: &StateBox,
) -> Result<Vec<crate::mcvstem::SamplePoint>> {
    match &cfg.sampling.source {
        SampleSource::Box => {
            let mut rng = stream(cfg.seed, "sampling", 0);
            box_points(model, domain, cfg.sampling.target_box.as_ref(), cfg.sampling.samples, &mut rng)
        }
        SampleSource::Trajectory { x0, spacing } => {
            if x0.len() != model.n {
                return Err(Error::Dimension(format!("trajectory x0 has length {}, model has {}", x0.len(), model.n)));
            }
            let t0 = domain.time.map_or(0.0, |t| t[0]);
            trajectory_points(model, &DVector::from_column_slice(x0), t0, *spacing, cfg.sampling.samples)
        }
    }
}

/// Samples optimal metrics on the `(α, ε)` grid and writes the argmin set.
pub fn cmd_sample(cfg: &PipelineConfig, emit_plots: bool) -> Result<StageOutcome> {
    let (model, domain) = cfg.model()?;
    let points = sample_points(cfg, &model, &domain)?;
    let mut mc = cfg.mcvstem.clone();
    if cfg.sampling.estimate_l_m {
        mc.l_m = estimate_lipschitz_prepass(&mc, &model, &points)?;
        log_line(cfg, &format!("estimated L_m = {:e}", mc.l_m))?;
    }
    let result = line_search(&mc, &model, &points)?;
    let out = cfg.out_dir();
    std::fs::create_dir_all(out)?;
    result.samples.write(out.join(files::SAMPLES), out.join(files::SAMPLES_META))?;
    result.write_surface(out.join(files::SURFACE))?;
    if emit_plots {
        write_surface_plot(&result.surface, out.join(files::PLOT_SURFACE))?;
    }
    let s = &result.samples.summary;
    let feasible = result.surface.iter().filter(|g| g.feasible).count();
    log_line(
        cfg,
        &format!(
            "sample: {} points, {feasible}/{} grid points feasible, alpha* = {:e}, eps* = {:e}, J* = {:e}, bound = {:e}",
            s.samples,
            result.surface.len(),
            result.alpha,
            result.epsilon,
            s.objective,
            s.bound
        ),
    )?;
    Ok(StageOutcome::Sampled {
        alpha: result.alpha,
        epsilon: result.epsilon,
        objective: s.objective,
        bound: s.bound,
        interior: result.argmin_is_interior(),
    })
}

/// Grid blocks separated by blank lines, one block per `α`, for `splot`.
fn write_surface_plot(surface: &[GridPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# alpha epsilon objective bound")?;
    let mut last: Option<f64> = None;
    for g in surface {
        if last.is_some_and(|a| a != g.alpha) {
            writeln!(f)?;
        }
        last = Some(g.alpha);
        writeln!(f, "{:e} {:e} {:e} {:e}", g.alpha, g.epsilon, g.objective, g.bound)?;
    }
    Ok(())
}

fn read_samples(cfg: &PipelineConfig) -> Result<MetricSampleSet> {
    let out = cfg.out_dir();
    let csv = out.join(files::SAMPLES);
    if !csv.exists() {
        return Err(Error::Parse { path: csv, msg: "sample set not found; run the sample stage first".into() });
    }
    MetricSampleSet::read(csv, out.join(files::SAMPLES_META))
}

/// Trains the network on the stored samples and writes the checkpoint.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let set = read_samples(cfg)?;
    let (model, domain) = cfg.model()?;
    let tc = TrainConfig { l_m: set.summary.l_m, ..cfg.network.clone() };
    let result = train(&set, cfg.features(&model, &domain), &tc, crate::seed::sub_seed(cfg.seed, "training", 0))?;
    let out = cfg.out_dir();
    result.net.write_checkpoint(out.join(files::CHECKPOINT))?;
    result.write_history(out.join(files::TRAINING))?;
    log_line(
        cfg,
        &format!(
            "train: C_nn = {:e}, m_bar = {:e}, epochs = {}, train error = {:e}, test error = {:e}",
            result.net.c_nn,
            result.net.norm_bound(),
            result.history.len(),
            result.train_error,
            result.test_error
        ),
    )?;
    Ok(StageOutcome::Trained {
        test_error: result.test_error,
        train_error: result.train_error,
        epochs: result.history.len(),
        c_nn: result.net.c_nn,
    })
}

/// One named check of the verification suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn check(name: &str, value: f64, limit: f64, passed: bool) -> Check {
    Check { name: name.into(), passed, value, limit }
}

/// Spectral-norm, output-norm and slope checks of a network.
pub fn verify_network(net: &SnMlp, domain: &StateBox, pairs: usize, norm_samples: usize, seed: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    let sn_dev = (0..net.layers())
        .map(|l| (crate::dynamics::spectral_norm_dense(&net.effective_weight(l)) - net.c_nn).abs())
        .fold(0.0, f64::max);
    checks.push(check("hidden_spectral_norm_deviation", sn_dev, 1e-6, sn_dev <= 1e-6));
    let out_norm = crate::dynamics::spectral_norm_dense(&net.effective_weight(net.layers()));
    let out_dev = (out_norm - net.output_scale()).abs();
    checks.push(check(
        "output_spectral_norm_deviation",
        out_dev,
        1e-6 * net.output_scale().max(1.0),
        out_dev <= 1e-6 * net.output_scale().max(1.0),
    ));

    let mut rng = stream(seed, "verify-inputs", 0);
    let inputs: Vec<DVector<f64>> = (0..norm_samples)
        .map(|_| {
            let x = domain.sample_state(&mut rng);
            let t = domain.sample_time(&mut rng);
            net.features.features(&x, t, &DVector::zeros(net.features.n), &DVector::zeros(net.features.m))
        })
        .collect();
    let max_norm = net.predict_batch(&inputs).iter().map(crate::linalg::sym_norm).fold(0.0, f64::max);
    let bound = net.norm_bound();
    checks.push(check("metric_norm", max_norm, bound, max_norm <= bound + 1e-9));

    let mut rng = stream(seed, "verify-pairs", 0);
    let rep = verify_lipschitz(net, domain, net.l_m, pairs, &mut rng);
    checks.push(check(
        "theta_slope",
        rep.theta_slope,
        rep.theta_slope_bound * 1.01,
        rep.theta_slope <= rep.theta_slope_bound * 1.01,
    ));
    if net.l_m > 0.0 {
        let cond = crate::nn::sn_condition_with_offset(net.c_nn, net.m_bar, net.offset.norm(), net.layers());
        checks.push(check("sn_certificate", cond, net.l_m, cond <= net.l_m * (1.0 + 1e-9)));
        checks.push(check("metric_derivative_lipschitz", rep.measured, net.l_m, rep.passed));
    }
    checks
}

/// Runs the invariant suite on the stored artifacts; fails on any miss.
pub fn cmd_verify(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let (model, domain) = cfg.model()?;
    let mut checks = Vec::new();
    let set = read_samples(cfg)?;
    let feas = check_sample_set(&cfg.mcvstem, &model, &set, cfg.verify.feasibility_tol)?;
    checks.push(check("sample_lmi_feasibility", feas.worst, cfg.verify.feasibility_tol, feas.feasible));

    let ckpt = cfg.out_dir().join(files::CHECKPOINT);
    if ckpt.exists() {
        let net = SnMlp::read_checkpoint(&ckpt)?;
        checks.extend(verify_network(&net, &domain, cfg.verify.pairs, cfg.verify.norm_samples, cfg.seed));
        let inputs = sample_features(&set, &net.features);
        let outside = inputs.iter().filter(|z| net.extrapolates(z)).count() as f64;
        checks.push(check("samples_outside_input_range", outside, 0.0, outside == 0.0));
    }

    // Incremental-stability bound on dx = −x dt + g dW with M = I, α = 1.
    if cfg.verify.ou_runs > 0 {
        let g = 0.1;
        let ou = SystemModel::linear(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, g),
        );
        let zero = DVector::zeros(1);
        let rep = incremental_mse(
            &ou,
            &zero,
            &zero,
            5.0,
            1e-2,
            cfg.verify.ou_runs,
            0.2,
            crate::seed::sub_seed(cfg.seed, "ou", 0),
        )?;
        let bound = g * g * (2.0 / 10.0 + 1.0);
        checks.push(check("ou_incremental_bound", rep.steady_mse, bound, rep.steady_mse <= bound));
    }

    let report = VerifyReport { passed: checks.iter().all(|c| c.passed), checks };
    std::fs::write(cfg.out_dir().join(files::VERIFY), serde_json::to_string_pretty(&report)? + "\n")?;
    for c in &report.checks {
        log_line(
            cfg,
            &format!(
                "verify: {} {} (value {:e}, limit {:e})",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.value,
                c.limit
            ),
        )?;
    }
    Ok(StageOutcome::Verified(report))
}

/// Runs the Monte-Carlo comparison of the configured policies.
pub fn cmd_simulate(cfg: &PipelineConfig, emit_plots: bool) -> Result<StageOutcome> {
    let (model, _) = cfg.model()?;
    let out = cfg.out_dir();
    let meta = out.join(files::SAMPLES_META);
    let summary: crate::mcvstem::SampleSummary = serde_json::from_str(
        &std::fs::read_to_string(&meta)
            .map_err(|e| Error::Parse { path: meta.clone(), msg: format!("{e}; run the sample stage first") })?,
    )
    .map_err(|e| Error::Parse { path: meta.clone(), msg: e.to_string() })?;
    let mut exp = cfg.experiment.clone();
    exp.role = cfg.role();
    if exp.policies.is_empty() {
        return Err(Error::Config("the experiment lists no policies".into()));
    }
    let policies = exp.policies.iter().map(|p| p.resolve(out, exp.role, &exp, model.n)).collect::<Result<Vec<_>>>()?;
    let report =
        run_comparison(&model, &exp, &policies, summary.bound, crate::seed::sub_seed(cfg.seed, "simulation", 0))?;
    report.write(out)?;
    if emit_plots {
        write_error_plot(&report, out.join(files::PLOT_ERRORS))?;
    }
    let rows = report.policies.iter().map(|p| (p.name.clone(), p.steady_mse, p.bound, p.violation)).collect::<Vec<_>>();
    for p in &report.policies {
        log_line(
            cfg,
            &format!(
                "simulate: {} steady MSE = {:e}, bound = {:e}, diverged = {}/{}, {}",
                p.name,
                p.steady_mse,
                p.bound,
                p.diverged,
                p.runs,
                if p.violation { "violates" } else { "within bound" }
            ),
        )?;
    }
    Ok(StageOutcome::Simulated(rows))
}

fn write_error_plot(report: &SimulationReport, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "t")?;
    for p in &report.policies {
        write!(f, ",{}", p.name)?;
    }
    writeln!(f, ",bound")?;
    let means: Vec<Vec<f64>> = (0..report.policies.len()).map(|k| report.mean_trace(k)).collect();
    for (i, t) in report.trace_times.iter().enumerate() {
        write!(f, "{t:e}")?;
        for m in &means {
            write!(f, ",{:e}", m[i])?;
        }
        writeln!(f, ",{:e}", report.bound)?;
    }
    Ok(())
}

/// Stages in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sample,
    Train,
    Verify,
    Simulate,
    All,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sample" => Stage::Sample,
            "train" => Stage::Train,
            "verify" => Stage::Verify,
            "simulate" | "compare" => Stage::Simulate,
            "all" => Stage::All,
            other => return Err(Error::Config(format!("unknown stage {other:?}"))),
        })
    }
}

/// Runs one stage or all of them in order.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage, emit_plots: bool) -> Result<Vec<StageOutcome>> {
    start_log(cfg, &format!("{stage:?}").to_lowercase())?;
    let stages: &[Stage] = match stage {
        Stage::All => &[Stage::Sample, Stage::Train, Stage::Verify, Stage::Simulate],
        _ => std::slice::from_ref(&stage),
    };
    let mut outcomes = Vec::new();
    for s in stages {
        let outcome = match s {
            Stage::Sample => cmd_sample(cfg, emit_plots)?,
            Stage::Train => cmd_train(cfg)?,
            Stage::Verify => cmd_verify(cfg)?,
            Stage::Simulate => cmd_simulate(cfg, emit_plots)?,
            Stage::All => unreachable!(),
        };
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Exit status for an error: 2 for usage, configuration and missing
/// inputs, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } | Error::Io(_) | Error::Dimension(_) | Error::Json(_) => 2,
        _ => 1,
    }
}
