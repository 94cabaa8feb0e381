//! Spectrally-normalized tanh networks for metric fields.
//!
//! The network outputs the Cholesky code `θ` of the learned matrix
//! `X = YᵀY`. Every hidden weight is `W = C_nn Ω/‖Ω‖` and the output
//! weight is `√m̄ Ω/‖Ω‖/√N_units`, so `‖θ‖ ≤ √m̄`, `‖X‖ ≤ m̄` and the second
//! derivatives of `X` obey a Lipschitz bound fixed by `(m̄, C_nn, L)`.
//!
//! The output layer may carry a fixed offset `θ₀`; the network then scales
//! to a residual bound `m̄_r` and `‖θ‖ ≤ ‖θ₀‖ + √m̄_r`.

use std::io::{BufRead, BufReader, Read, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::StateBox;
use crate::error::{Error, Result};
use crate::linalg::{sym_norm, tri_len, upper_tri_indices};
use crate::mcvstem::{MetricSampleSet, Mode};

/// Upper-triangular `Y` (row-major) with `X = YᵀY`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyCode {
    pub theta: DVector<f64>,
}

impl CholeskyCode {
    pub fn dim(&self) -> usize {
        crate::linalg::tri_dim(self.theta.len()).expect("triangular length")
    }
}

pub fn cholesky_encode(x: &DMatrix<f64>) -> Result<CholeskyCode> {
    let n = x.nrows();
    if x.ncols() != n || *x != x.transpose() && (x - x.transpose()).norm() > 1e-12 * (1.0 + x.norm()) {
        return Err(Error::Factorization("matrix is not symmetric".into()));
    }
    let l = x.clone().cholesky().ok_or_else(|| Error::Factorization("matrix is not positive definite".into()))?.l();
    let theta = DVector::from_iterator(tri_len(n), upper_tri_indices(n).into_iter().map(|(i, j)| l[(j, i)]));
    Ok(CholeskyCode { theta })
}

/// `YᵀY`; positive semidefinite for any code.
pub fn cholesky_decode(code: &CholeskyCode) -> DMatrix<f64> {
    decode_theta(code.theta.as_slice())
}

fn decode_theta(theta: &[f64]) -> DMatrix<f64> {
    let n = crate::linalg::tri_dim(theta.len()).expect("triangular length");
    let mut y = DMatrix::zeros(n, n);
    for (k, (i, j)) in upper_tri_indices(n).into_iter().enumerate() {
        y[(i, j)] = theta[k];
    }
    let x = y.transpose() * &y;
    (&x + x.transpose()) * 0.5
}

/// Largest singular value with its singular vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEstimate {
    pub sigma: f64,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
}

/// Power iteration on `AᵀA` from `start` (or a fixed deterministic vector),
/// stopped when `‖Aᵀu − σ v‖ ≤ 1e−8 σ`.
pub fn spectral_norm_with(a: &DMatrix<f64>, start: Option<&DVector<f64>>) -> SpectralEstimate {
    let (r, c) = a.shape();
    if a.iter().all(|v| *v == 0.0) || r == 0 || c == 0 {
        return SpectralEstimate { sigma: 0.0, u: DVector::zeros(r), v: DVector::zeros(c) };
    }
    let mut v = match start {
        Some(s) if s.len() == c && s.norm() > 0.0 => s.normalize(),
        _ => DVector::from_iterator(c, (0..c).map(|k| 1.0 + 0.1 * ((k * 7919) % 13) as f64)).normalize(),
    };
    let mut sigma = 0.0;
    let mut u = DVector::zeros(r);
    for _ in 0..20_000 {
        let av = a * &v;
        let s_now = av.norm();
        if s_now == 0.0 {
            // Start vector in the null space; restart from a coordinate axis.
            v = DVector::zeros(c);
            v[(sigma as usize) % c] = 1.0;
            sigma += 1.0;
            continue;
        }
        u = av / s_now;
        let atu = a.transpose() * &u;
        let s_new = atu.norm();
        // (u, v) is a singular pair to within this residual, and σ to within
        // its square over the gap.
        let done = (&atu - &v * s_now).norm() <= 1e-8 * s_new;
        v = atu / s_new;
        sigma = s_new;
        if done {
            break;
        }
    }
    SpectralEstimate { sigma, u, v }
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    spectral_norm_with(a, None).sigma
}

/// Derivative bound `2m̄C^{2L} + 2m̄C^{L+1}(C^L − 1)/(C − 1)` on the metric.
pub fn sn_condition(c: f64, m_bar: f64, layers: usize) -> f64 {
    sn_condition_with_offset(c, m_bar, 0.0, layers)
}

/// [`sn_condition`] for a network with output offset of norm `offset`:
/// `2m̄_r C^{2L} + 2(‖θ₀‖ + √m̄_r)√m̄_r C^{L+1}(C^L − 1)/(C − 1)`.
pub fn sn_condition_with_offset(c: f64, m_res: f64, offset: f64, layers: usize) -> f64 {
    let l = layers as i32;
    let geometric = if (c - 1.0).abs() < 1e-12 { layers as f64 } else { (c.powi(l) - 1.0) / (c - 1.0) };
    let root = m_res.sqrt();
    2.0 * m_res * c.powi(2 * l) + 2.0 * (offset + root) * root * c.powi(l + 1) * geometric
}

/// Largest `C ∈ (0, c_max]` meeting [`sn_condition`] `≤ L_m`, by bisection
/// to `1e−10`. Values below `c_min` leave a network that is constant to
/// working precision and are reported as a certificate error.
pub fn compute_sn_constant(m_bar: f64, l_m: f64, layers: usize, c_max: f64, c_min: f64) -> Result<f64> {
    compute_sn_constant_with_offset(m_bar, 0.0, l_m, layers, c_max, c_min)
}

/// [`compute_sn_constant`] for a residual bound `m̄_r` around an offset of norm `offset`.
pub fn compute_sn_constant_with_offset(
    m_bar: f64,
    offset: f64,
    l_m: f64,
    layers: usize,
    c_max: f64,
    c_min: f64,
) -> Result<f64> {
    let cond = |c: f64| sn_condition_with_offset(c, m_bar, offset, layers);
    if !(m_bar > 0.0) || !(offset >= 0.0) || !(l_m > 0.0) || layers == 0 || !(c_max > 0.0) {
        return Err(Error::Certificate(format!(
            "need m_bar > 0, L_m > 0 and at least one layer (m_bar = {m_bar}, L_m = {l_m})"
        )));
    }
    if cond(c_max) <= l_m {
        return Ok(c_max);
    }
    let (mut lo, mut hi) = (0.0, c_max);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if cond(mid) <= l_m {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo < c_min {
        return Err(Error::Certificate(format!(
            "L_m = {l_m} forces C_nn = {lo:.3e} below {c_min} for m_bar = {m_bar}"
        )));
    }
    Ok(lo)
}

/// Maps `(x, t, x_ref, u_ref)` to network inputs. States enter unscaled so
/// the derivative certificate holds in state coordinates; time is mapped
/// affinely onto `[−1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub n: usize,
    pub m: usize,
    pub time: Option<[f64; 2]>,
    pub reference: bool,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        self.n + usize::from(self.time.is_some()) + if self.reference { self.n + self.m } else { 0 }
    }

    pub fn features(&self, x: &DVector<f64>, t: f64, x_ref: &DVector<f64>, u_ref: &DVector<f64>) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend(x.iter());
        if let Some([t0, t1]) = self.time {
            let half = 0.5 * (t1 - t0);
            v.push(if half > 0.0 { (t - 0.5 * (t0 + t1)) / half } else { 0.0 });
        }
        if self.reference {
            v.extend(x_ref.iter());
            v.extend(u_ref.iter());
        }
        DVector::from_vec(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    /// Linear network, used to check the certificate against closed forms.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation value.
    fn slope(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Identity => 1.0,
        }
    }
}

/// Spectrally-normalized multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct SnMlp {
    pub features: FeatureMap,
    pub widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub c_nn: f64,
    /// Residual bound `m̄_r` setting the output scale.
    pub m_bar: f64,
    /// Fixed output offset `θ₀`; empty for none.
    pub offset: DVector<f64>,
    /// Lipschitz constant the SN constant was derived for; zero when the
    /// network is uncertified.
    pub l_m: f64,
    /// Matrix the network represents: `M` (control) or `W` (estimation).
    pub mode: Mode,
    /// Per-feature `[min, max]` over the training inputs; empty if unknown.
    pub input_range: Vec<[f64; 2]>,
    pub omega: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
    sigma: Vec<SpectralEstimate>,
}

/// Network checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    features: FeatureMap,
    widths: Vec<usize>,
    output_dim: usize,
    activation: Activation,
    c_nn: f64,
    m_bar: f64,
    #[serde(default)]
    offset: Vec<f64>,
    l_m: f64,
    mode: Mode,
    #[serde(default)]
    input_range: Vec<[f64; 2]>,
    weights: usize,
}

const CHECKPOINT_MAGIC: &str = "NSCM-CKPT 1";

impl SnMlp {
    pub fn new<R: Rng>(
        features: FeatureMap,
        widths: Vec<usize>,
        c_nn: f64,
        m_bar: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Config("network needs at least one nonempty hidden layer".into()));
        }
        let output_dim = tri_len(features.n);
        let mut dims = vec![features.dim()];
        dims.extend(&widths);
        dims.push(output_dim);
        let omega: Vec<DMatrix<f64>> = dims
            .windows(2)
            .map(|w| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                DMatrix::from_fn(w[1], w[0], |_, _| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
            })
            .collect();
        let bias = widths.iter().map(|&w| DVector::zeros(w)).collect();
        let mut net = Self {
            features,
            widths,
            output_dim,
            activation: Activation::Tanh,
            c_nn,
            m_bar,
            offset: DVector::zeros(0),
            l_m: 0.0,
            mode,
            input_range: Vec::new(),
            omega,
            bias,
            sigma: Vec::new(),
        };
        net.renormalize();
        Ok(net)
    }

    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    /// `√m̄/√N_units` with `N_units` the width of the last hidden layer.
    pub fn output_scale(&self) -> f64 {
        (self.m_bar / *self.widths.last().expect("hidden layer") as f64).sqrt()
    }

    fn layer_constant(&self, l: usize) -> f64 {
        if l + 1 == self.omega.len() {
            self.output_scale()
        } else {
            self.c_nn
        }
    }

    /// Recomputes the spectral norms, warm-starting each power iteration.
    pub fn renormalize(&mut self) {
        let starts: Vec<Option<DVector<f64>>> =
            (0..self.omega.len()).map(|l| self.sigma.get(l).map(|s| s.v.clone())).collect();
        self.sigma = self.omega.iter().zip(starts).map(|(o, s)| spectral_norm_with(o, s.as_ref())).collect();
    }

    /// Effective weight of layer `l` (hidden layers first, output last).
    pub fn effective_weight(&self, l: usize) -> DMatrix<f64> {
        let s = self.sigma[l].sigma;
        if s == 0.0 {
            return self.omega[l].clone();
        }
        &self.omega[l] * (self.layer_constant(l) / s)
    }

    /// `θ` for one input vector.
    pub fn forward(&self, input: &DVector<f64>) -> DVector<f64> {
        let mut h = input.clone();
        let last = self.omega.len() - 1;
        for l in 0..last {
            let z = self.effective_weight(l) * h + &self.bias[l];
            h = z.map(|v| self.activation.apply(v));
        }
        let out = self.effective_weight(last) * h;
        if self.offset.is_empty() {
            out
        } else {
            out + &self.offset
        }
    }

    /// `(‖θ₀‖ + √m̄_r)²`, the bound on `‖X‖` for every input.
    pub fn norm_bound(&self) -> f64 {
        (self.offset.norm() + self.m_bar.sqrt()).powi(2)
    }

    /// `√m̄_r C_nn^L`, the bound on the slope of `θ`.
    pub fn slope_bound(&self) -> f64 {
        self.m_bar.sqrt() * self.c_nn.powi(self.layers() as i32)
    }

    /// Matrix `X = YᵀY` at a feature vector.
    pub fn predict(&self, input: &DVector<f64>) -> DMatrix<f64> {
        decode_theta(self.forward(input).as_slice())
    }

    /// Whether a feature vector lies outside the training range.
    pub fn extrapolates(&self, input: &DVector<f64>) -> bool {
        self.input_range.len() == input.len()
            && input.iter().zip(&self.input_range).any(|(v, [lo, hi])| v < lo || v > hi)
    }

    pub fn predict_batch(&self, inputs: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
        inputs.par_iter().map(|x| self.predict(x)).collect()
    }

    fn forward_batch(&self, x: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
        let last = self.omega.len() - 1;
        let mut acts = Vec::with_capacity(self.omega.len());
        acts.push(x.clone());
        for l in 0..last {
            let mut z = self.effective_weight(l) * &acts[l];
            for mut col in z.column_iter_mut() {
                col += &self.bias[l];
            }
            acts.push(z.map(|v| self.activation.apply(v)));
        }
        let mut out = self.effective_weight(last) * &acts[last];
        if !self.offset.is_empty() {
            for mut col in out.column_iter_mut() {
                col += &self.offset;
            }
        }
        (acts, out)
    }

    /// Gradients of `loss = scale · Σ‖out − target‖²` with respect to `Ω`
    /// and the biases, propagating through the normalization.
    fn gradients(
        &self,
        x: &DMatrix<f64>,
        target: &DMatrix<f64>,
        scale: f64,
    ) -> (f64, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let (acts, out) = self.forward_batch(x);
        let diff = &out - target;
        let loss = scale * diff.norm_squared();
        let mut delta = diff * (2.0 * scale);
        let last = self.omega.len() - 1;
        let mut g_omega = vec![DMatrix::zeros(0, 0); self.omega.len()];
        let mut g_bias = vec![DVector::zeros(0); last];
        for l in (0..=last).rev() {
            let w = self.effective_weight(l);
            let g_w = &delta * acts[l].transpose();
            let back = w.transpose() * &delta;
            g_omega[l] = self.normalization_grad(l, &g_w);
            if l > 0 {
                let h = &acts[l];
                delta = back.zip_map(h, |d, hv| d * self.activation.slope(hv));
                g_bias[l - 1] = delta.column_sum();
            }
        }
        (loss, g_omega, g_bias)
    }

    /// `dL/dΩ = (C/σ)[G − (⟨G, Ω⟩/σ) u vᵀ]` for `W = C Ω/σ(Ω)`.
    fn normalization_grad(&self, l: usize, g_w: &DMatrix<f64>) -> DMatrix<f64> {
        let s = &self.sigma[l];
        if s.sigma == 0.0 {
            return g_w.clone();
        }
        let c = self.layer_constant(l);
        let inner = g_w.dot(&self.omega[l]);
        (g_w - &s.u * s.v.transpose() * (inner / s.sigma)) * (c / s.sigma)
    }

    fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for o in &self.omega {
            p.extend(o.iter());
        }
        for b in &self.bias {
            p.extend(b.iter());
        }
        p
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let weights = self.parameters();
        let header = CheckpointHeader {
            features: self.features.clone(),
            widths: self.widths.clone(),
            output_dim: self.output_dim,
            activation: self.activation,
            c_nn: self.c_nn,
            m_bar: self.m_bar,
            offset: self.offset.iter().copied().collect(),
            l_m: self.l_m,
            mode: self.mode,
            input_range: self.input_range.clone(),
            weights: weights.len(),
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{CHECKPOINT_MAGIC}")?;
        writeln!(f, "{}", serde_json::to_string(&header)?)?;
        for w in weights {
            f.write_all(&w.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads a checkpoint: a magic line, one JSON header line, then the
    /// column-major `Ω` matrices and hidden biases as little-endian `f64`.
    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |msg: String| Error::Parse { path: path.to_path_buf(), msg };
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic line {:?}", line.trim_end())));
        }
        line.clear();
        r.read_line(&mut line)?;
        let h: CheckpointHeader = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * h.weights {
            return Err(bad(format!("expected {} weights, found {} bytes", h.weights, bytes.len())));
        }
        let mut vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut dims = vec![h.features.dim()];
        dims.extend(&h.widths);
        dims.push(h.output_dim);
        let expected: usize = dims.windows(2).map(|w| w[0] * w[1]).sum::<usize>() + h.widths.iter().sum::<usize>();
        if expected != h.weights
            || h.output_dim != tri_len(h.features.n)
            || !(h.offset.is_empty() || h.offset.len() == h.output_dim)
        {
            return Err(bad("architecture does not match weight count".into()));
        }
        let omega =
            dims.windows(2).map(|w| DMatrix::from_iterator(w[1], w[0], vals.by_ref().take(w[0] * w[1]))).collect();
        let bias = h.widths.iter().map(|&w| DVector::from_iterator(w, vals.by_ref().take(w))).collect();
        let mut net = Self {
            features: h.features,
            widths: h.widths,
            output_dim: h.output_dim,
            activation: h.activation,
            c_nn: h.c_nn,
            m_bar: h.m_bar,
            offset: DVector::from_vec(h.offset),
            l_m: h.l_m,
            mode: h.mode,
            input_range: h.input_range,
            omega,
            bias,
            sigma: Vec::new(),
        };
        net.renormalize();
        Ok(net)
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_every: usize,
    pub decay: f64,
    pub test_fraction: f64,
    /// Stop once the relative test error falls below this value.
    pub early_stop: f64,
    /// Multiplier on the largest sampled `‖θ − θ₀‖²` giving `m̄_r`.
    pub m_bar_headroom: f64,
    /// Offset the output by the mean training code.
    pub center: bool,
    /// Demanded Lipschitz constant; zero trains an uncertified network at `c_max`.
    pub l_m: f64,
    pub c_max: f64,
    pub c_min: f64,
    /// Train on shuffled targets (a learnability control).
    pub permute_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            widths: vec![100, 100, 100],
            epochs: 1000,
            batch: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            decay_every: 200,
            decay: 0.5,
            test_fraction: 0.2,
            early_stop: 0.08,
            m_bar_headroom: 1.25,
            center: true,
            l_m: 0.5,
            c_max: 1.0,
            c_min: 0.05,
            permute_targets: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.widths.is_empty()
            && !self.widths.contains(&0)
            && self.batch > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.decay > 0.0
            && (0.0..1.0).contains(&self.test_fraction)
            && self.m_bar_headroom >= 1.0
            && self.l_m >= 0.0
            && self.c_max > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Relative RMS error on the training split.
    pub train_error: f64,
    pub test_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub net: SnMlp,
    pub history: Vec<EpochRecord>,
    pub train_error: f64,
    pub test_error: f64,
    pub test_indices: Vec<usize>,
}

impl TrainResult {
    pub fn write_history(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,learning_rate,train_error,test_error")?;
        for r in &self.history {
            writeln!(f, "{},{:e},{:e},{:e}", r.epoch, r.learning_rate, r.train_error, r.test_error)?;
        }
        Ok(())
    }
}

/// Network inputs for every sample of a set.
pub fn sample_features(set: &MetricSampleSet, features: &FeatureMap) -> Vec<DVector<f64>> {
    set.points.iter().map(|p| features.features(&p.x, p.t, &p.x_ref, &p.u_ref)).collect()
}

/// `√(Σ‖θ̂ − θ‖² / Σ‖θ‖²)` over the given columns.
fn relative_error(net: &SnMlp, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    if x.ncols() == 0 {
        return 0.0;
    }
    let (_, out) = net.forward_batch(x);
    ((out - y).norm_squared() / y.norm_squared().max(f64::MIN_POSITIVE)).sqrt()
}

/// Fits a network to the Cholesky codes of the sampled matrices with
/// minibatch SGD with momentum, renormalizing after every step.
pub fn train(set: &MetricSampleSet, features: FeatureMap, cfg: &TrainConfig, seed: u64) -> Result<TrainResult> {
    cfg.validate()?;
    let targets = set.targets();
    let codes: Vec<DVector<f64>> =
        targets.iter().map(|x| cholesky_encode(x).map(|c| c.theta)).collect::<Result<_>>()?;
    let inputs = sample_features(set, &features);
    let n_samples = inputs.len();
    if n_samples < 2 {
        return Err(Error::Config("need at least two samples to train".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut rng);
    let n_test = ((n_samples as f64 * cfg.test_fraction).round() as usize).min(n_samples - 1);
    let (test_idx, train_idx) = order.split_at(n_test);
    let mut target_of: Vec<usize> = (0..n_samples).collect();
    if cfg.permute_targets {
        let mut perm = train_idx.to_vec();
        perm.shuffle(&mut rng);
        for (dst, src) in train_idx.iter().zip(perm) {
            target_of[*dst] = src;
        }
    }
    let columns = |idx: &[usize]| -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DMatrix::from_columns(&idx.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>());
        let y = DMatrix::from_columns(&idx.iter().map(|&i| codes[target_of[i]].clone()).collect::<Vec<_>>());
        (x, y)
    };
    let (x_train, y_train) = columns(train_idx);
    let (x_test, y_test) = columns(test_idx);
    let offset = if cfg.center { y_train.column_mean() } else { DVector::zeros(y_train.nrows()) };
    let residual_sq = y_train.column_iter().map(|c| (c - &offset).norm_squared()).fold(0.0, f64::max);
    let m_bar = (cfg.m_bar_headroom * residual_sq).max(1e-12 * offset.norm_squared().max(1.0));
    let layers = cfg.widths.len();
    let c_nn = if cfg.l_m > 0.0 {
        compute_sn_constant_with_offset(m_bar, offset.norm(), cfg.l_m, layers, cfg.c_max, cfg.c_min)?
    } else {
        cfg.c_max
    };
    // The optimizer sees the error relative to the spread around the offset.
    let mean_sq = y_train.column_iter().map(|c| (c - &offset).norm_squared()).sum::<f64>().max(f64::MIN_POSITIVE)
        / train_idx.len() as f64;

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(2);
    let mut net = SnMlp::new(features, cfg.widths.clone(), c_nn, m_bar, set.summary.mode, &mut init_rng)?;
    net.l_m = cfg.l_m;
    if cfg.center {
        net.offset = offset;
    }
    net.input_range = (0..inputs[0].len())
        .map(|k| inputs.iter().fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], z| [lo.min(z[k]), hi.max(z[k])]))
        .collect();
    let mut vel_o: Vec<DMatrix<f64>> = net.omega.iter().map(|o| DMatrix::zeros(o.nrows(), o.ncols())).collect();
    let mut vel_b: Vec<DVector<f64>> = net.bias.iter().map(|b| DVector::zeros(b.len())).collect();

    let mut history = Vec::new();
    let mut last_good = net.clone();
    let mut lr = cfg.learning_rate;
    let mut batch_order: Vec<usize> = (0..train_idx.len()).collect();
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.decay_every > 0 && epoch % cfg.decay_every == 0 {
            lr *= cfg.decay;
        }
        batch_order.shuffle(&mut rng);
        for chunk in batch_order.chunks(cfg.batch) {
            let xb = DMatrix::from_columns(&chunk.iter().map(|&c| x_train.column(c).into_owned()).collect::<Vec<_>>());
            let yb = DMatrix::from_columns(&chunk.iter().map(|&c| y_train.column(c).into_owned()).collect::<Vec<_>>());
            let scale = 1.0 / (chunk.len() as f64 * mean_sq.max(f64::MIN_POSITIVE));
            let (_, g_o, g_b) = net.gradients(&xb, &yb, scale);
            for (l, g) in g_o.iter().enumerate() {
                vel_o[l] = &vel_o[l] * cfg.momentum - g * lr;
                net.omega[l] += &vel_o[l];
            }
            for (l, g) in g_b.iter().enumerate() {
                vel_b[l] = &vel_b[l] * cfg.momentum - g * lr;
                net.bias[l] += &vel_b[l];
            }
            net.renormalize();
        }
        let train_error = relative_error(&net, &x_train, &y_train);
        let test_error = relative_error(&net, &x_test, &y_test);
        if !train_error.is_finite() || !test_error.is_finite() {
            return Err(Error::Training { epoch, last_good: Some(Box::new(last_good)) });
        }
        last_good = net.clone();
        history.push(EpochRecord { epoch, learning_rate: lr, train_error, test_error });
        if n_test > 0 && test_error <= cfg.early_stop {
            break;
        }
    }
    let last = history.last().copied();
    Ok(TrainResult {
        net,
        train_error: last.map_or(f64::NAN, |r| r.train_error),
        test_error: last.map_or(f64::NAN, |r| r.test_error),
        history,
        test_indices: test_idx.to_vec(),
    })
}

/// Learned matrix at `(x, t)` for the given reference, with an
/// extrapolation flag.
pub fn predict_metric(
    net: &SnMlp,
    x: &DVector<f64>,
    t: f64,
    x_ref: &DVector<f64>,
    u_ref: &DVector<f64>,
) -> (DMatrix<f64>, bool) {
    let z = net.features.features(x, t, x_ref, u_ref);
    (net.predict(&z), net.extrapolates(&z))
}

/// Finite-difference check of the certified derivative bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// Largest `‖∂X/∂xₖ(x) − ∂X/∂xₖ(x′)‖ / ‖x − x′‖`.
    pub measured: f64,
    pub demanded: f64,
    pub passed: bool,
    /// Largest `‖θ(x) − θ(x′)‖ / ‖x − x′‖`.
    pub theta_slope: f64,
    /// `√m̄ C_nn^L`.
    pub theta_slope_bound: f64,
    /// Largest `‖X‖` seen.
    pub max_norm: f64,
    /// Largest hidden-layer deviation `|‖W_ℓ‖ − C_nn|`.
    pub sn_deviation: f64,
}

/// Samples state pairs in `domain` (time and reference fixed per pair)
/// and measures derivative difference quotients by central differences.
pub fn verify_lipschitz<R: Rng>(
    net: &SnMlp,
    domain: &StateBox,
    l_m: f64,
    pairs: usize,
    rng: &mut R,
) -> LipschitzReport {
    let n = net.features.n;
    let h = 1e-4;
    type Pair = (DVector<f64>, DVector<f64>, f64, DVector<f64>, DVector<f64>);
    let draws: Vec<Pair> = (0..pairs)
        .map(|k| {
            let x = domain.sample_state(rng);
            let t = domain.sample_time(rng);
            // Alternate far pairs with close ones that probe curvature.
            let x2 = if k % 2 == 0 {
                domain.sample_state(rng)
            } else {
                let widths = domain.half_widths();
                DVector::from_iterator(
                    n,
                    (0..n).map(|i| x[i] + 0.02 * widths[i].max(1e-3) * rng.random_range(-1.0..=1.0)),
                )
            };
            (x, x2, t, DVector::zeros(n), DVector::zeros(net.features.m))
        })
        .collect();
    let eval = |x: &DVector<f64>, t: f64, xr: &DVector<f64>, ur: &DVector<f64>| {
        net.forward(&net.features.features(x, t, xr, ur))
    };
    let derivs = |x: &DVector<f64>, t: f64, xr: &DVector<f64>, ur: &DVector<f64>| -> Vec<DMatrix<f64>> {
        (0..n)
            .map(|k| {
                let mut p = x.clone();
                let mut q = x.clone();
                p[k] += h;
                q[k] -= h;
                (decode_theta(eval(&p, t, xr, ur).as_slice()) - decode_theta(eval(&q, t, xr, ur).as_slice()))
                    / (2.0 * h)
            })
            .collect()
    };
    let results: Vec<(f64, f64, f64)> = draws
        .par_iter()
        .map(|(x, x2, t, xr, ur)| {
            let dist = (x - x2).norm();
            if dist <= 1e-9 {
                return (0.0, 0.0, 0.0);
            }
            let (d1, d2) = (derivs(x, *t, xr, ur), derivs(x2, *t, xr, ur));
            let second = d1.iter().zip(&d2).map(|(a, b)| sym_norm(&(a - b))).fold(0.0, f64::max) / dist;
            let (th1, th2) = (eval(x, *t, xr, ur), eval(x2, *t, xr, ur));
            let slope = (&th1 - &th2).norm() / dist;
            let norm = sym_norm(&decode_theta(th1.as_slice())).max(sym_norm(&decode_theta(th2.as_slice())));
            (second, slope, norm)
        })
        .collect();
    let measured = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let theta_slope = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let max_norm = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let sn_deviation = (0..net.layers())
        .map(|l| (crate::dynamics::spectral_norm_dense(&net.effective_weight(l)) - net.c_nn).abs())
        .fold(0.0, f64::max);
    LipschitzReport {
        measured,
        demanded: l_m,
        passed: measured <= l_m,
        theta_slope,
        theta_slope_bound: net.slope_bound(),
        max_norm,
        sn_deviation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn encode_examples() {
        let c = cholesky_encode(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(c.theta.as_slice(), &[1.0, 0.0, 1.0]);
        let x = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 2.0]);
        let c = cholesky_encode(&x).unwrap();
        assert_relative_eq!(c.theta, DVector::from_vec(vec![2.0, 1.0, 1.0]), epsilon = 1e-14);
        assert_relative_eq!(cholesky_decode(&c), x, epsilon = 1e-14);
        assert!(cholesky_encode(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
    }

    #[test]
    fn spectral_norm_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        assert_relative_eq!(spectral_norm(&d), 3.0, epsilon = 1e-8);
        let u = DVector::from_vec(vec![2.0, 0.0, 0.0]);
        let v = DVector::from_vec(vec![0.0, 1.0]);
        assert_relative_eq!(spectral_norm(&(&u * v.transpose())), 2.0, epsilon = 1e-8);
        assert_eq!(spectral_norm(&DMatrix::zeros(3, 2)), 0.0);
    }

    #[test]
    fn sn_constant_closed_form_and_cap() {
        let c = compute_sn_constant(1.0, 0.36, 1, 10.0, 1e-6).unwrap();
        // One layer, m̄ = 1: 4C² ≤ L_m.
        assert_relative_eq!(c, 0.36f64.sqrt() / 2.0, epsilon = 1e-9);
        assert_eq!(compute_sn_constant(1.0, 1e12, 3, 0.9, 0.05).unwrap(), 0.9);
        assert!(matches!(compute_sn_constant(1.0, 1e-6, 3, 1.0, 0.05), Err(Error::Certificate(_))));
        assert_relative_eq!(sn_condition(1.0, 1.0, 3), 2.0 + 2.0 * 3.0);
    }

    #[test]
    fn hidden_norms_match_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FeatureMap { n: 2, m: 1, time: None, reference: false };
        let net = SnMlp::new(f, vec![20, 20], 0.7, 2.0, Mode::Control, &mut rng).unwrap();
        for l in 0..2 {
            assert_relative_eq!(crate::dynamics::spectral_norm_dense(&net.effective_weight(l)), 0.7, epsilon = 1e-6);
        }
        let out = crate::dynamics::spectral_norm_dense(&net.effective_weight(2));
        assert_relative_eq!(out, net.output_scale(), epsilon = 1e-6);
    }

    #[test]
    fn normalization_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = FeatureMap { n: 2, m: 1, time: None, reference: false };
        let mut net = SnMlp::new(f, vec![6, 5], 0.8, 3.0, Mode::Control, &mut rng).unwrap();
        let x = DMatrix::from_fn(2, 4, |i, j| 0.1 * (i as f64 + 1.0) * (j as f64 - 1.5));
        let y = DMatrix::from_fn(3, 4, |i, j| 0.3 + 0.1 * i as f64 - 0.05 * j as f64);
        let (_, g_o, g_b) = net.gradients(&x, &y, 1.0);
        let loss = |n: &SnMlp| n.gradients(&x, &y, 1.0).0;
        let h = 1e-6;
        for (l, r, c) in [(0usize, 1usize, 0usize), (1, 2, 3), (2, 0, 4)] {
            let mut p = net.clone();
            p.omega[l][(r, c)] += h;
            p.renormalize();
            let mut q = net.clone();
            q.omega[l][(r, c)] -= h;
            q.renormalize();
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            assert_relative_eq!(g_o[l][(r, c)], fd, epsilon = 1e-6, max_relative = 1e-4);
        }
        net.bias[1][2] += h;
        let up = loss(&net);
        net.bias[1][2] -= 2.0 * h;
        let down = loss(&net);
        assert_relative_eq!(g_b[1][2], (up - down) / (2.0 * h), epsilon = 1e-6, max_relative = 1e-4);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = FeatureMap { n: 2, m: 1, time: Some([0.0, 10.0]), reference: false };
        let net = SnMlp::new(f, vec![8, 8], 0.5, 4.0, Mode::Estimation, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.ckpt");
        net.write_checkpoint(&p).unwrap();
        let back = SnMlp::read_checkpoint(&p).unwrap();
        let z = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        assert_eq!(net.forward(&z), back.forward(&z));
    }
}
