#![allow(dead_code)]

pub mod oracles;

use nalgebra::{DMatrix, DVector};
use nscm::dynamics::{NoiseBounds, SystemModel};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize, half: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-half..half))
}

/// Symmetric positive definite with eigenvalues in roughly `[lo, lo + n]`.
pub fn random_pd<R: Rng>(rng: &mut R, n: usize, lo: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    &a * a.transpose() + DMatrix::identity(n, n) * lo
}

pub fn symmetric<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    (&a + a.transpose()) * 0.5
}

/// Scalar `dx = (a x − k x³ + u) dt + g dW`, `y = x + d ξ`.
pub fn cubic(a: f64, k: f64, g: f64, d: f64) -> SystemModel {
    SystemModel::new("cubic", 1, move |x, _| DVector::from_element(1, a * x[0] - k * x[0].powi(3)))
        .with_actuation(1, |_, _| DMatrix::from_element(1, 1, 1.0))
        .with_control_diffusion(move |_, _| DMatrix::from_element(1, 1, g))
        .with_estimation_diffusion(move |_, _| DMatrix::from_element(1, 1, g))
        .with_measurement(1, |x, _| x.clone(), move |_, _| DMatrix::from_element(1, 1, d))
        .with_bounds(NoiseBounds { g_c: g, g_e: g, d_bar: d, c_bar: 1.0 })
}

/// LTI model with output `C x` and measurement noise `D`.
pub fn lti(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> SystemModel {
    let p = c.nrows();
    let (c1, c2) = (c.clone(), c.clone());
    let d1 = d.clone();
    let mut m = SystemModel::linear(a, b, g)
        .with_measurement(p, move |x, _| &c1 * x, move |_, _| d1.clone())
        .with_measurement_jacobian(move |_, _| c2.clone());
    m.bounds.d_bar = d.norm();
    m.bounds.c_bar = nscm::dynamics::spectral_norm_dense(&c);
    m
}

/// Real parts of the eigenvalues of a square matrix.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

use nscm::mcvstem::{BoundConstants, MetricSampleSet, Mode, SamplePoint, SampleSummary};
use nscm::sdp::SolveStatus;

/// Control sample set with `ν = 1` holding the given metrics.
pub fn synthetic_set(points: Vec<SamplePoint>, metrics: &[DMatrix<f64>]) -> MetricSampleSet {
    let n = points[0].x.len();
    let m = points[0].u_ref.len();
    let zero = BoundConstants { alpha_1: 0.0, alpha_2: 0.0, c_1: 0.0, c_2: 0.0 };
    MetricSampleSet {
        summary: SampleSummary {
            mode: Mode::Control,
            n,
            m,
            samples: points.len(),
            nu: 1.0,
            nu_c: 0.0,
            chi: 1.0,
            alpha: 1.0,
            epsilon: 1.0,
            l_m: 0.0,
            c1: 1.0,
            c2: 0.0,
            c3: 0.0,
            objective: 0.0,
            bound: 0.0,
            constants: zero,
            m_bar: metrics.iter().map(nscm::linalg::max_eig).fold(0.0, f64::max),
            margin: 0.0,
            iterations: 0,
            status: SolveStatus::Optimal,
        },
        wbar: metrics.iter().map(|mm| mm.clone().try_inverse().unwrap()).collect(),
        points,
    }
}

pub fn point(x: DVector<f64>, m: usize) -> SamplePoint {
    let n = x.len();
    SamplePoint { x, t: 0.0, x_ref: DVector::zeros(n), u_ref: DVector::zeros(m) }
}

/// Largest eigenvalue of a symmetric 2×2 (or 1×1) matrix in closed form.
pub fn max_eig_small(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 1 {
        return a[(0, 0)];
    }
    let (p, q, r) = (a[(0, 0)], a[(0, 1)], a[(1, 1)]);
    0.5 * (p + r) + (0.25 * (p - r).powi(2) + q * q).sqrt()
}
