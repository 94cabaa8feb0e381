//! Mach-scheduled longitudinal missile model used as the benchmark system.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{estimate_c_bar, NoiseBounds, StateBox, SystemModel};
use crate::error::{Error, Result};

const DEFAULT_CONFIG: &str = include_str!("../../config/rocket.toml");
const DEG: f64 = 180.0 / std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeroCoefficients {
    pub a_n: f64,
    pub b_n: f64,
    pub c_n: f64,
    pub d_n: f64,
    pub a_m: f64,
    pub b_m: f64,
    pub c_m: f64,
    pub d_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParameters {
    pub p0: f64,
    pub area: f64,
    pub mass: f64,
    pub sound_speed: f64,
    pub diameter: f64,
    pub inertia: f64,
    pub gravity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachSchedule {
    pub start: f64,
    pub end: f64,
    pub final_time: f64,
}

impl MachSchedule {
    /// Linear ramp, held constant outside `[0, final_time]`.
    pub fn at(&self, t: f64) -> f64 {
        let s = if self.final_time > 0.0 { (t / self.final_time).clamp(0.0, 1.0) } else { 1.0 };
        self.start + (self.end - self.start) * s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevels {
    pub control_diffusion: f64,
    pub estimation_diffusion: f64,
    pub measurement_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CBarSampling {
    pub pairs: usize,
    pub seed: u64,
}

/// Contents of a benchmark coefficient file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RocketConfig {
    pub name: String,
    pub augmentation_gain: [f64; 2],
    pub aero: AeroCoefficients,
    pub vehicle: VehicleParameters,
    pub mach: MachSchedule,
    pub noise: NoiseLevels,
    pub state_box: StateBox,
    pub target_box: Option<ParameterBox>,
    pub c_bar: CBarSampling,
}

impl Default for RocketConfig {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG).expect("bundled rocket config parses")
    }
}

impl RocketConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path)?;
        toml::from_str::<Self>(&s)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })
            .and_then(|c| c.validate().map(|_| c))
    }

    pub fn validate(&self) -> Result<()> {
        self.state_box.validate()?;
        if self.state_box.dim() != 2 {
            return Err(Error::Config("rocket state box must be two-dimensional".into()));
        }
        let v = &self.vehicle;
        for (name, val) in [
            ("vehicle.mass", v.mass),
            ("vehicle.sound_speed", v.sound_speed),
            ("vehicle.inertia", v.inertia),
            ("vehicle.gravity", v.gravity),
        ] {
            if !(val > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let nz = &self.noise;
        if nz.control_diffusion < 0.0 || nz.estimation_diffusion < 0.0 || nz.measurement_noise < 0.0 {
            return Err(Error::Config("noise levels must be nonnegative".into()));
        }
        if let Some(tb) = &self.target_box {
            if tb.lower.len() != 3 || tb.upper.len() != 3 {
                return Err(Error::Config("target_box must cover (aoa, q, u)".into()));
            }
        }
        Ok(())
    }

    /// Coefficient groups `(K_a, K_q, K_z)`.
    pub fn gains(&self) -> (f64, f64, f64) {
        let v = &self.vehicle;
        let qs = 0.7 * v.p0 * v.area;
        (qs / (v.mass * v.sound_speed), qs * v.diameter / v.inertia, qs / (v.mass * v.gravity))
    }
}

/// Evaluated airframe maps. Angles are in radians at the interface.
#[derive(Debug, Clone)]
pub struct Airframe {
    pub config: RocketConfig,
}

impl Airframe {
    pub fn mach(&self, t: f64) -> f64 {
        self.config.mach.at(t)
    }

    /// Normal-force coefficient without the fin term, and its slope per rad.
    fn cn(&self, aoa: f64, mach: f64) -> (f64, f64) {
        let c = &self.config.aero;
        let a = aoa * DEG;
        let lin = c.c_n * (2.0 - mach / 3.0);
        (c.a_n * a.powi(3) + c.b_n * a * a.abs() + lin * a, DEG * (3.0 * c.a_n * a * a + 2.0 * c.b_n * a.abs() + lin))
    }

    fn cm(&self, aoa: f64, mach: f64) -> (f64, f64) {
        let c = &self.config.aero;
        let a = aoa * DEG;
        let lin = c.c_m * (-7.0 + 8.0 * mach / 3.0);
        (c.a_m * a.powi(3) + c.b_m * a * a.abs() + lin * a, DEG * (3.0 * c.a_m * a * a + 2.0 * c.b_m * a.abs() + lin))
    }

    fn fin(&self, x: &DVector<f64>) -> f64 {
        let k = self.config.augmentation_gain;
        k[0] * x[0] + k[1] * x[1]
    }

    /// Drift including the augmentation fin command.
    pub fn drift(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let (ka, kq, _) = self.config.gains();
        let mach = self.mach(t);
        let (cn, _) = self.cn(x[0], mach);
        let (cm, _) = self.cm(x[0], mach);
        let mut f = DVector::from_vec(vec![ka * mach * cn * x[0].cos() + x[1], kq * mach * mach * cm]);
        f += self.actuation(x, t) * self.fin(x);
        f
    }

    /// Fin effectiveness column (per rad of deflection).
    pub fn actuation(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let (ka, kq, _) = self.config.gains();
        let c = &self.config.aero;
        let mach = self.mach(t);
        DMatrix::from_column_slice(2, 1, &[ka * mach * c.d_n * DEG * x[0].cos(), kq * mach * mach * c.d_m * DEG])
    }

    /// `∂(f + B u)/∂x`.
    pub fn closed_jacobian(&self, x: &DVector<f64>, t: f64, u: &DVector<f64>) -> DMatrix<f64> {
        let (ka, kq, _) = self.config.gains();
        let c = &self.config.aero;
        let k = self.config.augmentation_gain;
        let mach = self.mach(t);
        let (cn, dcn) = self.cn(x[0], mach);
        let (_, dcm) = self.cm(x[0], mach);
        let delta = self.fin(x) + u[0];
        let b = self.actuation(x, t);
        let mut j = DMatrix::zeros(2, 2);
        j[(0, 0)] = ka * mach * (dcn * x[0].cos() - cn * x[0].sin()) - ka * mach * c.d_n * DEG * x[0].sin() * delta;
        j[(0, 1)] = 1.0;
        j[(1, 0)] = kq * mach * mach * dcm;
        // B K from the augmentation fin command.
        for r in 0..2 {
            for col in 0..2 {
                j[(r, col)] += b[(r, 0)] * k[col];
            }
        }
        j
    }

    /// Pitch rate and specific normal force (g).
    pub fn measurement(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let (_, _, kz) = self.config.gains();
        let mach = self.mach(t);
        let (cn, _) = self.cn(x[0], mach);
        let fin = self.config.aero.d_n * DEG * self.fin(x);
        DVector::from_vec(vec![x[1], kz * mach * mach * (cn + fin)])
    }

    pub fn measurement_jacobian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let (_, _, kz) = self.config.gains();
        let mach = self.mach(t);
        let (_, dcn) = self.cn(x[0], mach);
        let k = self.config.augmentation_gain;
        let scale = kz * mach * mach;
        let fin = self.config.aero.d_n * DEG;
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, scale * (dcn + fin * k[0]), scale * fin * k[1]])
    }
}

/// Builds the benchmark system from a coefficient set. `c_bar` is estimated
/// by sampling state pairs over the configured box.
pub fn rocket_benchmark(config: &RocketConfig) -> Result<SystemModel> {
    config.validate()?;
    let air = Arc::new(Airframe { config: config.clone() });
    let n = 2;
    let p = 2;
    let nz = config.noise;
    let (a1, a2, a3, a4, a5) = (air.clone(), air.clone(), air.clone(), air.clone(), air.clone());
    let mut model = SystemModel::new(config.name.clone(), n, move |x, t| a1.drift(x, t))
        .with_actuation(1, move |x, t| a2.actuation(x, t))
        .with_closed_jacobian(move |x, t, u| a3.closed_jacobian(x, t, u))
        .with_control_diffusion(move |_, _| DMatrix::identity(n, n) * nz.control_diffusion)
        .with_estimation_diffusion(move |_, _| DMatrix::identity(n, n) * nz.estimation_diffusion)
        .with_measurement(
            p,
            move |x, t| a4.measurement(x, t),
            move |_, _| DMatrix::identity(p, p) * nz.measurement_noise,
        )
        .with_measurement_jacobian(move |x, t| a5.measurement_jacobian(x, t))
        // The a|a| aerodynamic terms bend the Jacobian at zero angle of attack.
        .with_kinks(|x, x_ref| {
            if x[0] != x_ref[0] && x[0] * x_ref[0] < 0.0 {
                vec![x_ref[0] / (x_ref[0] - x[0])]
            } else {
                Vec::new()
            }
        })
        .time_varying(true);
    let sqrt_n = (n as f64).sqrt();
    model.bounds = NoiseBounds {
        g_c: nz.control_diffusion * sqrt_n,
        g_e: nz.estimation_diffusion * sqrt_n,
        d_bar: nz.measurement_noise * (p as f64).sqrt(),
        c_bar: 0.0,
    };
    let domain = sampling_box(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.c_bar.seed);
    model.bounds.c_bar = estimate_c_bar(&model, &domain, config.c_bar.pairs, &mut rng)?;
    Ok(model)
}

/// State box with the Mach-schedule time interval attached.
pub fn sampling_box(config: &RocketConfig) -> Result<StateBox> {
    let mut b = config.state_box.clone();
    if b.time.is_none() {
        b = b.with_time(0.0, config.mach.final_time)?;
    }
    b.validate()?;
    Ok(b)
}
