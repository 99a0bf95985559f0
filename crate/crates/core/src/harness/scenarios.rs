//! Benchmark scenarios: coordinated-turn targets observed by bearing/range,
//! TDOA or range sensors, the scalar growth model and a constant-velocity
//! range/bearing tracker.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::ssm::{sample_gaussian, simulate, GaussianBelief, ProcessNoise, StateSpaceModel, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    TurnRangeBearing,
    TurnTdoa,
    TurnRange,
    #[serde(rename = "growth-1d")]
    Growth1d,
    CvRangeBearing,
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::TurnRangeBearing => "turn-range-bearing",
            ScenarioKind::TurnTdoa => "turn-tdoa",
            ScenarioKind::TurnRange => "turn-range",
            ScenarioKind::Growth1d => "growth-1d",
            ScenarioKind::CvRangeBearing => "cv-range-bearing",
        }
    }
}

/// Scenario parameters. Fields left unset take the scenario's base value.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: ScenarioKind,
    /// Number of time steps.
    pub k: usize,
    /// Measurement count (bearing/range, range) or sensor count (TDOA).
    pub m: Option<usize>,
    pub x0: Option<Vec<f64>>,
    /// Sampling period ζ.
    pub zeta: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub sigma_theta: f64,
    pub sigma_rho: f64,
    /// Per-sensor TOA variance.
    pub sigma2: f64,
    /// Measurement variance for the range-only and growth scenarios.
    pub r_var: Option<f64>,
    pub gamma_shape: f64,
    pub gamma_scale: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: ScenarioKind::TurnRangeBearing,
            k: 200,
            m: None,
            x0: None,
            zeta: 1.0,
            eta1: 0.1,
            eta2: 1.75e-4,
            sigma_theta: 3.5e-3,
            sigma_rho: 10.0,
            sigma2: 10.0,
            r_var: None,
            gamma_shape: 3.0,
            gamma_scale: 2.0,
        }
    }
}

impl ScenarioConfig {
    pub fn new(name: ScenarioKind) -> Self {
        let mut c = Self { name, ..Self::default() };
        if name == ScenarioKind::Growth1d {
            c.k = 1500;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("scenario.k must be positive".into()));
        }
        let pos = [self.zeta, self.eta1, self.eta2, self.sigma_theta, self.sigma_rho, self.sigma2, self.gamma_shape, self.gamma_scale];
        if pos.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("scenario noise and timing parameters must be positive".into()));
        }
        if let Some(r) = self.r_var {
            if !(r > 0.0) {
                return Err(Error::Config("scenario.r_var must be positive".into()));
            }
        }
        match (self.name, self.m) {
            (ScenarioKind::TurnRangeBearing, Some(m)) if m < 2 || m % 2 != 0 => {
                Err(Error::Config("turn-range-bearing needs an even m >= 2".into()))
            }
            (ScenarioKind::TurnTdoa, Some(m)) if m < 2 => Err(Error::Config("turn-tdoa needs at least 2 sensors".into())),
            (ScenarioKind::TurnRange, Some(0)) => Err(Error::Config("turn-range needs m >= 1".into())),
            (ScenarioKind::Growth1d | ScenarioKind::CvRangeBearing, Some(_)) => {
                Err(Error::Config(format!("{} has a fixed measurement dimension", self.name.name())))
            }
            _ => Ok(()),
        }
    }
}

/// A built scenario: model, true initial state and filter initialisation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub model: StateSpaceModel,
    /// Prior mean of the initial state.
    pub x0: DVector<f64>,
    /// Filter initial covariance.
    pub p0: DMatrix<f64>,
    /// True initial state is drawn from `N(x0, p0)` rather than fixed at `x0`.
    pub random_x0: bool,
    /// Filter initial mean is drawn from `N(x0, p0)` per replicate.
    pub random_init: bool,
    pub pos_idx: Vec<usize>,
    pub sensors: Vec<(f64, f64)>,
}

impl Scenario {
    /// Filter prior for one replicate.
    pub fn filter_prior(&self, seed: u64) -> Result<GaussianBelief> {
        let mean = if self.random_init {
            let mut rng = stream_rng(seed, 5);
            sample_gaussian(&self.x0, &self.p0, &mut rng)?
        } else {
            self.x0.clone()
        };
        GaussianBelief::new(mean, self.p0.clone())
    }

    pub fn true_initial_state(&self, seed: u64) -> Result<DVector<f64>> {
        if self.random_x0 {
            let mut rng = stream_rng(seed, 6);
            sample_gaussian(&self.x0, &self.p0, &mut rng)
        } else {
            Ok(self.x0.clone())
        }
    }
}

/// Sensor `i` (0-based) of the zig-zag layout.
pub fn zigzag_sensor(i: usize) -> (f64, f64) {
    (350.0 * i as f64, 350.0 * (i % 2) as f64)
}

/// Bearing sensor `j` (1-based) of the bearing/range layout.
fn bearing_sensor(j: usize) -> (f64, f64) {
    (350.0 * (j - 1) as f64, 350.0 * (j % 2) as f64)
}

/// Coordinated-turn process noise covariance.
pub fn turn_q(zeta: f64, eta1: f64, eta2: f64) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(5, 5);
    let blk = [[zeta.powi(3) / 3.0, zeta.powi(2) / 2.0], [zeta.powi(2) / 2.0, zeta]];
    for off in [0, 2] {
        for a in 0..2 {
            for b in 0..2 {
                q[(off + a, off + b)] = eta1 * blk[a][b];
            }
        }
    }
    q[(4, 4)] = eta2;
    q
}

/// `(sin(wζ)/w, (1 − cos(wζ))/w)` and their derivatives in `w`.
fn turn_coeffs(w: f64, z: f64) -> (f64, f64, f64, f64) {
    if w.abs() < 1e-4 {
        let w2 = w * w;
        (
            z - z.powi(3) * w2 / 6.0,
            z * z * w / 2.0 - z.powi(4) * w * w2 / 24.0,
            -z.powi(3) * w / 3.0,
            z * z / 2.0 - z.powi(4) * w2 / 8.0,
        )
    } else {
        let (s, c) = (w * z).sin_cos();
        (s / w, (1.0 - c) / w, (z * c * w - s) / (w * w), (z * s * w - (1.0 - c)) / (w * w))
    }
}

/// Coordinated-turn transition for state `[a, ȧ, b, ḃ, ω]`.
pub fn turn_f(zeta: f64, x: &[f64], out: &mut [f64]) {
    let w = x[4];
    let (sw, cw, _, _) = turn_coeffs(w, zeta);
    let (s, c) = (w * zeta).sin_cos();
    out[0] = x[0] + sw * x[1] - cw * x[3];
    out[1] = c * x[1] - s * x[3];
    out[2] = cw * x[1] + x[2] + sw * x[3];
    out[3] = s * x[1] + c * x[3];
    out[4] = w;
}

pub fn turn_jacobian(zeta: f64, x: &DVector<f64>) -> DMatrix<f64> {
    let w = x[4];
    let (sw, cw, dsw, dcw) = turn_coeffs(w, zeta);
    let (s, c) = (w * zeta).sin_cos();
    let mut j = DMatrix::zeros(5, 5);
    j[(0, 0)] = 1.0;
    j[(0, 1)] = sw;
    j[(0, 3)] = -cw;
    j[(0, 4)] = dsw * x[1] - dcw * x[3];
    j[(1, 1)] = c;
    j[(1, 3)] = -s;
    j[(1, 4)] = -zeta * s * x[1] - zeta * c * x[3];
    j[(2, 1)] = cw;
    j[(2, 2)] = 1.0;
    j[(2, 3)] = sw;
    j[(2, 4)] = dcw * x[1] + dsw * x[3];
    j[(3, 1)] = s;
    j[(3, 3)] = c;
    j[(3, 4)] = zeta * c * x[1] - zeta * s * x[3];
    j[(4, 4)] = 1.0;
    j
}

fn dist(a: f64, b: f64, s: (f64, f64)) -> (f64, f64, f64) {
    let da = a - s.0;
    let db = b - s.1;
    (da, db, (da * da + db * db).sqrt().max(1e-9))
}

/// TDOA covariance: `σ₁²` everywhere plus `σⱼ₊₁²` on the diagonal.
pub fn tdoa_r(sigma2: &[f64]) -> DMatrix<f64> {
    let m = sigma2.len() - 1;
    DMatrix::from_fn(m, m, |i, j| sigma2[0] + if i == j { sigma2[i + 1] } else { 0.0 })
}

fn turn_x0(cfg: &ScenarioConfig, default: [f64; 5]) -> Result<DVector<f64>> {
    match &cfg.x0 {
        Some(v) if v.len() == 5 => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(Error::Config(format!("x0 must have 5 entries, found {}", v.len()))),
        None => Ok(DVector::from_column_slice(&default)),
    }
}

/// Builds the model for a scenario.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let zeta = cfg.zeta;
    match cfg.name {
        ScenarioKind::TurnRangeBearing => {
            let m = cfg.m.unwrap_or(6);
            let half = m / 2;
            let bs: Vec<(f64, f64)> = (1..=half).map(bearing_sensor).collect();
            let rs: Vec<(f64, f64)> = (0..half).map(zigzag_sensor).collect();
            let q = turn_q(zeta, cfg.eta1, cfg.eta2);
            let r = DMatrix::from_fn(m, m, |i, j| {
                if i != j {
                    0.0
                } else if i < half {
                    cfg.sigma_theta.powi(2)
                } else {
                    cfg.sigma_rho.powi(2)
                }
            });
            let (bs2, rs2) = (bs.clone(), rs.clone());
            let (bs3, rs3) = (bs.clone(), rs.clone());
            let model = StateSpaceModel::new(5, m, move |x, o| turn_f(zeta, x, o), move |x, o| {
                for (j, s) in bs2.iter().enumerate() {
                    o[j] = (x[2] - s.1).atan2(x[0] - s.0);
                }
                for (j, s) in rs2.iter().enumerate() {
                    o[half + j] = dist(x[0], x[2], *s).2;
                }
            }, q.clone(), r)?
            .with_jacobians(move |x| turn_jacobian(zeta, x), move |x| {
                let mut h = DMatrix::zeros(2 * half, 5);
                for (j, s) in bs3.iter().enumerate() {
                    let (da, db, d) = dist(x[0], x[2], *s);
                    h[(j, 0)] = -db / (d * d);
                    h[(j, 2)] = da / (d * d);
                }
                for (j, s) in rs3.iter().enumerate() {
                    let (da, db, d) = dist(x[0], x[2], *s);
                    h[(half + j, 0)] = da / d;
                    h[(half + j, 2)] = db / d;
                }
                h
            });
            let mut sensors = bs;
            sensors.extend(rs);
            Ok(Scenario {
                kind: cfg.name,
                model,
                x0: turn_x0(cfg, [-10000.0, 10.0, 5000.0, -5.0, -0.0524])?,
                p0: q * 100.0,
                random_x0: false,
                random_init: true,
                pos_idx: vec![0, 2],
                sensors,
            })
        }
        ScenarioKind::TurnTdoa => {
            let ns = cfg.m.unwrap_or(10);
            let sensors: Vec<(f64, f64)> = (0..ns).map(zigzag_sensor).collect();
            let q = turn_q(zeta, cfg.eta1, cfg.eta2);
            let r = tdoa_r(&vec![cfg.sigma2; ns]);
            let (s2, s3) = (sensors.clone(), sensors.clone());
            let model = StateSpaceModel::new(5, ns - 1, move |x, o| turn_f(zeta, x, o), move |x, o| {
                let d1 = dist(x[0], x[2], s2[0]).2;
                for j in 1..s2.len() {
                    o[j - 1] = d1 - dist(x[0], x[2], s2[j]).2;
                }
            }, q.clone(), r)?
            .with_jacobians(move |x| turn_jacobian(zeta, x), move |x| {
                let mut h = DMatrix::zeros(s3.len() - 1, 5);
                let (a1, b1, d1) = dist(x[0], x[2], s3[0]);
                for j in 1..s3.len() {
                    let (da, db, d) = dist(x[0], x[2], s3[j]);
                    h[(j - 1, 0)] = a1 / d1 - da / d;
                    h[(j - 1, 2)] = b1 / d1 - db / d;
                }
                h
            });
            Ok(Scenario {
                kind: cfg.name,
                model,
                x0: turn_x0(cfg, [0.0, 1.0, 0.0, -1.0, -0.0524])?,
                p0: q,
                random_x0: false,
                random_init: true,
                pos_idx: vec![0, 2],
                sensors,
            })
        }
        ScenarioKind::TurnRange => {
            let m = cfg.m.unwrap_or(4);
            let sensors: Vec<(f64, f64)> = (0..m).map(zigzag_sensor).collect();
            let q = turn_q(zeta, cfg.eta1, cfg.eta2);
            let r = DMatrix::identity(m, m) * cfg.r_var.unwrap_or(4.0);
            let (s2, s3) = (sensors.clone(), sensors.clone());
            let model = StateSpaceModel::new(5, m, move |x, o| turn_f(zeta, x, o), move |x, o| {
                for (j, s) in s2.iter().enumerate() {
                    o[j] = dist(x[0], x[2], *s).2;
                }
            }, q.clone(), r)?
            .with_jacobians(move |x| turn_jacobian(zeta, x), move |x| {
                let mut h = DMatrix::zeros(s3.len(), 5);
                for (j, s) in s3.iter().enumerate() {
                    let (da, db, d) = dist(x[0], x[2], *s);
                    h[(j, 0)] = da / d;
                    h[(j, 2)] = db / d;
                }
                h
            });
            Ok(Scenario {
                kind: cfg.name,
                model,
                x0: turn_x0(cfg, [0.0, 10.0, 0.0, -5.0, 3.0 * PI / 180.0])?,
                p0: q,
                random_x0: false,
                random_init: true,
                pos_idx: vec![0, 2],
                sensors,
            })
        }
        ScenarioKind::Growth1d => {
            let (shape, scale) = (cfg.gamma_shape, cfg.gamma_scale);
            let q = DMatrix::from_element(1, 1, shape * scale * scale);
            let r = DMatrix::from_element(1, 1, cfg.r_var.unwrap_or(5.0));
            let model = StateSpaceModel::new(1, 1, |x, o| o[0] = 1.0 + 0.5 * x[0], |x, o| o[0] = 0.2 * x[0] * x[0], q, r)?
                .with_timed_transition(|k, x, o| o[0] = growth_f(k, x[0]))
                .with_jacobians(|_| DMatrix::from_element(1, 1, 0.5), |x| DMatrix::from_element(1, 1, 0.4 * x[0]))
                .with_process_noise(ProcessNoise::Gamma { shape, scale });
            let x0 = match &cfg.x0 {
                Some(v) if v.len() == 1 => DVector::from_column_slice(v),
                Some(_) => return Err(Error::Config("growth-1d x0 must have 1 entry".into())),
                None => DVector::from_element(1, 0.1),
            };
            Ok(Scenario {
                kind: cfg.name,
                model,
                x0,
                p0: DMatrix::from_element(1, 1, 2f64.sqrt()),
                random_x0: true,
                random_init: false,
                pos_idx: vec![0],
                sensors: vec![],
            })
        }
        ScenarioKind::CvRangeBearing => {
            let dt = zeta;
            let g = DMatrix::from_row_slice(4, 2, &[dt * dt / 2.0, 0.0, 0.0, dt * dt / 2.0, dt, 0.0, 0.0, dt]);
            let q = &g * g.transpose();
            let r = DMatrix::from_diagonal(&DVector::from_column_slice(&[8.0, 0.002]));
            let model = StateSpaceModel::new(4, 2, move |x, o| {
                o[0] = x[0] + dt * x[2];
                o[1] = x[1] + dt * x[3];
                o[2] = x[2];
                o[3] = x[3];
            }, |x, o| {
                o[0] = (x[0] * x[0] + x[1] * x[1]).sqrt();
                o[1] = x[1].atan2(x[0]);
            }, q, r)?
            .with_jacobians(move |_| {
                let mut f = DMatrix::identity(4, 4);
                f[(0, 2)] = dt;
                f[(1, 3)] = dt;
                f
            }, |x| {
                let (_, _, d) = dist(x[0], x[1], (0.0, 0.0));
                DMatrix::from_row_slice(2, 4, &[x[0] / d, x[1] / d, 0.0, 0.0, -x[1] / (d * d), x[0] / (d * d), 0.0, 0.0])
            });
            let x0 = match &cfg.x0 {
                Some(v) if v.len() == 4 => DVector::from_column_slice(v),
                Some(_) => return Err(Error::Config("cv-range-bearing x0 must have 4 entries".into())),
                None => DVector::from_column_slice(&[80.0, 5.0, 0.0, 5.0]),
            };
            Ok(Scenario {
                kind: cfg.name,
                model,
                x0,
                p0: DMatrix::from_diagonal(&DVector::from_column_slice(&[25.0, 25.0, 1.0, 1.0])),
                random_x0: true,
                random_init: false,
                pos_idx: vec![0, 1],
                sensors: vec![(0.0, 0.0)],
            })
        }
    }
}

/// Scalar growth transition into step `k`.
pub fn growth_f(k: usize, x: f64) -> f64 {
    1.0 + (0.04 * PI * k as f64).sin() + 0.5 * x
}

/// Builds the scenario and simulates a clean trajectory.
pub fn make_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<(Scenario, Trajectory)> {
    let sc = build_scenario(cfg)?;
    let x0 = sc.true_initial_state(seed)?;
    let traj = simulate(&sc.model, &x0, cfg.k, seed)?;
    Ok((sc, traj))
}

/// Draws a uniform value in `[lo, hi]`, returning `lo` when the range is empty.
pub(crate) fn uniform_in<G: Rng + ?Sized>(rng: &mut G, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}
