//! State-space model abstraction, Gaussian beliefs and PSD utilities.
//!
//! Models are additive-noise, time-invariant maps
//!
//! ```text
//! x_k = f(x_{k-1}) + q_{k-1}
//! y_k = h(x_k) + r_k
//! ```
//!
//! with optional per-step overrides for Q and R. The maps are stored in a
//! slice form (`fn(&[f64], &mut [f64])`) so particle methods can evaluate
//! them without allocating.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Vector map evaluated into a caller-provided buffer.
pub type VecMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Jacobian of a vector map at a point.
pub type JacMap = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// Per-step covariance override; `None` falls back to the constant matrix.
/// Transition map that also receives the index of the step being entered.
pub type TimedVecMap = Arc<dyn Fn(usize, &[f64], &mut [f64]) + Send + Sync>;

pub type CovSchedule = Arc<dyn Fn(usize) -> Option<DMatrix<f64>> + Send + Sync>;

/// Symmetric part of `m` with negative eigenvalues clamped to zero.
///
/// Matrices that are already positive definite after symmetrisation are
/// returned without an eigendecomposition.
pub fn symmetrize_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::NotSquare(m.nrows(), m.ncols()));
    }
    let sym = (m + m.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPsd("non-finite entries".into()));
    }
    if sym.nrows() == 0 || sym.clone().cholesky().is_some() {
        return Ok(sym);
    }
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(sym);
    }
    let norm = sym.norm();
    if -min > 1e-8 * norm.max(f64::MIN_POSITIVE) {
        log::debug!("symmetrize_psd: clamped eigenvalue {min:e} (norm {norm:e})");
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// A factor `S` with `S Sᵀ = M` for a PSD matrix `M`.
///
/// Cholesky is used when it succeeds; singular PSD matrices fall back to
/// `V √Λ` from the symmetric eigendecomposition.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::NotSquare(m.nrows(), m.ncols()));
    }
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.l());
    }
    let sym = symmetrize_psd(m)?;
    if let Some(ch) = sym.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&s);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Cholesky);
    }
    Ok(out)
}

/// Checks symmetry and positive semi-definiteness within the library tolerances.
pub fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NotSquare(m.nrows(), m.ncols()));
    }
    let norm = m.norm();
    let asym = (m - m.transpose()).norm();
    if asym > 1e-9 * norm.max(1.0) {
        return Err(Error::NotPsd(format!("{what} not symmetric (asymmetry {asym:e})")));
    }
    if m.nrows() == 0 {
        return Ok(());
    }
    let min = SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.min();
    if min < -1e-9 * norm.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd(format!("{what} has eigenvalue {min:e}")));
    }
    Ok(())
}

/// Mean and covariance of a Gaussian density.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let b = Self { mean, cov };
        b.validate()?;
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Verifies dimension consistency, symmetry and PSD-ness.
    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if self.cov.nrows() != n || self.cov.ncols() != n {
            return Err(Error::Dimension(format!(
                "mean has length {n} but covariance is {}x{}",
                self.cov.nrows(),
                self.cov.ncols()
            )));
        }
        check_psd(&self.cov, "belief covariance")
    }
}

/// Distribution of the additive process noise used when simulating.
///
/// Filters always use the second moment `Q`; particle methods and the
/// simulator draw from this distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProcessNoise {
    Gaussian,
    /// Independent Gamma(shape, scale) draws per component (non-zero mean).
    Gamma { shape: f64, scale: f64 },
}

/// Additive-noise nonlinear state-space model.
#[derive(Clone)]
pub struct StateSpaceModel {
    pub n: usize,
    pub m: usize,
    transition: VecMap,
    timed_transition: Option<TimedVecMap>,
    observation: VecMap,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    q_sqrt: DMatrix<f64>,
    r_sqrt: DMatrix<f64>,
    transition_jacobian: Option<JacMap>,
    observation_jacobian: Option<JacMap>,
    pub process_noise: ProcessNoise,
    q_schedule: Option<CovSchedule>,
    r_schedule: Option<CovSchedule>,
}

impl fmt::Debug for StateSpaceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateSpaceModel")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("q", &self.q)
            .field("r", &self.r)
            .field("process_noise", &self.process_noise)
            .field("has_transition_jacobian", &self.transition_jacobian.is_some())
            .field("has_observation_jacobian", &self.observation_jacobian.is_some())
            .finish()
    }
}

impl StateSpaceModel {
    pub fn new<F, H>(n: usize, m: usize, f: F, h: H, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self>
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        H: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if n == 0 || m == 0 {
            return Err(Error::InvalidParameter("n and m must be positive".into()));
        }
        if q.shape() != (n, n) {
            return Err(Error::Dimension(format!("Q is {:?}, expected ({n}, {n})", q.shape())));
        }
        if r.shape() != (m, m) {
            return Err(Error::Dimension(format!("R is {:?}, expected ({m}, {m})", r.shape())));
        }
        check_psd(&q, "Q")?;
        check_psd(&r, "R")?;
        let q_sqrt = psd_sqrt(&q)?;
        let r_sqrt = psd_sqrt(&r)?;
        Ok(Self {
            n,
            m,
            transition: Arc::new(f),
            timed_transition: None,
            observation: Arc::new(h),
            q,
            r,
            q_sqrt,
            r_sqrt,
            transition_jacobian: None,
            observation_jacobian: None,
            process_noise: ProcessNoise::Gaussian,
            q_schedule: None,
            r_schedule: None,
        })
    }

    pub fn with_jacobians<FJ, HJ>(mut self, fj: FJ, hj: HJ) -> Self
    where
        FJ: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
        HJ: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.transition_jacobian = Some(Arc::new(fj));
        self.observation_jacobian = Some(Arc::new(hj));
        self
    }

    pub fn with_observation_jacobian<HJ>(mut self, hj: HJ) -> Self
    where
        HJ: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.observation_jacobian = Some(Arc::new(hj));
        self
    }

    /// Replaces the transition by a step-dependent map `f(k, x)`.
    pub fn with_timed_transition<F>(mut self, f: F) -> Self
    where
        F: Fn(usize, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        self.timed_transition = Some(Arc::new(f));
        self
    }

    pub fn with_process_noise(mut self, noise: ProcessNoise) -> Self {
        self.process_noise = noise;
        self
    }

    pub fn with_q_schedule(mut self, s: CovSchedule) -> Self {
        self.q_schedule = Some(s);
        self
    }

    pub fn with_r_schedule(mut self, s: CovSchedule) -> Self {
        self.r_schedule = Some(s);
        self
    }

    /// Same maps and Q with a different measurement covariance.
    pub fn with_r(&self, r: DMatrix<f64>) -> Result<Self> {
        if r.shape() != (self.m, self.m) {
            return Err(Error::Dimension("replacement R has the wrong shape".into()));
        }
        check_psd(&r, "R")?;
        let mut out = self.clone();
        out.r_sqrt = psd_sqrt(&r)?;
        out.r = r;
        Ok(out)
    }

    /// Transition into step `k`.
    pub fn f_at_into(&self, k: usize, x: &[f64], out: &mut [f64]) {
        match &self.timed_transition {
            Some(t) => t(k, x, out),
            None => (self.transition)(x, out),
        }
    }

    pub fn f_at(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        self.f_at_into(k, x.as_slice(), out.as_mut_slice());
        out
    }

    pub fn f_into(&self, x: &[f64], out: &mut [f64]) {
        (self.transition)(x, out)
    }

    pub fn h_into(&self, x: &[f64], out: &mut [f64]) {
        (self.observation)(x, out)
    }

    pub fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        (self.transition)(x.as_slice(), out.as_mut_slice());
        out
    }

    pub fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        (self.observation)(x.as_slice(), out.as_mut_slice());
        out
    }

    pub fn has_jacobians(&self) -> bool {
        self.transition_jacobian.is_some() && self.observation_jacobian.is_some()
    }

    pub fn jac_f(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.transition_jacobian
            .as_ref()
            .map(|j| j(x))
            .ok_or(Error::MissingJacobian("transition"))
    }

    pub fn jac_h(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.observation_jacobian
            .as_ref()
            .map(|j| j(x))
            .ok_or(Error::MissingJacobian("observation"))
    }

    /// Process noise covariance in force for the transition into step `k`.
    pub fn q_at(&self, k: usize) -> DMatrix<f64> {
        self.q_schedule.as_ref().and_then(|s| s(k)).unwrap_or_else(|| self.q.clone())
    }

    /// Measurement noise covariance in force at step `k`.
    pub fn r_at(&self, k: usize) -> DMatrix<f64> {
        self.r_schedule.as_ref().and_then(|s| s(k)).unwrap_or_else(|| self.r.clone())
    }

    /// True when every off-diagonal entry of R is exactly zero.
    pub fn r_is_diagonal(&self) -> bool {
        is_diagonal(&self.r)
    }

    /// Sampler for the process noise of the transition into step `k`.
    pub fn process_noise_sampler(&self, k: usize) -> NoiseSampler {
        match self.process_noise {
            ProcessNoise::Gaussian => {
                let s = match self.q_schedule.as_ref().and_then(|s| s(k)) {
                    Some(q) => psd_sqrt(&q).unwrap_or_else(|_| self.q_sqrt.clone()),
                    None => self.q_sqrt.clone(),
                };
                NoiseSampler::Gaussian(s)
            }
            ProcessNoise::Gamma { shape, scale } => {
                NoiseSampler::Gamma(Gamma::new(shape, scale).expect("validated gamma parameters"))
            }
        }
    }

    /// Sampler for the measurement noise at step `k`.
    pub fn measurement_noise_sampler(&self, k: usize) -> NoiseSampler {
        let s = match self.r_schedule.as_ref().and_then(|s| s(k)) {
            Some(r) => psd_sqrt(&r).unwrap_or_else(|_| self.r_sqrt.clone()),
            None => self.r_sqrt.clone(),
        };
        NoiseSampler::Gaussian(s)
    }

    /// Draws process noise for the transition into step `k`.
    pub fn sample_process_noise<G: Rng + ?Sized>(&self, k: usize, rng: &mut G, out: &mut [f64]) {
        let mut z = vec![0.0; out.len()];
        self.process_noise_sampler(k).sample_into(rng, &mut z, out);
    }

    /// Draws measurement noise for step `k`.
    pub fn sample_measurement_noise<G: Rng + ?Sized>(&self, k: usize, rng: &mut G, out: &mut [f64]) {
        let mut z = vec![0.0; out.len()];
        self.measurement_noise_sampler(k).sample_into(rng, &mut z, out);
    }

    pub fn q_sqrt(&self) -> &DMatrix<f64> {
        &self.q_sqrt
    }

    /// Largest relative deviation between the supplied Jacobians and central
    /// finite differences at `x`.
    pub fn jacobian_fd_error(&self, x: &DVector<f64>) -> Result<f64> {
        let jf = self.jac_f(x)?;
        let jh = self.jac_h(x)?;
        let nf = finite_difference_jacobian(|v| self.f(v), x);
        let nh = finite_difference_jacobian(|v| self.h(v), x);
        let ef = (&jf - &nf).norm() / nf.norm().max(1e-12);
        let eh = (&jh - &nh).norm() / nh.norm().max(1e-12);
        Ok(ef.max(eh))
    }
}

pub(crate) fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Additive noise sampler with precomputed factors.
#[derive(Debug, Clone)]
pub enum NoiseSampler {
    /// Zero-mean Gaussian with the given square-root factor.
    Gaussian(DMatrix<f64>),
    /// Independent Gamma draws per component.
    Gamma(Gamma<f64>),
}

impl NoiseSampler {
    /// Writes one draw into `out`; `scratch` must have the same length.
    pub fn sample_into<G: Rng + ?Sized>(&self, rng: &mut G, scratch: &mut [f64], out: &mut [f64]) {
        match self {
            NoiseSampler::Gaussian(s) => gaussian_into_with(s, rng, scratch, out),
            NoiseSampler::Gamma(g) => {
                for v in out.iter_mut() {
                    *v = g.sample(rng);
                }
            }
        }
    }
}

/// Fills `out` with `S z` for standard normal `z`.
pub fn gaussian_into<G: Rng + ?Sized>(s: &DMatrix<f64>, rng: &mut G, out: &mut [f64]) {
    let mut z = vec![0.0; s.ncols()];
    gaussian_into_with(s, rng, &mut z, out);
}

fn gaussian_into_with<G: Rng + ?Sized>(s: &DMatrix<f64>, rng: &mut G, z: &mut [f64], out: &mut [f64]) {
    for v in z.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    for (i, o) in out.iter_mut().enumerate().take(s.nrows()) {
        let mut acc = 0.0;
        for (j, zj) in z.iter().enumerate() {
            acc += s[(i, j)] * zj;
        }
        *o = acc;
    }
}

/// Draws from N(mean, cov).
pub fn sample_gaussian<G: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut G) -> Result<DVector<f64>> {
    let s = psd_sqrt(cov)?;
    let mut out = DVector::zeros(mean.len());
    gaussian_into(&s, rng, out.as_mut_slice());
    Ok(out + mean)
}

/// Central-difference Jacobian with a relative step.
pub fn finite_difference_jacobian<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let f0 = f(x);
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let d = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(j, &d);
    }
    jac
}

/// Kind of abnormality injected into a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    Outlier,
    Missing,
    Bias,
    Drift,
}

/// One injected abnormality. `step` and `dim` are 1-based.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorruptionEvent {
    pub step: usize,
    pub dim: usize,
    pub kind: CorruptionKind,
    pub value: f64,
}

/// Ground-truth states, measurements and the record of injected abnormalities.
///
/// `states[k-1]` and `measurements[k-1]` belong to step `k`, for `k = 1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial_state: DVector<f64>,
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
    /// Per-step, per-dimension missing-data flags.
    pub missing: Vec<Vec<bool>>,
    pub corruption_log: Vec<CorruptionEvent>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.states.len();
        if self.measurements.len() != k || self.missing.len() != k {
            return Err(Error::Dimension("trajectory row counts differ".into()));
        }
        let m = self.measurements.first().map_or(0, |y| y.len());
        for e in &self.corruption_log {
            if e.step == 0 || e.step > k || e.dim == 0 || e.dim > m {
                return Err(Error::Dimension(format!("corruption event out of range: {e:?}")));
            }
        }
        Ok(())
    }

    /// Ground-truth state matrix (K×n).
    pub fn state_matrix(&self) -> DMatrix<f64> {
        stack_rows(&self.states)
    }

    /// Measurement matrix (K×m).
    pub fn measurement_matrix(&self) -> DMatrix<f64> {
        stack_rows(&self.measurements)
    }
}

pub(crate) fn stack_rows(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let c = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j])
}

/// Simulates `K` steps of the model from `x0`.
///
/// The output is a pure function of `(model, x0, K, seed)`.
pub fn simulate(model: &StateSpaceModel, x0: &DVector<f64>, k_steps: usize, seed: u64) -> Result<Trajectory> {
    if x0.len() != model.n {
        return Err(Error::Dimension(format!("x0 has length {}, model n = {}", x0.len(), model.n)));
    }
    if k_steps == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    check_psd(&model.q, "Q")?;
    check_psd(&model.r, "R")?;
    if let ProcessNoise::Gamma { shape, scale } = model.process_noise {
        if !(shape > 0.0 && scale > 0.0) {
            return Err(Error::InvalidParameter("gamma noise needs positive shape and scale".into()));
        }
    }
    let mut rng = stream_rng(seed, 0);
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(k_steps);
    let mut measurements = Vec::with_capacity(k_steps);
    let mut fx = vec![0.0; model.n];
    let mut q = vec![0.0; model.n];
    let mut hx = vec![0.0; model.m];
    let mut r = vec![0.0; model.m];
    for k in 1..=k_steps {
        model.f_at_into(k, x.as_slice(), &mut fx);
        model.sample_process_noise(k, &mut rng, &mut q);
        for i in 0..model.n {
            x[i] = fx[i] + q[i];
        }
        model.h_into(x.as_slice(), &mut hx);
        model.sample_measurement_noise(k, &mut rng, &mut r);
        let y = DVector::from_iterator(model.m, hx.iter().zip(&r).map(|(a, b)| a + b));
        states.push(x.clone());
        measurements.push(y);
    }
    Ok(Trajectory {
        initial_state: x0.clone(),
        states,
        measurements,
        missing: vec![vec![false; model.m]; k_steps],
        corruption_log: Vec::new(),
    })
}
