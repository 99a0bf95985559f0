//! Bias-detecting-and-mitigating (BDM) filter.
//!
//! Jointly infers the state, per-dimension bias occurrence probabilities Ω
//! and bias magnitudes Θ with a variational loop. The bias prior is carried
//! between steps as a single Gaussian matched to the two-branch
//! (persist/renew) mixture.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{gain_update, ggf_predict_at, measurement_moments, MeasurementMoments, UtParams};
use crate::sor::{logistic, relative_change};
use crate::ssm::{check_psd, is_diagonal, symmetrize_psd, GaussianBelief, StateSpaceModel};

/// Gaussian belief over the bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasBelief {
    pub theta_hat: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl BiasBelief {
    pub fn new(theta_hat: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.shape() != (theta_hat.len(), theta_hat.len()) {
            return Err(Error::Dimension("bias covariance shape".into()));
        }
        check_psd(&sigma, "bias covariance")?;
        Ok(Self { theta_hat, sigma })
    }

    /// Zero mean with covariance `s·I`.
    pub fn isotropic(m: usize, s: f64) -> Self {
        Self { theta_hat: DVector::zeros(m), sigma: DMatrix::identity(m, m) * s }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BdmConfig {
    /// Covariance of a freshly occurring bias (Σ̃).
    pub sigma_tilde: DMatrix<f64>,
    /// Covariance of the drift of a persisting bias (Σ̆).
    pub sigma_breve: DMatrix<f64>,
    /// Prior bias probability; a single entry applies to every dimension.
    pub theta_prior: Vec<f64>,
    pub conv_tol: f64,
    pub max_iters: usize,
    /// Pins Ω to zero, reducing the filter to a plain UKF on the state.
    pub force_no_bias: bool,
}

impl BdmConfig {
    /// `Σ̃ = 1000 R`, `Σ̆ = 0.1 R`, `θ = 0.5`.
    pub fn from_r(r: &DMatrix<f64>) -> Self {
        Self {
            sigma_tilde: r * 1000.0,
            sigma_breve: r * 0.1,
            theta_prior: vec![0.5],
            conv_tol: 1e-4,
            max_iters: 50,
            force_no_bias: false,
        }
    }

    pub fn theta_at(&self, i: usize) -> f64 {
        if self.theta_prior.len() == 1 {
            self.theta_prior[0]
        } else {
            self.theta_prior[i]
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.sigma_tilde.shape() != (m, m) || self.sigma_breve.shape() != (m, m) {
            return Err(Error::Dimension(format!("bias covariances must be {m}x{m}")));
        }
        check_psd(&self.sigma_tilde, "sigma_tilde")?;
        check_psd(&self.sigma_breve, "sigma_breve")?;
        if self.theta_prior.len() != 1 && self.theta_prior.len() != m {
            return Err(Error::Dimension("theta_prior must have 1 or m entries".into()));
        }
        if self.theta_prior.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidParameter("theta_prior must lie strictly inside (0, 1)".into()));
        }
        if !(self.conv_tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidParameter("conv_tol and max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BdmDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub elbo: f64,
}

/// Moment-matched bias prediction from the previous posterior and Ω.
pub fn bdm_predict_bias(prev: &BiasBelief, omega_prev: &DVector<f64>, cfg: &BdmConfig) -> Result<BiasBelief> {
    let m = prev.theta_hat.len();
    if omega_prev.len() != m {
        return Err(Error::Dimension("omega length".into()));
    }
    if omega_prev.iter().any(|o| !(0.0..=1.0).contains(o)) {
        return Err(Error::InvalidParameter("omega entries must lie in [0, 1]".into()));
    }
    let theta_hat = prev.theta_hat.component_mul(omega_prev);
    let mut sigma = DMatrix::zeros(m, m);
    for i in 0..m {
        let wi = omega_prev[i];
        for j in 0..m {
            let wj = omega_prev[j];
            let mut v = (1.0 - wi) * cfg.sigma_tilde[(i, j)] + wi * cfg.sigma_breve[(i, j)] + prev.sigma[(i, j)] * wi * wj;
            if i == j {
                let var = wi * (1.0 - wi);
                v += prev.sigma[(i, i)] * var + var * prev.theta_hat[i] * prev.theta_hat[i];
            }
            sigma[(i, j)] = v;
        }
    }
    Ok(BiasBelief { theta_hat, sigma: symmetrize_psd(&sigma)? })
}

/// Ω is kept this far inside (0, 1) when the logistic saturates.
pub const OMEGA_FLOOR: f64 = 1e-12;

/// Posterior bias probabilities from the two per-dimension exponents.
///
/// `hbar2` (the variance of `hᵢ(x)`) enters both hypotheses identically and
/// cancels; it is accepted for completeness.
#[allow(clippy::too_many_arguments)]
pub fn bdm_omega(
    y: &DVector<f64>,
    nu: &DVector<f64>,
    hbar2: &DVector<f64>,
    theta_hat: &DVector<f64>,
    theta_bar2: &DVector<f64>,
    r_diag: &DVector<f64>,
    cfg: &BdmConfig,
) -> DVector<f64> {
    DVector::from_fn(y.len(), |i, _| {
        let th = cfg.theta_at(i);
        let r = r_diag[i];
        let e1 = nu[i] + theta_hat[i] - y[i];
        let e0 = y[i] - nu[i];
        let log_p1 = th.ln() - 0.5 * (hbar2[i] + theta_bar2[i] + e1 * e1) / r;
        let log_p0 = (1.0 - th).ln() - 0.5 * (e0 * e0 + hbar2[i]) / r;
        logistic(log_p1 - log_p0).clamp(OMEGA_FLOOR, 1.0 - OMEGA_FLOOR)
    })
}

/// Variational update of state, Ω and Θ for one step.
///
/// Coordinate ascent is run from three starting points: the carried-over Ω
/// and `Ω = 0`, both with the predicted bias, and `Ω = θ` with a bias
/// posterior fitted against the predicted measurement. The fixed point with
/// the largest evidence lower bound is returned.
#[allow(clippy::too_many_arguments)]
pub fn bdm_vb_iterate(
    prior: &GaussianBelief,
    bias_prior: &BiasBelief,
    omega_init: &DVector<f64>,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    r: &DMatrix<f64>,
    cfg: &BdmConfig,
    params: &UtParams,
) -> Result<(GaussianBelief, BiasBelief, DVector<f64>, BdmDiagnostics)> {
    let m = model.m;
    cfg.validate(m)?;
    if !is_diagonal(r) {
        return Err(Error::NonDiagonalR("the BDM filter assumes independent measurement channels"));
    }
    if omega_init.len() != m {
        return Err(Error::Dimension("omega length".into()));
    }
    let r_diag = r.diagonal();
    let mom = measurement_moments(prior, model, params)?;
    let ctx = VbContext { prior, mom: &mom, bias_prior, y, model, r, r_diag: &r_diag, cfg, params };
    if cfg.force_no_bias {
        return ctx.ascend(bias_prior.clone(), DVector::zeros(m));
    }
    let theta0 = DVector::from_fn(m, |i, _| cfg.theta_at(i));
    let fitted = theta_update(bias_prior, &theta0, y, &mom.mean, &r_diag)?;
    let starts = [(bias_prior.clone(), omega_init.clone()), (bias_prior.clone(), DVector::zeros(m)), (fitted, theta0)];
    let mut best: Option<(GaussianBelief, BiasBelief, DVector<f64>, BdmDiagnostics)> = None;
    let mut last_err = None;
    for (bias0, omega0) in starts {
        match ctx.ascend(bias0, omega0) {
            Ok(cand) if cand.3.elbo.is_finite() && cand.0.mean.iter().all(|v| v.is_finite()) => {
                if best.as_ref().is_none_or(|b| cand.3.elbo > b.3.elbo) {
                    best = Some(cand);
                }
            }
            Ok(_) => log::debug!("bdm_vb_iterate: discarding a non-finite start"),
            Err(e) => {
                log::debug!("bdm_vb_iterate: discarding a failed start: {e}");
                last_err = Some(e);
            }
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(Error::Degenerate("every variational start diverged".into())))
}

struct VbContext<'a> {
    prior: &'a GaussianBelief,
    mom: &'a MeasurementMoments,
    bias_prior: &'a BiasBelief,
    y: &'a DVector<f64>,
    model: &'a StateSpaceModel,
    r: &'a DMatrix<f64>,
    r_diag: &'a DVector<f64>,
    cfg: &'a BdmConfig,
    params: &'a UtParams,
}

impl VbContext<'_> {
    fn ascend(&self, mut bias: BiasBelief, mut omega: DVector<f64>) -> Result<(GaussianBelief, BiasBelief, DVector<f64>, BdmDiagnostics)> {
        let cfg = self.cfg;
        let mut post = self.prior.clone();
        let mut x_prev = self.prior.mean.clone();
        let mut converged = false;
        let mut iterations = 0;
        let mut pm = measurement_moments(&post, self.model, self.params)?;
        while iterations < cfg.max_iters {
            iterations += 1;
            let offset = omega.component_mul(&bias.theta_hat);
            post = gain_update(self.prior, self.mom, self.y, &offset, self.r)?;
            pm = measurement_moments(&post, self.model, self.params)?;
            if !cfg.force_no_bias {
                omega = bdm_omega(self.y, &pm.mean, &pm.cov.diagonal(), &bias.theta_hat, &bias.sigma.diagonal(), self.r_diag, cfg);
            }
            bias = theta_update(self.bias_prior, &omega, self.y, &pm.mean, self.r_diag)?;
            let change = relative_change(&post.mean, &x_prev);
            x_prev = post.mean.clone();
            if change < cfg.conv_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            log::debug!("bdm_vb_iterate: no convergence after {iterations} iterations");
        }
        let elbo = bdm_elbo(self.prior, &post, &pm, self.bias_prior, &bias, &omega, self.y, self.r_diag, cfg)?;
        Ok((post, bias, omega, BdmDiagnostics { iterations, converged, elbo }))
    }
}

/// `KL(N(m0, s0) ‖ N(m1, s1))`.
fn gaussian_kl(m0: &DVector<f64>, s0: &DMatrix<f64>, m1: &DVector<f64>, s1: &DMatrix<f64>) -> Result<f64> {
    let n = m0.len() as f64;
    let c1 = s1.clone().cholesky().ok_or(Error::Singular("KL reference covariance"))?;
    let c0 = s0.clone().cholesky().ok_or(Error::Singular("KL covariance"))?;
    let d = m1 - m0;
    let tr = c1.solve(s0).trace();
    let maha = d.dot(&c1.solve(&d));
    let ld1 = 2.0 * c1.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ld0 = 2.0 * c0.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * (tr + maha - n + ld1 - ld0))
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// Evidence lower bound of one update step up to terms shared by every
/// factorised posterior.
#[allow(clippy::too_many_arguments)]
pub fn bdm_elbo(
    prior: &GaussianBelief,
    post: &GaussianBelief,
    post_meas: &MeasurementMoments,
    bias_prior: &BiasBelief,
    bias: &BiasBelief,
    omega: &DVector<f64>,
    y: &DVector<f64>,
    r_diag: &DVector<f64>,
    cfg: &BdmConfig,
) -> Result<f64> {
    let mut lik = 0.0;
    for i in 0..y.len() {
        let e0 = y[i] - post_meas.mean[i];
        let e1 = e0 - bias.theta_hat[i];
        let h2 = post_meas.cov[(i, i)];
        let a = (1.0 - omega[i]) * (h2 + e0 * e0) + omega[i] * (h2 + bias.sigma[(i, i)] + e1 * e1);
        lik -= 0.5 * a / r_diag[i];
    }
    let kl_x = gaussian_kl(&post.mean, &post.cov, &prior.mean, &prior.cov)?;
    let kl_t = gaussian_kl(&bias.theta_hat, &bias.sigma, &bias_prior.theta_hat, &bias_prior.sigma)?;
    let kl_i: f64 = (0..y.len()).map(|i| bernoulli_kl(omega[i], cfg.theta_at(i))).sum();
    Ok(lik - kl_x - kl_t - kl_i)
}

/// Θ block: Kalman-form update followed by the Ω(I−Ω)R⁻¹ precision
/// correction, written as `(I + Σ* A)⁻¹` to avoid inverting `Σ*`.
fn theta_update(
    bias_prior: &BiasBelief,
    omega: &DVector<f64>,
    y: &DVector<f64>,
    nu: &DVector<f64>,
    r_diag: &DVector<f64>,
) -> Result<BiasBelief> {
    let m = y.len();
    let om = DMatrix::from_diagonal(omega);
    let c = &bias_prior.sigma * &om;
    let s = &om * &bias_prior.sigma * &om + DMatrix::from_diagonal(r_diag);
    let kt = s.cholesky().ok_or(Error::Singular("bias innovation covariance"))?.solve(&c.transpose());
    let k = kt.transpose();
    let innov = y - nu - omega.component_mul(&bias_prior.theta_hat);
    let theta_star = &bias_prior.theta_hat + &k * innov;
    let sigma_star = symmetrize_psd(&(&bias_prior.sigma - &c * k.transpose()))?;
    let a = DVector::from_fn(m, |i, _| omega[i] * (1.0 - omega[i]) / r_diag[i]);
    let mut lhs = DMatrix::identity(m, m);
    for i in 0..m {
        for j in 0..m {
            lhs[(i, j)] += sigma_star[(i, j)] * a[j];
        }
    }
    let lu = lhs.lu();
    let theta_hat = lu.solve(&theta_star).ok_or(Error::Singular("bias precision correction"))?;
    let sigma = lu.solve(&sigma_star).ok_or(Error::Singular("bias precision correction"))?;
    Ok(BiasBelief { theta_hat, sigma: symmetrize_psd(&sigma)? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BdmOutput {
    pub beliefs: Vec<GaussianBelief>,
    pub biases: Vec<BiasBelief>,
    pub omegas: Vec<DVector<f64>>,
}

/// Runs the BDM filter over a measurement sequence. Ω starts at zero and
/// each step's loop is initialised from the previous Ω and the predicted bias.
pub fn bdm_run(
    model: &StateSpaceModel,
    ys: &[DVector<f64>],
    prior: &GaussianBelief,
    bias_prior: &BiasBelief,
    cfg: &BdmConfig,
    params: &UtParams,
) -> Result<BdmOutput> {
    let m = model.m;
    let mut belief = prior.clone();
    let mut bias = bias_prior.clone();
    let mut omega = DVector::zeros(m);
    let mut out = BdmOutput {
        beliefs: Vec::with_capacity(ys.len()),
        biases: Vec::with_capacity(ys.len()),
        omegas: Vec::with_capacity(ys.len()),
    };
    for (k, y) in ys.iter().enumerate() {
        let pred = ggf_predict_at(&belief, model, k + 1, params)?;
        let bias_pred = bdm_predict_bias(&bias, &omega, cfg)?;
        let (post, b, o, _) = bdm_vb_iterate(&pred, &bias_pred, &omega, y, model, &model.r_at(k + 1), cfg, params)?;
        belief = post;
        bias = b;
        omega = o;
        out.beliefs.push(belief.clone());
        out.biases.push(bias.clone());
        out.omegas.push(omega.clone());
    }
    Ok(out)
}
