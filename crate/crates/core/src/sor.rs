//! Selective-observations-rejecting (SOR) filter.
//!
//! Each measurement dimension carries a Bernoulli indicator taking the value
//! 1 (nominal) or ε (outlier). A variational loop alternates a Gaussian update
//! with noise `R ⊘ ⟨𝓘⟩` and a closed-form update of the indicator posteriors.
//! Requires a diagonal R.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{expected_residual_outer, gain_update, ggf_predict_at, measurement_moments, MeasurementMoments, UtParams};
use crate::ssm::{is_diagonal, GaussianBelief, StateSpaceModel};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SorConfig {
    pub epsilon: f64,
    /// Prior no-outlier probability per dimension; a single entry applies to
    /// every dimension.
    pub theta: Vec<f64>,
    pub conv_tol: f64,
    pub max_iters: usize,
}

impl Default for SorConfig {
    fn default() -> Self {
        Self { epsilon: 1e-6, theta: vec![0.5], conv_tol: 1e-4, max_iters: 50 }
    }
}

impl SorConfig {
    pub fn theta_at(&self, i: usize) -> f64 {
        if self.theta.len() == 1 {
            self.theta[0]
        } else {
            self.theta[i]
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidParameter("epsilon must lie in (0, 1)".into()));
        }
        if self.theta.len() != 1 && self.theta.len() != m {
            return Err(Error::Dimension(format!("theta has {} entries, expected 1 or {m}", self.theta.len())));
        }
        if self.theta.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidParameter("theta must lie strictly inside (0, 1)".into()));
        }
        if !(self.conv_tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidParameter("conv_tol and max_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SorDiagnostics {
    /// Posterior probability that each dimension is nominal.
    pub omega: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Numerically stable `1 / (1 + e^{-z})`.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `W(i) = ⟨(yᵢ − hᵢ(x))²⟩` under the posterior.
pub fn sor_w_stat(
    posterior: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    params: &UtParams,
) -> Result<DVector<f64>> {
    let w = expected_residual_outer(posterior, y, model, params)?;
    Ok(w.diagonal().map(|v| v.max(0.0)))
}

/// Posterior nominal probabilities from the residual statistic `W`.
pub fn sor_omega(w: &DVector<f64>, r_diag: &DVector<f64>, cfg: &SorConfig) -> Result<DVector<f64>> {
    if w.len() != r_diag.len() {
        return Err(Error::Dimension("W and R diagonal lengths differ".into()));
    }
    if r_diag.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidParameter("R diagonal must be positive".into()));
    }
    let eps = cfg.epsilon;
    Ok(DVector::from_fn(w.len(), |i, _| {
        let th = cfg.theta_at(i);
        let z = 0.5 * eps.ln() + (1.0 / th - 1.0).ln() + w[i] * (1.0 - eps) / (2.0 * r_diag[i]);
        logistic(-z)
    }))
}

/// Update with a fixed indicator mean: noise `R(i,i) / ⟨𝓘⟩(i)`.
pub fn sor_update_with_indicator(
    prior: &GaussianBelief,
    mom: &MeasurementMoments,
    y: &DVector<f64>,
    r_diag: &DVector<f64>,
    indicator_mean: &DVector<f64>,
) -> Result<GaussianBelief> {
    let v = DMatrix::from_diagonal(&r_diag.component_div(indicator_mean));
    gain_update(prior, mom, y, &DVector::zeros(y.len()), &v)
}

/// One SOR measurement update.
pub fn sor_step(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    cfg: &SorConfig,
    params: &UtParams,
) -> Result<(GaussianBelief, SorDiagnostics)> {
    sor_step_with_r(prior, y, model, &model.r, cfg, params)
}

pub fn sor_step_with_r(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    r: &DMatrix<f64>,
    cfg: &SorConfig,
    params: &UtParams,
) -> Result<(GaussianBelief, SorDiagnostics)> {
    if !is_diagonal(r) {
        return Err(Error::NonDiagonalR("the SOR filter requires diagonal R; use EMORF for correlated noise"));
    }
    let m = model.m;
    cfg.validate(m)?;
    let r_diag = r.diagonal();
    let mom = measurement_moments(prior, model, params)?;
    let mut ind = DVector::from_element(m, 1.0);
    let mut omega = DVector::from_element(m, 1.0);
    let mut x_prev = prior.mean.clone();
    let mut post = prior.clone();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        post = sor_update_with_indicator(prior, &mom, y, &r_diag, &ind)?;
        let w = sor_w_stat(&post, y, model, params)?;
        omega = sor_omega(&w, &r_diag, cfg)?;
        ind = omega.map(|o| o + (1.0 - o) * cfg.epsilon);
        let change = relative_change(&post.mean, &x_prev);
        x_prev = post.mean.clone();
        if change < cfg.conv_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("sor_step: no convergence after {iterations} iterations");
    }
    Ok((post, SorDiagnostics { omega, iterations, converged }))
}

pub(crate) fn relative_change(x: &DVector<f64>, prev: &DVector<f64>) -> f64 {
    let d = (x - prev).norm();
    let p = prev.norm();
    if p > 0.0 {
        d / p
    } else {
        d
    }
}

/// Runs UKF prediction and SOR updates over a measurement sequence.
pub fn sor_run(
    model: &StateSpaceModel,
    ys: &[DVector<f64>],
    prior: &GaussianBelief,
    cfg: &SorConfig,
    params: &UtParams,
) -> Result<(Vec<GaussianBelief>, Vec<SorDiagnostics>)> {
    let mut belief = prior.clone();
    let mut beliefs = Vec::with_capacity(ys.len());
    let mut diags = Vec::with_capacity(ys.len());
    for (k, y) in ys.iter().enumerate() {
        let pred = ggf_predict_at(&belief, model, k + 1, params)?;
        let (post, d) = sor_step_with_r(&pred, y, model, &model.r_at(k + 1), cfg, params)?;
        belief = post;
        beliefs.push(belief.clone());
        diags.push(d);
    }
    Ok((beliefs, diags))
}
