//! EM-based outlier-robust filter (EMORF) and smoother (EMORS) for
//! measurements with a fully populated noise covariance.
//!
//! A dimension flagged as an outlier (`𝓘(i) = ε`) has its variance inflated
//! to `R(i,i)/ε` and loses every correlation with the other dimensions. The
//! indicators are point estimates updated one dimension at a time.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{
    expected_residual_outer, gain_update_rinv, ggf_predict_at, measurement_moments, rts_backward, UtParams,
};
use crate::sor::relative_change;
use crate::ssm::{GaussianBelief, StateSpaceModel};

/// Per-dimension outlier indicators valued in `{ε, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorVector {
    /// `true` where the indicator equals 1.
    pub inlier: Vec<bool>,
    pub epsilon: f64,
}

impl IndicatorVector {
    pub fn all_inliers(m: usize, epsilon: f64) -> Self {
        Self { inlier: vec![true; m], epsilon }
    }

    pub fn from_flags(inlier: Vec<bool>, epsilon: f64) -> Self {
        Self { inlier, epsilon }
    }

    pub fn len(&self) -> usize {
        self.inlier.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inlier.is_empty()
    }

    pub fn value(&self, i: usize) -> f64 {
        if self.inlier[i] {
            1.0
        } else {
            self.epsilon
        }
    }

    pub fn values(&self) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| self.value(i))
    }

    pub fn outlier_count(&self) -> usize {
        self.inlier.iter().filter(|v| !**v).count()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmorfConfig {
    /// Prior inlier probability; a single entry applies to every dimension.
    pub theta: Vec<f64>,
    pub epsilon: f64,
    pub conv_tol: f64,
    pub max_iters: usize,
}

impl Default for EmorfConfig {
    fn default() -> Self {
        Self { theta: vec![0.5], epsilon: 1e-6, conv_tol: 1e-4, max_iters: 50 }
    }
}

impl EmorfConfig {
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
pub struct EmorfDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Dimension order used by each M-step sweep (0-based).
    pub sweep_order: Vec<usize>,
    /// Last τ value per dimension.
    pub tau: DVector<f64>,
}

/// Dense `R(𝓘)`: diagonal `R(i,i)/𝓘(i)`, off-diagonal kept only between inliers.
pub fn r_structured(r: &DMatrix<f64>, ind: &IndicatorVector) -> DMatrix<f64> {
    let m = r.nrows();
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            r[(i, i)] / ind.value(i)
        } else if ind.inlier[i] && ind.inlier[j] {
            r[(i, j)]
        } else {
            0.0
        }
    })
}

fn check_square(r: &DMatrix<f64>, ind: &IndicatorVector) -> Result<()> {
    if !r.is_square() {
        return Err(Error::NotSquare(r.nrows(), r.ncols()));
    }
    if ind.len() != r.nrows() {
        return Err(Error::Dimension(format!("indicator has {} entries, R is {}x{}", ind.len(), r.nrows(), r.ncols())));
    }
    Ok(())
}

fn sub_inverse(r: &DMatrix<f64>, idx: &[usize]) -> Result<DMatrix<f64>> {
    let k = idx.len();
    let sub = DMatrix::from_fn(k, k, |a, b| r[(idx[a], idx[b])]);
    if k == 0 {
        return Ok(sub);
    }
    match sub.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => sub.try_inverse().ok_or(Error::Singular("inlier block of R")),
    }
}

/// Inverse of `R(𝓘)` without forming the inflated entries.
pub fn r_inv_structured(r: &DMatrix<f64>, ind: &IndicatorVector) -> Result<DMatrix<f64>> {
    check_square(r, ind)?;
    r_inv_from_flags(r, &ind.inlier, ind.epsilon)
}

/// As [`r_inv_structured`]; `epsilon = 0` gives hard rejection.
pub fn r_inv_from_flags(r: &DMatrix<f64>, inlier: &[bool], epsilon: f64) -> Result<DMatrix<f64>> {
    let m = r.nrows();
    let idx: Vec<usize> = (0..m).filter(|&i| inlier[i]).collect();
    let inv = sub_inverse(r, &idx)?;
    let mut out = DMatrix::zeros(m, m);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            out[(i, j)] = inv[(a, b)];
        }
    }
    for i in 0..m {
        if !inlier[i] {
            out[(i, i)] = epsilon / r[(i, i)];
        }
    }
    Ok(out)
}

/// Pieces shared by [`delta_r_inv`] and [`tau_indicator`].
struct SchurParts {
    /// Other inlier dimensions.
    set: Vec<usize>,
    /// `R(i,S) R̂(S,S)⁻¹`.
    rr: DVector<f64>,
    /// `R(i,i) − R(i,S) R̂⁻¹ R(S,i)`.
    s: f64,
}

fn schur_parts(r: &DMatrix<f64>, ind: &IndicatorVector, i: usize) -> Result<SchurParts> {
    check_square(r, ind)?;
    if i >= r.nrows() {
        return Err(Error::Dimension(format!("dimension index {i} out of range")));
    }
    let set: Vec<usize> = (0..r.nrows()).filter(|&j| j != i && ind.inlier[j]).collect();
    let inv = sub_inverse(r, &set)?;
    let row = DVector::from_fn(set.len(), |a, _| r[(i, set[a])]);
    let rr = inv.transpose() * &row;
    let s = r[(i, i)] - row.dot(&rr);
    if !(s > 0.0) {
        return Err(Error::Singular("Schur complement of R"));
    }
    Ok(SchurParts { set, rr, s })
}

/// `R⁻¹(𝓘ᵢ = 1, 𝓘₋ᵢ) − R⁻¹(𝓘ᵢ = ε, 𝓘₋ᵢ)` from Schur-complement blocks.
///
/// The entry `ind.inlier[i]` is ignored.
pub fn delta_r_inv(r: &DMatrix<f64>, ind: &IndicatorVector, i: usize) -> Result<DMatrix<f64>> {
    let p = schur_parts(r, ind, i)?;
    Ok(assemble_delta(r, ind.epsilon, i, &p))
}

fn assemble_delta(r: &DMatrix<f64>, epsilon: f64, i: usize, p: &SchurParts) -> DMatrix<f64> {
    let m = r.nrows();
    let mut d = DMatrix::zeros(m, m);
    d[(i, i)] = 1.0 / p.s - epsilon / r[(i, i)];
    for (a, &j) in p.set.iter().enumerate() {
        let v = -p.rr[a] / p.s;
        d[(i, j)] = v;
        d[(j, i)] = v;
        for (b, &l) in p.set.iter().enumerate() {
            d[(j, l)] = p.rr[a] * p.rr[b] / p.s;
        }
    }
    d
}

/// `ln |R(𝓘ᵢ=1, 𝓘₋ᵢ)| − ln |R(𝓘ᵢ=ε, 𝓘₋ᵢ)|` reduced to `ln(s/R(i,i)) + ln ε`.
pub fn log_det_ratio(r: &DMatrix<f64>, ind: &IndicatorVector, i: usize) -> Result<f64> {
    let p = schur_parts(r, ind, i)?;
    Ok((p.s / r[(i, i)]).ln() + ind.epsilon.ln())
}

/// τ statistic for dimension `i`; the decision is inlier iff `τ ≤ 0`.
pub fn tau_indicator(
    w: &DMatrix<f64>,
    r: &DMatrix<f64>,
    ind: &IndicatorVector,
    i: usize,
    theta: f64,
    epsilon: f64,
) -> Result<(f64, bool)> {
    let ind_eps = IndicatorVector { inlier: ind.inlier.clone(), epsilon };
    let p = schur_parts(r, &ind_eps, i)?;
    let d = assemble_delta(r, epsilon, i, &p);
    let tr = w.component_mul(&d).sum();
    let tau = tr + (p.s / r[(i, i)]).ln() + epsilon.ln() + 2.0 * (1.0 / theta - 1.0).ln();
    Ok((tau, tau <= 0.0))
}

/// Point criterion for diagonal R: `(W(i,i)/R(i,i))(1−ε) + ln ε + 2 ln(1/θ − 1)`.
pub fn sorf_point_criterion(w_ii: f64, r_ii: f64, theta: f64, epsilon: f64) -> f64 {
    (w_ii / r_ii) * (1.0 - epsilon) + epsilon.ln() + 2.0 * (1.0 / theta - 1.0).ln()
}

/// Sequential M-step over dimensions in ascending order. Returns whether any
/// indicator changed and the τ values.
pub fn emorf_m_step(
    w: &DMatrix<f64>,
    r: &DMatrix<f64>,
    ind: &mut IndicatorVector,
    cfg: &EmorfConfig,
) -> Result<(bool, DVector<f64>)> {
    let m = r.nrows();
    let mut changed = false;
    let mut taus = DVector::zeros(m);
    for i in 0..m {
        let (tau, inlier) = tau_indicator(w, r, ind, i, cfg.theta_at(i), cfg.epsilon)?;
        taus[i] = tau;
        if ind.inlier[i] != inlier {
            ind.inlier[i] = inlier;
            changed = true;
        }
    }
    Ok((changed, taus))
}

/// Gaussian update with the indicators held fixed.
pub fn update_with_indicators(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    r: &DMatrix<f64>,
    ind: &IndicatorVector,
    params: &UtParams,
) -> Result<GaussianBelief> {
    let mom = measurement_moments(prior, model, params)?;
    let r_inv = r_inv_structured(r, ind)?;
    gain_update_rinv(prior, &mom, y, &DVector::zeros(y.len()), &r_inv)
}

/// Update that discards the flagged dimensions entirely.
pub fn perfect_rejector_update(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    r: &DMatrix<f64>,
    inlier: &[bool],
    params: &UtParams,
) -> Result<GaussianBelief> {
    let mom = measurement_moments(prior, model, params)?;
    let r_inv = r_inv_from_flags(r, inlier, 0.0)?;
    gain_update_rinv(prior, &mom, y, &DVector::zeros(y.len()), &r_inv)
}

/// One EMORF measurement update.
pub fn emorf_step(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    cfg: &EmorfConfig,
    params: &UtParams,
) -> Result<(GaussianBelief, IndicatorVector, EmorfDiagnostics)> {
    emorf_step_with_r(prior, y, model, &model.r, cfg, params)
}

pub fn emorf_step_with_r(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    r: &DMatrix<f64>,
    cfg: &EmorfConfig,
    params: &UtParams,
) -> Result<(GaussianBelief, IndicatorVector, EmorfDiagnostics)> {
    let m = model.m;
    cfg.validate(m)?;
    let mom = measurement_moments(prior, model, params)?;
    let zero = DVector::zeros(m);
    let mut ind = IndicatorVector::all_inliers(m, cfg.epsilon);
    let mut x_prev = prior.mean.clone();
    let mut post = prior.clone();
    let mut taus = DVector::zeros(m);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let r_inv = r_inv_structured(r, &ind)?;
        post = gain_update_rinv(prior, &mom, y, &zero, &r_inv)?;
        let w = expected_residual_outer(&post, y, model, params)?;
        let (changed, t) = emorf_m_step(&w, r, &mut ind, cfg)?;
        taus = t;
        let change = relative_change(&post.mean, &x_prev);
        x_prev = post.mean.clone();
        if change < cfg.conv_tol && !changed {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("emorf_step: no convergence after {iterations} iterations");
    }
    let diag = EmorfDiagnostics { iterations, converged, sweep_order: (0..m).collect(), tau: taus };
    Ok((post, ind, diag))
}

/// Runs UKF prediction and EMORF updates over a measurement sequence.
pub fn emorf_run(
    model: &StateSpaceModel,
    ys: &[DVector<f64>],
    prior: &GaussianBelief,
    cfg: &EmorfConfig,
    params: &UtParams,
) -> Result<(Vec<GaussianBelief>, Vec<IndicatorVector>)> {
    let mut belief = prior.clone();
    let mut beliefs = Vec::with_capacity(ys.len());
    let mut inds = Vec::with_capacity(ys.len());
    for (k, y) in ys.iter().enumerate() {
        let pred = ggf_predict_at(&belief, model, k + 1, params)?;
        let (post, ind, _) = emorf_step_with_r(&pred, y, model, &model.r_at(k + 1), cfg, params)?;
        belief = post;
        beliefs.push(belief.clone());
        inds.push(ind);
    }
    Ok((beliefs, inds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmorsOutput {
    pub smoothed: Vec<GaussianBelief>,
    pub indicators: Vec<IndicatorVector>,
    pub iterations: usize,
    pub converged: bool,
}

/// EMORS: alternates a forward pass with fixed indicators, an RTS backward
/// pass and per-step indicator updates from the smoothed marginals.
pub fn emors_run(
    model: &StateSpaceModel,
    ys: &[DVector<f64>],
    prior: &GaussianBelief,
    cfg: &EmorfConfig,
    params: &UtParams,
) -> Result<EmorsOutput> {
    let m = model.m;
    cfg.validate(m)?;
    let kk = ys.len();
    if kk == 0 {
        return Err(Error::InvalidParameter("empty measurement batch".into()));
    }
    let mut inds = vec![IndicatorVector::all_inliers(m, cfg.epsilon); kk];
    let mut prev_stack: Option<Vec<DVector<f64>>> = None;
    let mut smoothed = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let zero = DVector::zeros(m);
    while iterations < cfg.max_iters {
        iterations += 1;
        let mut belief = prior.clone();
        let mut filtered = Vec::with_capacity(kk);
        let mut predicted = Vec::with_capacity(kk);
        for (k, y) in ys.iter().enumerate() {
            let pred = ggf_predict_at(&belief, model, k + 1, params)?;
            let mom = measurement_moments(&pred, model, params)?;
            let r_inv = r_inv_structured(&model.r_at(k + 1), &inds[k])?;
            belief = gain_update_rinv(&pred, &mom, y, &zero, &r_inv)?;
            filtered.push(belief.clone());
            predicted.push(pred);
        }
        smoothed = rts_backward(&filtered, &predicted[1..], model, params)?;
        let mut changed = false;
        for (k, y) in ys.iter().enumerate() {
            let w = expected_residual_outer(&smoothed[k], y, model, params)?;
            let (c, _) = emorf_m_step(&w, &model.r_at(k + 1), &mut inds[k], cfg)?;
            changed |= c;
        }
        let prev = prev_stack.get_or_insert_with(|| predicted.iter().map(|p| p.mean.clone()).collect());
        let change = stacked_relative_change(&smoothed, prev);
        *prev = smoothed.iter().map(|b| b.mean.clone()).collect();
        if change < cfg.conv_tol && !changed {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("emors_run: no convergence after {iterations} iterations");
    }
    Ok(EmorsOutput { smoothed, indicators: inds, iterations, converged })
}

fn stacked_relative_change(cur: &[GaussianBelief], prev: &[DVector<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (c, p) in cur.iter().zip(prev) {
        num += (&c.mean - p).norm_squared();
        den += p.norm_squared();
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}
