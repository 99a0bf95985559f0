//! Unscented transform, Gaussian filter predict/update, EKF update, RTS
//! backward pass and systematic resampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::ssm::{psd_sqrt, symmetrize_psd, GaussianBelief, StateSpaceModel};

/// Scaling parameters of the unscented transform.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 2.0, kappa: 0.0 }
    }
}

impl UtParams {
    pub fn lambda(&self, n: usize) -> f64 {
        let n = n as f64;
        self.alpha * self.alpha * (n + self.kappa) - n
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let s = n as f64 + self.lambda(n);
        if !(s > 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::InvalidParameter(format!("UT scaling n + lambda = {s} must be positive")));
        }
        Ok(())
    }

    /// Mean and covariance weights for dimension `n`.
    pub fn weights(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let lambda = self.lambda(n);
        let s = n as f64 + lambda;
        let mut wm = vec![0.5 / s; 2 * n + 1];
        let mut wc = wm.clone();
        wm[0] = lambda / s;
        wc[0] = lambda / s + 1.0 - self.alpha * self.alpha + self.beta;
        (wm, wc)
    }
}

/// Sigma points stored row-wise with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPointSet {
    /// (2n+1)×n, one point per row.
    pub points: DMatrix<f64>,
    pub mean_weights: DVector<f64>,
    pub cov_weights: DVector<f64>,
}

impl SigmaPointSet {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Sigma points of `belief`: the mean and `mean ± √(n+λ) L` columns.
pub fn sigma_points(belief: &GaussianBelief, params: &UtParams) -> Result<SigmaPointSet> {
    let n = belief.dim();
    params.validate(n)?;
    let l = psd_sqrt(&symmetrize_psd(&belief.cov)?)?;
    let scale = (n as f64 + params.lambda(n)).sqrt();
    let mut points = DMatrix::zeros(2 * n + 1, n);
    for j in 0..n {
        points[(0, j)] = belief.mean[j];
    }
    for i in 0..n {
        for j in 0..n {
            let d = scale * l[(j, i)];
            points[(1 + i, j)] = belief.mean[j] + d;
            points[(1 + n + i, j)] = belief.mean[j] - d;
        }
    }
    let (wm, wc) = params.weights(n);
    Ok(SigmaPointSet {
        points,
        mean_weights: DVector::from_vec(wm),
        cov_weights: DVector::from_vec(wc),
    })
}

/// Moments returned by the unscented transform.
#[derive(Debug, Clone, PartialEq)]
pub struct UtMoments {
    pub mean: DVector<f64>,
    /// Covariance of the mapped variable, including any additive term.
    pub cov: DMatrix<f64>,
    /// Cross-covariance between input and output (n×d).
    pub crosscov: DMatrix<f64>,
}

fn propagate<M>(sp: &SigmaPointSet, map: &M, d: usize) -> DMatrix<f64>
where
    M: Fn(&[f64], &mut [f64]) + ?Sized,
{
    let npts = sp.points.nrows();
    let n = sp.points.ncols();
    let mut out = DMatrix::zeros(npts, d);
    let mut xin = vec![0.0; n];
    let mut yout = vec![0.0; d];
    for p in 0..npts {
        for j in 0..n {
            xin[j] = sp.points[(p, j)];
        }
        map(&xin, &mut yout);
        for j in 0..d {
            out[(p, j)] = yout[j];
        }
    }
    out
}

fn weighted_moments(sp: &SigmaPointSet, mean_x: &DVector<f64>, ys: &DMatrix<f64>) -> UtMoments {
    let npts = ys.nrows();
    let d = ys.ncols();
    let n = mean_x.len();
    let mut mean = DVector::zeros(d);
    for p in 0..npts {
        let w = sp.mean_weights[p];
        for j in 0..d {
            mean[j] += w * ys[(p, j)];
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    let mut cross = DMatrix::zeros(n, d);
    let mut dy = vec![0.0; d];
    let mut dx = vec![0.0; n];
    for p in 0..npts {
        let w = sp.cov_weights[p];
        for j in 0..d {
            dy[j] = ys[(p, j)] - mean[j];
        }
        for j in 0..n {
            dx[j] = sp.points[(p, j)] - mean_x[j];
        }
        for a in 0..d {
            let wa = w * dy[a];
            for b in 0..d {
                cov[(a, b)] += wa * dy[b];
            }
        }
        for a in 0..n {
            let wa = w * dx[a];
            for b in 0..d {
                cross[(a, b)] += wa * dy[b];
            }
        }
    }
    UtMoments { mean, cov, crosscov: cross }
}

/// Unscented approximation of the moments of `map(x)` for `x ~ N(belief)`.
///
/// `additive_cov` (d×d) is added to the output covariance.
pub fn unscented_transform<M>(
    belief: &GaussianBelief,
    map: M,
    d: usize,
    params: &UtParams,
    additive_cov: &DMatrix<f64>,
) -> Result<UtMoments>
where
    M: Fn(&[f64], &mut [f64]),
{
    if additive_cov.shape() != (d, d) {
        return Err(Error::Dimension(format!("additive covariance must be {d}x{d}")));
    }
    let sp = sigma_points(belief, params)?;
    let ys = propagate(&sp, &map, d);
    let mut m = weighted_moments(&sp, &belief.mean, &ys);
    m.cov += additive_cov;
    m.cov = symmetrize_psd(&m.cov)?;
    Ok(m)
}

/// Prediction through the transition map with the model's constant Q.
pub fn ggf_predict(belief: &GaussianBelief, model: &StateSpaceModel, params: &UtParams) -> Result<GaussianBelief> {
    ggf_predict_with_q(belief, model, 1, &model.q, params)
}

/// Prediction into step `k`, honouring any per-step Q override.
pub fn ggf_predict_at(belief: &GaussianBelief, model: &StateSpaceModel, k: usize, params: &UtParams) -> Result<GaussianBelief> {
    ggf_predict_with_q(belief, model, k, &model.q_at(k), params)
}

fn ggf_predict_with_q(
    belief: &GaussianBelief,
    model: &StateSpaceModel,
    k: usize,
    q: &DMatrix<f64>,
    params: &UtParams,
) -> Result<GaussianBelief> {
    check_belief_dim(belief, model)?;
    let m = unscented_transform(belief, |x, out| model.f_at_into(k, x, out), model.n, params, q)?;
    Ok(GaussianBelief { mean: m.mean, cov: m.cov })
}

/// Cross-covariance between `x` and the transition into step `k` under `belief`.
pub fn transition_crosscov(
    belief: &GaussianBelief,
    model: &StateSpaceModel,
    k: usize,
    params: &UtParams,
) -> Result<DMatrix<f64>> {
    let sp = sigma_points(belief, params)?;
    let ys = propagate(&sp, &|x: &[f64], out: &mut [f64]| model.f_at_into(k, x, out), model.n);
    Ok(weighted_moments(&sp, &belief.mean, &ys).crosscov)
}

/// Predicted measurement moments without measurement noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMoments {
    /// μ = ⟨h(x)⟩.
    pub mean: DVector<f64>,
    /// U = Cov[h(x)].
    pub cov: DMatrix<f64>,
    /// C = Cov[x, h(x)].
    pub cross: DMatrix<f64>,
}

pub fn measurement_moments(belief: &GaussianBelief, model: &StateSpaceModel, params: &UtParams) -> Result<MeasurementMoments> {
    check_belief_dim(belief, model)?;
    let sp = sigma_points(belief, params)?;
    let ys = propagate(&sp, &|x: &[f64], out: &mut [f64]| model.h_into(x, out), model.m);
    let w = weighted_moments(&sp, &belief.mean, &ys);
    Ok(MeasurementMoments { mean: w.mean, cov: w.cov, cross: w.crosscov })
}

/// `⟨(y − h(x))(y − h(x))ᵀ⟩` under `belief`: `(y − μ)(y − μ)ᵀ + Cov[h(x)]`.
pub fn expected_residual_outer(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    params: &UtParams,
) -> Result<DMatrix<f64>> {
    let mom = measurement_moments(belief, model, params)?;
    let e = y - &mom.mean;
    Ok(&e * e.transpose() + mom.cov)
}

/// Gaussian update from precomputed moments with `S = U + R_eff`.
pub fn gain_update(
    belief: &GaussianBelief,
    mom: &MeasurementMoments,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    r_eff: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    let m = mom.mean.len();
    if y.len() != m || offset.len() != m || r_eff.shape() != (m, m) {
        return Err(Error::Dimension("update operands disagree with measurement dimension".into()));
    }
    let s = &mom.cov + r_eff;
    let ct = mom.cross.transpose();
    let kt = match s.clone().cholesky() {
        Some(ch) => ch.solve(&ct),
        None => s.lu().solve(&ct).ok_or(Error::Singular("innovation covariance"))?,
    };
    finish_update(belief, mom, y, offset, &kt.transpose())
}

/// Gaussian update with the gain written through `R⁻¹`:
/// `K = C (R⁻¹ − R⁻¹ (I + U R⁻¹)⁻¹ U R⁻¹)`.
///
/// Suited to indicator-scaled noise where `R` itself has entries near `1/ε`.
pub fn gain_update_rinv(
    belief: &GaussianBelief,
    mom: &MeasurementMoments,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    r_inv: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    let m = mom.mean.len();
    if y.len() != m || offset.len() != m || r_inv.shape() != (m, m) {
        return Err(Error::Dimension("update operands disagree with measurement dimension".into()));
    }
    let s_inv = innovation_precision(&mom.cov, r_inv)?;
    let k = &mom.cross * s_inv;
    finish_update(belief, mom, y, offset, &k)
}

/// `(U + R)⁻¹` evaluated from `R⁻¹` without forming `R`.
pub fn innovation_precision(u: &DMatrix<f64>, r_inv: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = u.nrows();
    let ur = u * r_inv;
    let a = DMatrix::identity(m, m) + &ur;
    let x = a.lu().solve(&ur).ok_or(Error::Singular("I + U R^-1"))?;
    let s_inv = r_inv - r_inv * x;
    Ok((&s_inv + s_inv.transpose()) * 0.5)
}

fn finish_update(
    belief: &GaussianBelief,
    mom: &MeasurementMoments,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    k: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    let innov = y - offset - &mom.mean;
    let mean = &belief.mean + k * innov;
    let cov = symmetrize_psd(&(&belief.cov - &mom.cross * k.transpose()))?;
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite posterior mean".into()));
    }
    Ok(GaussianBelief { mean, cov })
}

/// General Gaussian filter measurement update (UT moments).
pub fn ggf_update(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    r_eff: &DMatrix<f64>,
    offset: &DVector<f64>,
    params: &UtParams,
) -> Result<GaussianBelief> {
    let mom = measurement_moments(belief, model, params)?;
    gain_update(belief, &mom, y, offset, r_eff)
}

/// Extended Kalman filter update linearised at the prior mean.
pub fn ekf_update(belief: &GaussianBelief, y: &DVector<f64>, model: &StateSpaceModel) -> Result<GaussianBelief> {
    ekf_update_with_r(belief, y, model, &model.r)
}

pub fn ekf_update_with_r(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    r: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    check_belief_dim(belief, model)?;
    let h = model.jac_h(&belief.mean)?;
    let mom = MeasurementMoments {
        mean: model.h(&belief.mean),
        cov: &h * &belief.cov * h.transpose(),
        cross: &belief.cov * h.transpose(),
    };
    gain_update(belief, &mom, y, &DVector::zeros(model.m), r)
}

/// EKF prediction using the transition Jacobian.
pub fn ekf_predict(belief: &GaussianBelief, model: &StateSpaceModel, k: usize) -> Result<GaussianBelief> {
    check_belief_dim(belief, model)?;
    let f = model.jac_f(&belief.mean)?;
    let cov = symmetrize_psd(&(&f * &belief.cov * f.transpose() + model.q_at(k)))?;
    Ok(GaussianBelief { mean: model.f_at(k, &belief.mean), cov })
}

/// Rauch–Tung–Striebel backward pass.
///
/// `filtered[0]` is step 1 and `predicted[k]` is the one-step prediction made
/// from `filtered[k]`; it may have length `K − 1` or `K` (a trailing entry is
/// ignored).
pub fn rts_backward(
    filtered: &[GaussianBelief],
    predicted: &[GaussianBelief],
    model: &StateSpaceModel,
    params: &UtParams,
) -> Result<Vec<GaussianBelief>> {
    let k = filtered.len();
    if k == 0 {
        return Ok(Vec::new());
    }
    if predicted.len() + 1 != k && predicted.len() != k {
        return Err(Error::Dimension(format!(
            "filtered has {k} entries but predicted has {}",
            predicted.len()
        )));
    }
    let mut smoothed = vec![filtered[k - 1].clone(); k];
    for i in (0..k - 1).rev() {
        let f = &filtered[i];
        let p = &predicted[i];
        let l = transition_crosscov(f, model, i + 2, params)?;
        let g = solve_right(&l, &p.cov)?;
        let next = &smoothed[i + 1];
        let mean = &f.mean + &g * (&next.mean - &p.mean);
        let cov = &f.cov + &g * (&next.cov - &p.cov) * g.transpose();
        smoothed[i] = GaussianBelief { mean, cov: symmetrize_psd(&cov)? };
    }
    Ok(smoothed)
}

/// `A B⁻¹` for symmetric positive definite `B`.
pub(crate) fn solve_right(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let at = a.transpose();
    let xt = match b.clone().cholesky() {
        Some(ch) => ch.solve(&at),
        None => b.clone().lu().solve(&at).ok_or(Error::Singular("predicted covariance"))?,
    };
    Ok(xt.transpose())
}

/// Log-density of `N(y | mean, cov)`.
pub fn log_normal_pdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let d = y.len();
    let ch = cov.clone().cholesky().ok_or(Error::Cholesky)?;
    let e = y - mean;
    let z = ch.l().solve_lower_triangular(&e).ok_or(Error::Cholesky)?;
    let logdet: f64 = ch.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    Ok(-0.5 * (z.norm_squared() + logdet + d as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Systematic resampling with a seeded offset; returns 0-based indices.
pub fn systematic_resample(weights: &[f64], seed: u64) -> Result<Vec<usize>> {
    let mut rng = stream_rng(seed, 0);
    let u0: f64 = rng.random();
    let mut out = Vec::with_capacity(weights.len());
    systematic_resample_with(weights, u0, &mut out)?;
    Ok(out)
}

/// Systematic resampling with the offset `u0 ∈ [0, 1)` supplied by the caller.
///
/// Draws `u_i = (u0 + i)/N` and writes `N` indices into `out`.
pub fn systematic_resample_with(weights: &[f64], u0: f64, out: &mut Vec<usize>) -> Result<()> {
    let n = weights.len();
    if n == 0 {
        return Err(Error::InvalidParameter("no weights".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidParameter("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all weights are zero".into()));
    }
    if (total - 1.0).abs() > 1e-9 {
        log::debug!("systematic_resample: renormalising weights summing to {total}");
    }
    let last_positive = weights.iter().rposition(|w| *w > 0.0).unwrap_or(n - 1);
    out.clear();
    let mut j = 0usize;
    let mut cum = weights[0] / total;
    for i in 0..n {
        let u = (u0 + i as f64) / n as f64;
        while j < last_positive && u >= cum {
            j += 1;
            cum += weights[j] / total;
        }
        out.push(j);
    }
    Ok(())
}

fn check_belief_dim(belief: &GaussianBelief, model: &StateSpaceModel) -> Result<()> {
    if belief.dim() != model.n || belief.cov.shape() != (model.n, model.n) {
        return Err(Error::Dimension(format!(
            "belief dimension {} does not match model n = {}",
            belief.dim(),
            model.n
        )));
    }
    Ok(())
}
