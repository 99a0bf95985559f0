//! MAP-based EKF for at most one outlier-corrupted measurement dimension per
//! step.
//!
//! Each step forms `m + 1` EKF hypotheses (no outlier, or an outlier in
//! dimension `i` with extra variance `σᵢ²`) and keeps the mode whose mean has
//! the highest mixture posterior density.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{ekf_predict, gain_update, log_normal_pdf, MeasurementMoments};
use crate::ssm::{GaussianBelief, StateSpaceModel};

/// Prior over "no outlier" and "outlier in dimension i".
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierHypothesisPrior {
    /// `pi[0]` for the nominal hypothesis, `pi[i]` for dimension `i`.
    pub pi: Vec<f64>,
    /// Outlier variance `σᵢ²` for dimension `i` (0-based), the only nonzero
    /// entry of `Vⁱ`.
    pub sigma2: Vec<f64>,
}

impl OutlierHypothesisPrior {
    pub fn new(pi: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        let p = Self { pi, sigma2 };
        p.validate()?;
        Ok(p)
    }

    /// Builds the prior from full `Vⁱ` matrices, checking that each has a
    /// single nonzero diagonal entry at `(i, i)`.
    pub fn from_matrices(pi: Vec<f64>, v: &[DMatrix<f64>]) -> Result<Self> {
        let m = v.len();
        let mut sigma2 = Vec::with_capacity(m);
        for (i, vi) in v.iter().enumerate() {
            if vi.shape() != (m, m) {
                return Err(Error::Dimension(format!("V{} must be {m}x{m}", i + 1)));
            }
            for r in 0..m {
                for c in 0..m {
                    if (r != i || c != i) && vi[(r, c)] != 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "V{} may only be nonzero at its own diagonal entry",
                            i + 1
                        )));
                    }
                }
            }
            sigma2.push(vi[(i, i)]);
        }
        Self::new(pi, sigma2)
    }

    /// Equal outlier probability `p_out / m` per dimension.
    pub fn uniform(m: usize, p_out: f64, sigma2: f64) -> Result<Self> {
        let mut pi = vec![p_out / m as f64; m + 1];
        pi[0] = 1.0 - p_out;
        Self::new(pi, vec![sigma2; m])
    }

    pub fn m(&self) -> usize {
        self.sigma2.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pi.len() != self.sigma2.len() + 1 {
            return Err(Error::Dimension("pi must have m + 1 entries".into()));
        }
        if self.pi.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidParameter("pi entries must be non-negative".into()));
        }
        let s: f64 = self.pi.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("pi sums to {s}, expected 1")));
        }
        if self.sigma2.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter("outlier variances must be non-negative".into()));
        }
        Ok(())
    }
}

/// One mixture component of the per-step posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub belief: GaussianBelief,
    /// Kalman gain of this hypothesis.
    pub gain: DMatrix<f64>,
    /// `log N(y | ȳ, Sⁱ) + log πⁱ`.
    pub log_evidence: f64,
}

/// EKF posteriors and log-evidences of all `m + 1` hypotheses.
pub fn hypothesis_posteriors(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    hp: &OutlierHypothesisPrior,
) -> Result<Vec<Hypothesis>> {
    hypothesis_posteriors_with_r(prior, y, model, &model.r, hp)
}

pub fn hypothesis_posteriors_with_r(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    r: &DMatrix<f64>,
    hp: &OutlierHypothesisPrior,
) -> Result<Vec<Hypothesis>> {
    hp.validate()?;
    let m = model.m;
    if hp.m() != m {
        return Err(Error::Dimension(format!("prior covers {} dimensions, model has {m}", hp.m())));
    }
    let h = model.jac_h(&prior.mean)?;
    let ybar = model.h(&prior.mean);
    let mom = MeasurementMoments {
        mean: ybar.clone(),
        cov: &h * &prior.cov * h.transpose(),
        cross: &prior.cov * h.transpose(),
    };
    let zero = DVector::zeros(m);
    let mut out = Vec::with_capacity(m + 1);
    for i in 0..=m {
        let mut r_i = r.clone();
        if i > 0 {
            r_i[(i - 1, i - 1)] += hp.sigma2[i - 1];
        }
        let belief = gain_update(prior, &mom, y, &zero, &r_i)?;
        let s = &mom.cov + &r_i;
        let gain = match s.clone().cholesky() {
            Some(ch) => ch.solve(&mom.cross.transpose()).transpose(),
            None => return Err(Error::Singular("hypothesis innovation covariance")),
        };
        let ll = log_normal_pdf(y, &ybar, &s)?;
        out.push(Hypothesis { belief, gain, log_evidence: ll + hp.pi[i].ln() });
    }
    Ok(out)
}

/// Log mixture density of the posterior at each hypothesis mean.
pub fn mode_scores(hyps: &[Hypothesis]) -> Result<Vec<f64>> {
    let covs: Vec<_> = hyps
        .iter()
        .map(|h| {
            if h.log_evidence == f64::NEG_INFINITY {
                None
            } else {
                Some(h.belief.cov.clone())
            }
        })
        .collect();
    let mut scores = Vec::with_capacity(hyps.len());
    for hi in hyps {
        let mut terms = Vec::with_capacity(hyps.len());
        for (hl, cov) in hyps.iter().zip(&covs) {
            if let Some(cov) = cov {
                terms.push(log_normal_pdf(&hi.belief.mean, &hl.belief.mean, cov)? + hl.log_evidence);
            }
        }
        scores.push(log_sum_exp(&terms));
    }
    Ok(scores)
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// One measurement update; returns the selected hypothesis and its index
/// (0 = nominal, `i` = outlier in dimension `i`). Ties go to the smallest
/// index.
pub fn map_ekf_step(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    hp: &OutlierHypothesisPrior,
) -> Result<(GaussianBelief, usize)> {
    map_ekf_step_with_r(prior, y, model, &model.r, hp)
}

pub fn map_ekf_step_with_r(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    r: &DMatrix<f64>,
    hp: &OutlierHypothesisPrior,
) -> Result<(GaussianBelief, usize)> {
    let hyps = hypothesis_posteriors_with_r(prior, y, model, r, hp)?;
    let scores = mode_scores(&hyps)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok((hyps[best].belief.clone(), best))
}

/// Runs EKF prediction and the MAP update over a measurement sequence.
pub fn map_ekf_run(
    model: &StateSpaceModel,
    ys: &[DVector<f64>],
    prior: &GaussianBelief,
    hp: &OutlierHypothesisPrior,
) -> Result<(Vec<GaussianBelief>, Vec<usize>)> {
    let mut belief = prior.clone();
    let mut beliefs = Vec::with_capacity(ys.len());
    let mut modes = Vec::with_capacity(ys.len());
    for (k, y) in ys.iter().enumerate() {
        let pred = ekf_predict(&belief, model, k + 1)?;
        let (post, mode) = map_ekf_step_with_r(&pred, y, model, &model.r_at(k + 1), hp)?;
        belief = post;
        beliefs.push(belief.clone());
        modes.push(mode);
    }
    Ok((beliefs, modes))
}
