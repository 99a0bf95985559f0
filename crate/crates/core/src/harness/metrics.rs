//! Error metrics over single runs and Monte-Carlo ensembles.

use nalgebra::DVector;

use crate::error::{Error, Result};

fn check_aligned(truth: &[DVector<f64>], est: &[DVector<f64>]) -> Result<()> {
    if truth.len() != est.len() {
        return Err(Error::Dimension(format!("truth has {} steps, estimates {}", truth.len(), est.len())));
    }
    if truth.iter().zip(est).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Dimension("state dimension mismatch".into()));
    }
    Ok(())
}

fn sq_err(a: &DVector<f64>, b: &DVector<f64>, idx: Option<&[usize]>) -> f64 {
    match idx {
        Some(ix) => ix.iter().map(|&i| (a[i] - b[i]).powi(2)).sum(),
        None => (a - b).norm_squared(),
    }
}

/// Per-step error norm `‖xₖ − x̂ₖ‖` over the selected components.
pub fn error_series(truth: &[DVector<f64>], est: &[DVector<f64>], idx: Option<&[usize]>) -> Result<Vec<f64>> {
    check_aligned(truth, est)?;
    Ok(truth.iter().zip(est).map(|(a, b)| sq_err(a, b, idx).sqrt()).collect())
}

/// Time-averaged mean squared error of one run.
pub fn mse(truth: &[DVector<f64>], est: &[DVector<f64>], idx: Option<&[usize]>) -> Result<f64> {
    check_aligned(truth, est)?;
    if truth.is_empty() {
        return Err(Error::Dimension("empty trajectory".into()));
    }
    Ok(truth.iter().zip(est).map(|(a, b)| sq_err(a, b, idx)).sum::<f64>() / truth.len() as f64)
}

/// Root of [`mse`]; with position indices this is RMSE_pos of one run.
pub fn rmse(truth: &[DVector<f64>], est: &[DVector<f64>], idx: Option<&[usize]>) -> Result<f64> {
    Ok(mse(truth, est, idx)?.sqrt())
}

pub fn rmse_pos(truth: &[DVector<f64>], est: &[DVector<f64>], pos: &[usize]) -> Result<f64> {
    rmse(truth, est, Some(pos))
}

/// `(1/K) Σₖ sqrt((1/L) Σₗ ‖xₖˡ − x̂ₖˡ‖²)` over `L` runs.
pub fn trmse(truths: &[Vec<DVector<f64>>], ests: &[Vec<DVector<f64>>], idx: Option<&[usize]>) -> Result<f64> {
    if truths.len() != ests.len() || truths.is_empty() {
        return Err(Error::Dimension("need the same positive number of truth and estimate runs".into()));
    }
    let kk = truths[0].len();
    for (t, e) in truths.iter().zip(ests) {
        check_aligned(t, e)?;
        if t.len() != kk {
            return Err(Error::Dimension("runs differ in length".into()));
        }
    }
    if kk == 0 {
        return Err(Error::Dimension("empty trajectory".into()));
    }
    let l = truths.len() as f64;
    let mut acc = 0.0;
    for k in 0..kk {
        let s: f64 = truths.iter().zip(ests).map(|(t, e)| sq_err(&t[k], &e[k], idx)).sum();
        acc += (s / l).sqrt();
    }
    Ok(acc / kk as f64)
}

pub fn trmse_pos(truths: &[Vec<DVector<f64>>], ests: &[Vec<DVector<f64>>], pos: &[usize]) -> Result<f64> {
    trmse(truths, ests, Some(pos))
}

/// Median and quartiles by linear interpolation between order statistics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
}

pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn quartiles(values: &[f64]) -> Quartiles {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Quartiles { q1: quantile(&v, 0.25), median: quantile(&v, 0.5), q3: quantile(&v, 0.75), mean }
}

pub fn median(values: &[f64]) -> f64 {
    quartiles(values).median
}
