//! Measurement abnormality injection with an event log.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pf::IdealSchedule;
use crate::rng::stream_rng;
use crate::ssm::{CorruptionEvent, CorruptionKind};

use super::scenarios::uniform_in;

/// Corruption mode and parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CorruptionMode {
    None,
    /// Per-dimension outliers with variance `γ R(i,i)`; γ is drawn once per
    /// replicate from `U(gamma_min, gamma_max)`.
    GmmOutlier { lambda: f64, gamma_min: f64, gamma_max: f64 },
    /// Per-dimension missing entries, replaced by the sentinel value 0.
    Missing { lambda: f64 },
    /// Random bias appearing at `onset` (1-based) and lasting until `end`.
    BiasRandom {
        lambda: f64,
        #[serde(default = "default_xi")]
        xi: f64,
        /// Variance of the per-step bias jitter.
        #[serde(default = "default_sigma_o")]
        sigma_o: f64,
        #[serde(default = "default_onset")]
        onset: usize,
        #[serde(default)]
        end: Option<usize>,
    },
    /// Drift, bias and outlier windows of the scalar growth benchmark.
    Piecewise,
    /// Per-sensor TOA corruption propagated through the shared reference.
    TdoaOutlier { lambda: f64, gamma: f64 },
}

fn default_xi() -> f64 {
    90.0
}
fn default_sigma_o() -> f64 {
    0.4
}
fn default_onset() -> usize {
    1
}

impl CorruptionMode {
    pub fn validate(&self) -> Result<()> {
        let lam_ok = |l: f64| (0.0..=1.0).contains(&l);
        let ok = match self {
            CorruptionMode::None | CorruptionMode::Piecewise => true,
            CorruptionMode::GmmOutlier { lambda, gamma_min, gamma_max } => {
                lam_ok(*lambda) && *gamma_min >= 1.0 && gamma_max >= gamma_min
            }
            CorruptionMode::Missing { lambda } => lam_ok(*lambda),
            CorruptionMode::BiasRandom { lambda, xi, sigma_o, onset, end } => {
                lam_ok(*lambda) && *xi >= 0.0 && *sigma_o >= 0.0 && *onset >= 1 && end.is_none_or(|e| e >= *onset)
            }
            CorruptionMode::TdoaOutlier { lambda, gamma } => lam_ok(*lambda) && *gamma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid corruption parameters: {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionMode::None => "none",
            CorruptionMode::GmmOutlier { .. } => "gmm-outlier",
            CorruptionMode::Missing { .. } => "missing",
            CorruptionMode::BiasRandom { .. } => "bias-random",
            CorruptionMode::Piecewise => "piecewise",
            CorruptionMode::TdoaOutlier { .. } => "tdoa-outlier",
        }
    }
}

/// Corrupted measurements with the ground truth of what was injected.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub measurements: Vec<DVector<f64>>,
    pub missing: Vec<Vec<bool>>,
    pub log: Vec<CorruptionEvent>,
    /// `abnormal[k][i]` is true when dimension `i` at step `k + 1` was touched.
    pub abnormal: Vec<Vec<bool>>,
    /// Known offsets and extra variances, for oracle filters.
    pub ideal: IdealSchedule,
}

/// Deterministic part of the growth benchmark abnormality at step `k`.
pub fn piecewise_offset(k: usize) -> f64 {
    match k {
        100..=500 => 50.0 + 0.25 * (k as f64 - 100.0),
        600..=800 => 150.0,
        _ => 0.0,
    }
}

/// Outlier window and variance of the growth benchmark.
pub const PIECEWISE_OUTLIER_WINDOW: (usize, usize) = (900, 1300);
pub const PIECEWISE_OUTLIER_PROB: f64 = 0.4;
pub const PIECEWISE_OUTLIER_VAR: f64 = 50.0 * 50.0 * 5.0;

/// Applies `mode` to clean measurements (step `k` at index `k − 1`).
pub fn corrupt(clean: &[DVector<f64>], r: &DMatrix<f64>, mode: &CorruptionMode, seed: u64) -> Result<Corrupted> {
    mode.validate()?;
    let kk = clean.len();
    let m = r.nrows();
    if clean.iter().any(|y| y.len() != m) {
        return Err(Error::Dimension("measurement length differs from R".into()));
    }
    let mut rng = stream_rng(seed, 7);
    let mut out = Corrupted {
        measurements: clean.to_vec(),
        missing: vec![vec![false; m]; kk],
        log: Vec::new(),
        abnormal: vec![vec![false; m]; kk],
        ideal: IdealSchedule { offset: vec![DVector::zeros(m); kk], extra_var: vec![DVector::zeros(m); kk] },
    };
    let normal = |rng: &mut crate::rng::StreamRng| -> f64 { StandardNormal.sample(rng) };
    match mode {
        CorruptionMode::None => {}
        CorruptionMode::GmmOutlier { lambda, gamma_min, gamma_max } => {
            let gamma = uniform_in(&mut rng, *gamma_min, *gamma_max);
            for k in 0..kk {
                for i in 0..m {
                    if rng.random::<f64>() < *lambda {
                        let var = (gamma - 1.0) * r[(i, i)];
                        let v = var.sqrt() * normal(&mut rng);
                        out.measurements[k][i] += v;
                        out.abnormal[k][i] = true;
                        out.ideal.extra_var[k][i] = var;
                        out.log.push(CorruptionEvent { step: k + 1, dim: i + 1, kind: CorruptionKind::Outlier, value: v });
                    }
                }
            }
        }
        CorruptionMode::Missing { lambda } => {
            for k in 0..kk {
                for i in 0..m {
                    if rng.random::<f64>() < *lambda {
                        out.measurements[k][i] = 0.0;
                        out.missing[k][i] = true;
                        out.abnormal[k][i] = true;
                        out.log.push(CorruptionEvent { step: k + 1, dim: i + 1, kind: CorruptionKind::Missing, value: 0.0 });
                    }
                }
            }
        }
        CorruptionMode::BiasRandom { lambda, xi, sigma_o, onset, end } => {
            let mut active = vec![false; m];
            let mut o = vec![0.0; m];
            let last = end.unwrap_or(usize::MAX);
            for k in 1..=kk {
                if k == *onset {
                    for i in 0..m {
                        active[i] = rng.random::<f64>() < *lambda;
                        o[i] = uniform_in(&mut rng, 0.0, *xi);
                    }
                }
                if k < *onset || k > last {
                    continue;
                }
                for i in 0..m {
                    if active[i] {
                        let b = o[i] + sigma_o.sqrt() * normal(&mut rng);
                        out.measurements[k - 1][i] += b;
                        out.abnormal[k - 1][i] = true;
                        out.ideal.offset[k - 1][i] = o[i];
                        out.ideal.extra_var[k - 1][i] = *sigma_o;
                        out.log.push(CorruptionEvent { step: k, dim: i + 1, kind: CorruptionKind::Bias, value: b });
                    }
                }
            }
        }
        CorruptionMode::Piecewise => {
            let (lo, hi) = PIECEWISE_OUTLIER_WINDOW;
            for k in 1..=kk {
                for i in 0..m {
                    let det = piecewise_offset(k);
                    if det != 0.0 {
                        let kind = if k <= 500 { CorruptionKind::Drift } else { CorruptionKind::Bias };
                        out.measurements[k - 1][i] += det;
                        out.abnormal[k - 1][i] = true;
                        out.ideal.offset[k - 1][i] = det;
                        out.log.push(CorruptionEvent { step: k, dim: i + 1, kind, value: det });
                    } else if (lo..=hi).contains(&k) && rng.random::<f64>() < PIECEWISE_OUTLIER_PROB {
                        let v = PIECEWISE_OUTLIER_VAR.sqrt() * normal(&mut rng);
                        out.measurements[k - 1][i] += v;
                        out.abnormal[k - 1][i] = true;
                        out.ideal.extra_var[k - 1][i] = PIECEWISE_OUTLIER_VAR;
                        out.log.push(CorruptionEvent { step: k, dim: i + 1, kind: CorruptionKind::Outlier, value: v });
                    }
                }
            }
        }
        CorruptionMode::TdoaOutlier { lambda, gamma } => {
            let mut toa = vec![false; m + 1];
            for k in 0..kk {
                for t in toa.iter_mut() {
                    *t = rng.random::<f64>() < *lambda;
                }
                for i in 0..m {
                    if toa[0] || toa[i + 1] {
                        let var = gamma * r[(i, i)];
                        let v = var.sqrt() * normal(&mut rng);
                        out.measurements[k][i] += v;
                        out.abnormal[k][i] = true;
                        out.ideal.extra_var[k][i] = var;
                        out.log.push(CorruptionEvent { step: k + 1, dim: i + 1, kind: CorruptionKind::Outlier, value: v });
                    }
                }
            }
        }
    }
    Ok(out)
}
