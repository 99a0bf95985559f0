//! Bayesian Cramér–Rao bound recursions for filtering and smoothing, with
//! hard-rejection measurement information and Monte-Carlo Fisher terms for
//! randomly biased measurements.
//!
//! Step indices run `1..=K`; `terms[i]` and the filter outputs at index `i`
//! belong to step `i + 1`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use crate::emorf::r_inv_from_flags;
use crate::error::{Error, Result};
use crate::map_ekf::log_sum_exp;
use crate::rng::{replicate_seed, stream_rng};
use crate::ssm::{psd_sqrt, symmetrize_psd, StateSpaceModel};

/// Fisher information blocks for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherTerms {
    /// `⟨F̃ᵀ Q⁻¹ F̃⟩`
    pub d11: DMatrix<f64>,
    /// `−⟨F̃ᵀ⟩ Q⁻¹`
    pub d12: DMatrix<f64>,
    /// `Q⁻¹`
    pub d22_1: DMatrix<f64>,
    /// Measurement information.
    pub d22_2: DMatrix<f64>,
}

impl FisherTerms {
    pub fn d21(&self) -> DMatrix<f64> {
        self.d12.transpose()
    }
}

fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    match m.clone().cholesky() {
        Some(c) => Ok(c.inverse()),
        None => m.clone().try_inverse().ok_or(Error::Singular(what)),
    }
}

/// Monte-Carlo state samples: `out[k][j]` is the `j`-th trajectory at step
/// `k`, with `out[0]` drawn from `N(x0_mean, x0_cov)`.
pub fn state_samples(
    model: &StateSpaceModel,
    x0_mean: &DVector<f64>,
    x0_cov: &DMatrix<f64>,
    k_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<DVector<f64>>>> {
    if n_samples == 0 {
        return Err(Error::InvalidParameter("need at least one state sample".into()));
    }
    let s0 = psd_sqrt(x0_cov)?;
    let n = model.n;
    let trajs: Vec<Vec<DVector<f64>>> = (0..n_samples)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(replicate_seed(seed, j as u64), 2);
            let mut z = vec![0.0; n];
            let mut w = vec![0.0; n];
            crate::ssm::gaussian_into(&s0, &mut rng, &mut z);
            let mut x = x0_mean + DVector::from_column_slice(&z);
            let mut t = Vec::with_capacity(k_steps + 1);
            t.push(x.clone());
            let mut next = vec![0.0; n];
            for k in 1..=k_steps {
                model.f_at_into(k, x.as_slice(), &mut next);
                model.sample_process_noise(k, &mut rng, &mut w);
                for i in 0..n {
                    next[i] += w[i];
                }
                x = DVector::from_column_slice(&next);
                t.push(x.clone());
            }
            t
        })
        .collect();
    Ok((0..=k_steps).map(|k| trajs.iter().map(|t| t[k].clone()).collect()).collect())
}

/// Transition blocks for step `k` from samples of the previous state.
pub fn transition_terms(
    model: &StateSpaceModel,
    prev: &[DVector<f64>],
    k: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let q_inv = spd_inverse(&model.q_at(k), "process noise covariance")?;
    let n = model.n;
    let mut d11 = DMatrix::zeros(n, n);
    let mut ft = DMatrix::zeros(n, n);
    for x in prev {
        let f = model.jac_f(x)?;
        d11 += f.transpose() * &q_inv * &f;
        ft += f.transpose();
    }
    let c = prev.len() as f64;
    d11 /= c;
    ft /= c;
    Ok((symmetrize_psd(&d11)?, -(ft * &q_inv), q_inv))
}

/// `⟨H̃ᵀ R⁻¹(𝓘) H̃⟩` with rejected rows and columns of `R⁻¹` zeroed.
pub fn measurement_information(
    model: &StateSpaceModel,
    samples: &[DVector<f64>],
    kept: &[bool],
    k: usize,
) -> Result<DMatrix<f64>> {
    if kept.len() != model.m {
        return Err(Error::Dimension("rejection mask length".into()));
    }
    let r_inv = r_inv_from_flags(&model.r_at(k), kept, 0.0)?;
    let n = model.n;
    let mut d = DMatrix::zeros(n, n);
    for x in samples {
        let h = model.jac_h(x)?;
        d += h.transpose() * &r_inv * &h;
    }
    d /= samples.len() as f64;
    symmetrize_psd(&d)
}

/// Fisher terms for steps `1..=K`; `kept[k - 1][i]` is false when dimension
/// `i` is rejected at step `k`.
pub fn fisher_terms(
    model: &StateSpaceModel,
    kept: &[Vec<bool>],
    samples: &[Vec<DVector<f64>>],
) -> Result<Vec<FisherTerms>> {
    let k_steps = kept.len();
    if samples.len() < k_steps + 1 {
        return Err(Error::Dimension("need state samples for steps 0..=K".into()));
    }
    (1..=k_steps)
        .map(|k| {
            let (d11, d12, d22_1) = transition_terms(model, &samples[k - 1], k)?;
            let d22_2 = measurement_information(model, &samples[k], &kept[k - 1], k)?;
            Ok(FisherTerms { d11, d12, d22_1, d22_2 })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcrbFilterOutput {
    pub j_minus: Vec<DMatrix<f64>>,
    pub j_plus: Vec<DMatrix<f64>>,
    pub bcrb: Vec<DMatrix<f64>>,
}

/// Forward information recursion from precomputed Fisher terms.
pub fn bcrb_filter_from_terms(terms: &[FisherTerms], j0: &DMatrix<f64>) -> Result<BcrbFilterOutput> {
    let mut out = BcrbFilterOutput {
        j_minus: Vec::with_capacity(terms.len()),
        j_plus: Vec::with_capacity(terms.len()),
        bcrb: Vec::with_capacity(terms.len()),
    };
    let mut j = j0.clone();
    for t in terms {
        let inner = spd_inverse(&(&j + &t.d11), "J + D11")?;
        let jm = symmetrize_psd(&(&t.d22_1 - t.d21() * inner * &t.d12))?;
        let jp = symmetrize_psd(&(&jm + &t.d22_2))?;
        out.bcrb.push(symmetrize_psd(&spd_inverse(&jp, "filtering information")?)?);
        out.j_minus.push(jm);
        out.j_plus.push(jp.clone());
        j = jp;
    }
    Ok(out)
}

/// BCRB for filtering under a hard rejection schedule.
pub fn bcrb_filter(
    model: &StateSpaceModel,
    kept: &[Vec<bool>],
    samples: &[Vec<DVector<f64>>],
    j0: &DMatrix<f64>,
) -> Result<(BcrbFilterOutput, Vec<FisherTerms>)> {
    let terms = fisher_terms(model, kept, samples)?;
    Ok((bcrb_filter_from_terms(&terms, j0)?, terms))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcrbSmootherOutput {
    pub j: Vec<DMatrix<f64>>,
    pub bcrb: Vec<DMatrix<f64>>,
}

/// Backward information recursion
/// `Jˢₖ = J⁺ₖ + D¹¹ − D¹²(D²²(1) + Jˢₖ₊₁ − J⁻ₖ₊₁)⁻¹D²¹` with `Jˢ_K = J⁺_K`.
pub fn bcrb_smoother(filter: &BcrbFilterOutput, terms: &[FisherTerms]) -> Result<BcrbSmootherOutput> {
    let k_steps = filter.j_plus.len();
    if terms.len() != k_steps || filter.j_minus.len() != k_steps {
        return Err(Error::Dimension("filter outputs and Fisher terms must align".into()));
    }
    if k_steps == 0 {
        return Ok(BcrbSmootherOutput { j: vec![], bcrb: vec![] });
    }
    let mut js = vec![DMatrix::zeros(0, 0); k_steps];
    js[k_steps - 1] = filter.j_plus[k_steps - 1].clone();
    for i in (0..k_steps - 1).rev() {
        let t = &terms[i + 1];
        let inner = spd_inverse(&(&t.d22_1 + &js[i + 1] - &filter.j_minus[i + 1]), "smoother inner matrix")?;
        let j = &filter.j_plus[i] + &t.d11 - &t.d12 * inner * t.d21();
        js[i] = symmetrize_psd(&j)?;
    }
    let bcrb = js
        .iter()
        .map(|j| spd_inverse(j, "smoothing information").and_then(|b| symmetrize_psd(&b)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BcrbSmootherOutput { j: js, bcrb })
}

/// Random bias prior: each dimension is biased with probability `lambda`
/// by `o + Δo`, `o ~ U(0, xi)`, `Δo ~ N(0, sigma_o)` (variance).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BiasPrior {
    pub lambda: f64,
    pub xi: f64,
    pub sigma_o: f64,
}

impl BiasPrior {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParameter("lambda must lie in [0, 1]".into()));
        }
        if !(self.xi >= 0.0) || !(self.sigma_o >= 0.0) {
            return Err(Error::InvalidParameter("xi and sigma_o must be non-negative".into()));
        }
        Ok(())
    }

    fn magnitude<G: Rng + ?Sized>(&self, rng: &mut G) -> f64 {
        let o = if self.xi > 0.0 { Uniform::new(0.0, self.xi).expect("xi > 0").sample(rng) } else { 0.0 };
        o + self.jitter(rng)
    }

    fn jitter<G: Rng + ?Sized>(&self, rng: &mut G) -> f64 {
        if self.sigma_o > 0.0 {
            Normal::new(0.0, self.sigma_o.sqrt()).expect("sigma_o > 0").sample(rng)
        } else {
            0.0
        }
    }
}

/// Which measurement model is in force at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasPhase {
    Nominal,
    /// Bias may appear at this step.
    Onset,
    /// Bias drawn at the last onset persists with fresh jitter.
    Persist,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McFisherConfig {
    /// Inner bias or indicator draws per evaluation.
    pub n_inner: usize,
    /// Joint `(x, y)` samples averaged over.
    pub n_outer: usize,
    pub seed: u64,
}

impl Default for McFisherConfig {
    fn default() -> Self {
        Self { n_inner: 100, n_outer: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McFisherEstimate {
    /// Per-step measurement information for steps `1..=K`.
    pub d22_2: Vec<DMatrix<f64>>,
    /// Element-wise standard errors of `d22_2`.
    pub std_err: Vec<DMatrix<f64>>,
    /// State samples for steps `0..=K`.
    pub samples: Vec<Vec<DVector<f64>>>,
}

struct BiasedTrajectory {
    xs: Vec<DVector<f64>>,
    ys: Vec<DVector<f64>>,
}

fn simulate_biased<G: Rng + ?Sized>(
    model: &StateSpaceModel,
    x0: &DVector<f64>,
    phases: &[BiasPhase],
    bias: &BiasPrior,
    rng: &mut G,
) -> BiasedTrajectory {
    let (n, m) = (model.n, model.m);
    let mut x = x0.clone();
    let mut xs = vec![x.clone()];
    let mut ys = vec![DVector::zeros(m)];
    let mut active = vec![false; m];
    let mut o = vec![0.0; m];
    let mut w = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut next = vec![0.0; n];
    let mut hy = vec![0.0; m];
    for (idx, phase) in phases.iter().enumerate() {
        let k = idx + 1;
        model.f_at_into(k, x.as_slice(), &mut next);
        model.sample_process_noise(k, rng, &mut w);
        for i in 0..n {
            next[i] += w[i];
        }
        x = DVector::from_column_slice(&next);
        model.h_into(x.as_slice(), &mut hy);
        model.sample_measurement_noise(k, rng, &mut v);
        match phase {
            BiasPhase::Nominal => active.iter_mut().for_each(|a| *a = false),
            BiasPhase::Onset => {
                for i in 0..m {
                    active[i] = rng.random::<f64>() < bias.lambda;
                    o[i] = if bias.xi > 0.0 { Uniform::new(0.0, bias.xi).expect("xi > 0").sample(rng) } else { 0.0 };
                }
            }
            BiasPhase::Persist => {}
        }
        let y = DVector::from_fn(m, |i, _| {
            let b = if active[i] { o[i] + bias.jitter(rng) } else { 0.0 };
            hy[i] + v[i] + b
        });
        xs.push(x.clone());
        ys.push(y);
    }
    BiasedTrajectory { xs, ys }
}

/// Monte-Carlo estimate of the measurement information under the random
/// bias model, one entry per step of `phases`.
///
/// Onset steps marginalise the bias by sampling it from its prior; persistence
/// steps condition on the previous measurement through sampled indicator
/// matrices. The score is formed from self-normalised mixture weights.
pub fn mc_fisher_bias_terms(
    model: &StateSpaceModel,
    x0_mean: &DVector<f64>,
    x0_cov: &DMatrix<f64>,
    phases: &[BiasPhase],
    bias: &BiasPrior,
    cfg: &McFisherConfig,
) -> Result<McFisherEstimate> {
    bias.validate()?;
    if cfg.n_inner < 10 || cfg.n_outer < 10 {
        return Err(Error::InvalidParameter("Monte-Carlo sample counts must be at least 10".into()));
    }
    let (n, m) = (model.n, model.m);
    let s0 = psd_sqrt(x0_cov)?;
    let trajs: Vec<BiasedTrajectory> = (0..cfg.n_outer)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(replicate_seed(cfg.seed, j as u64), 3);
            let mut z = vec![0.0; n];
            crate::ssm::gaussian_into(&s0, &mut rng, &mut z);
            let x0 = x0_mean + DVector::from_column_slice(&z);
            simulate_biased(model, &x0, phases, bias, &mut rng)
        })
        .collect();
    let sigma_o = DMatrix::identity(m, m) * bias.sigma_o;
    let per_step: Vec<(DMatrix<f64>, DMatrix<f64>)> = (1..=phases.len())
        .into_par_iter()
        .map(|k| {
            let phase = phases[k - 1];
            let samples: Vec<&DVector<f64>> = trajs.iter().map(|t| &t.xs[k]).collect();
            let mut rng = stream_rng(replicate_seed(cfg.seed ^ 0x9e37_79b9, k as u64), 4);
            let r = model.r_at(k);
            let mut outers = Vec::with_capacity(cfg.n_outer);
            match phase {
                BiasPhase::Nominal => {
                    let r_inv = spd_inverse(&r, "measurement noise covariance")?;
                    for x in &samples {
                        let h = model.jac_h(x)?;
                        outers.push(h.transpose() * &r_inv * &h);
                    }
                }
                BiasPhase::Onset => {
                    let r_inv = spd_inverse(&r, "measurement noise covariance")?;
                    let draws: Vec<DVector<f64>> = (0..cfg.n_inner)
                        .map(|_| {
                            DVector::from_fn(m, |_, _| {
                                if rng.random::<f64>() < bias.lambda {
                                    bias.magnitude(&mut rng)
                                } else {
                                    0.0
                                }
                            })
                        })
                        .collect();
                    for (t, x) in trajs.iter().zip(&samples) {
                        let hx = model.h(x);
                        let ht = model.jac_h(x)?;
                        let e0 = &t.ys[k] - &hx;
                        let mut phi = Vec::with_capacity(draws.len());
                        let mut grads = Vec::with_capacity(draws.len());
                        for b in &draws {
                            let e = &e0 - b;
                            let g = &r_inv * &e;
                            phi.push(-0.5 * e.dot(&g));
                            grads.push(g);
                        }
                        let score = ht.transpose() * mixture_mean(&phi, &grads);
                        outers.push(&score * score.transpose());
                    }
                }
                BiasPhase::Persist => {
                    let r_prev = model.r_at(k - 1);
                    let pats: Vec<Vec<bool>> = (0..cfg.n_inner)
                        .map(|_| (0..m).map(|_| rng.random::<f64>() < bias.lambda).collect())
                        .collect();
                    let mut cache: std::collections::HashMap<Vec<bool>, (DMatrix<f64>, f64)> = Default::default();
                    for p in &pats {
                        if !cache.contains_key(p) {
                            let jm = DMatrix::from_fn(m, m, |a, b| if a == b && p[a] { 1.0 } else { 0.0 });
                            let s = &r + &jm * (&r_prev + &sigma_o * 2.0);
                            let ch = s.cholesky().ok_or(Error::Singular("persistence covariance"))?;
                            let logdet = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                            cache.insert(p.clone(), (ch.inverse(), logdet));
                        }
                    }
                    for (t, x) in trajs.iter().zip(&samples) {
                        let hx = model.h(x);
                        let ht = model.jac_h(x)?;
                        let prev_res = &t.ys[k - 1] - model.h(&t.xs[k - 1]);
                        let mut phi = Vec::with_capacity(pats.len());
                        let mut grads = Vec::with_capacity(pats.len());
                        for p in &pats {
                            let (s_inv, logdet) = &cache[p];
                            let e = DVector::from_fn(m, |i, _| {
                                t.ys[k][i] - hx[i] - if p[i] { prev_res[i] } else { 0.0 }
                            });
                            let g = s_inv * &e;
                            phi.push(-0.5 * e.dot(&g) - 0.5 * logdet);
                            grads.push(g);
                        }
                        let score = ht.transpose() * mixture_mean(&phi, &grads);
                        outers.push(&score * score.transpose());
                    }
                }
            }
            let cnt = outers.len() as f64;
            let mean = outers.iter().fold(DMatrix::zeros(n, n), |a, o| a + o) / cnt;
            let var = outers.iter().fold(DMatrix::zeros(n, n), |a, o| {
                let d = o - &mean;
                a + d.component_mul(&d)
            }) / (cnt - 1.0).max(1.0);
            let se = var.map(|v| (v / cnt).sqrt());
            Ok((symmetrize_psd(&mean)?, se))
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<Vec<DVector<f64>>> = (0..=phases.len()).map(|k| trajs.iter().map(|t| t.xs[k].clone()).collect()).collect();
    let (d22_2, std_err) = per_step.into_iter().unzip();
    Ok(McFisherEstimate { d22_2, std_err, samples })
}

/// `Σᵢ softmax(φ)ᵢ gᵢ`.
fn mixture_mean(phi: &[f64], grads: &[DVector<f64>]) -> DVector<f64> {
    let lse = log_sum_exp(phi);
    let mut acc = DVector::zeros(grads[0].len());
    for (p, g) in phi.iter().zip(grads) {
        acc += g * (p - lse).exp();
    }
    acc
}

/// BCRB for the biased-measurement scenario: transition terms from the
/// sampled states, measurement terms from [`mc_fisher_bias_terms`].
pub fn bcrb_biased(
    model: &StateSpaceModel,
    x0_mean: &DVector<f64>,
    x0_cov: &DMatrix<f64>,
    phases: &[BiasPhase],
    bias: &BiasPrior,
    cfg: &McFisherConfig,
) -> Result<(BcrbFilterOutput, McFisherEstimate)> {
    let est = mc_fisher_bias_terms(model, x0_mean, x0_cov, phases, bias, cfg)?;
    let terms = (1..=phases.len())
        .map(|k| {
            let (d11, d12, d22_1) = transition_terms(model, &est.samples[k - 1], k)?;
            Ok(FisherTerms { d11, d12, d22_1, d22_2: est.d22_2[k - 1].clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let j0 = spd_inverse(x0_cov, "initial covariance")?;
    Ok((bcrb_filter_from_terms(&terms, &j0)?, est))
}
