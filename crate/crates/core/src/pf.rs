//! Sequential Monte Carlo over augmented particles `(x, Θ, 𝒥)`.
//!
//! Each measurement dimension is in one of three regimes: 0 (nominal),
//! 1 (outlier, variance inflated by `U`) or 2 (bias, mean shifted by `Θ` and
//! variance inflated by `Υ`). A bias persists with random-walk drift `Δ` while
//! the regime stays at 2 and is redrawn from `U(c, d)` otherwise. The plain
//! bootstrap filter and an oracle-informed filter share the same loop.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gaussian::systematic_resample_with;
use crate::rng::stream_rng;
use crate::ssm::{is_diagonal, psd_sqrt, StateSpaceModel};

/// Abnormality model of the robust particle filter. All covariances are
/// diagonal and stored as vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AbnormalityConfig {
    pub u: DVector<f64>,
    pub upsilon: DVector<f64>,
    pub delta: DVector<f64>,
    pub c: DVector<f64>,
    pub d: DVector<f64>,
    /// `transition[a][b] = P(𝒥ₖ = b | 𝒥ₖ₋₁ = a)`.
    pub transition: [[f64; 3]; 3],
}

impl AbnormalityConfig {
    pub fn new(u: DVector<f64>, upsilon: DVector<f64>, delta: DVector<f64>, c: DVector<f64>, d: DVector<f64>) -> Result<Self> {
        let cfg = Self { u, upsilon, delta, c, d, transition: [[1.0 / 3.0; 3]; 3] };
        cfg.validate(cfg.u.len())?;
        Ok(cfg)
    }

    pub fn m(&self) -> usize {
        self.u.len()
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        for (name, v) in [("U", &self.u), ("Upsilon", &self.upsilon), ("Delta", &self.delta), ("c", &self.c), ("d", &self.d)] {
            if v.len() != m {
                return Err(Error::Dimension(format!("{name} has {} entries, expected {m}", v.len())));
            }
        }
        if self.u.iter().chain(self.upsilon.iter()).chain(self.delta.iter()).any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidParameter("U, Upsilon and Delta must be non-negative".into()));
        }
        if self.c.iter().zip(self.d.iter()).any(|(c, d)| !(c < d)) {
            return Err(Error::InvalidParameter("fresh-bias bounds need c < d".into()));
        }
        for row in &self.transition {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter("transition rows must lie on the simplex".into()));
            }
        }
        Ok(())
    }
}

/// A weighted sample of state, bias vector and regime labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedParticle {
    pub x: DVector<f64>,
    pub theta: DVector<f64>,
    pub regimes: Vec<u8>,
    pub weight: f64,
}

fn draw_regime<G: Rng + ?Sized>(row: &[f64; 3], rng: &mut G) -> u8 {
    let u: f64 = rng.random();
    if u < row[0] {
        0
    } else if u < row[0] + row[1] {
        1
    } else {
        2
    }
}

/// Draws the next particle from the transition densities.
pub fn propagate_particle<G: Rng + ?Sized>(
    p: &AugmentedParticle,
    model: &StateSpaceModel,
    cfg: &AbnormalityConfig,
    k: usize,
    rng: &mut G,
) -> AugmentedParticle {
    let n = model.n;
    let m = cfg.m();
    let mut x = DVector::zeros(n);
    model.f_at_into(k, p.x.as_slice(), x.as_mut_slice());
    let mut q = vec![0.0; n];
    model.sample_process_noise(k, rng, &mut q);
    for i in 0..n {
        x[i] += q[i];
    }
    let mut theta = DVector::zeros(m);
    let mut regimes = vec![0u8; m];
    for i in 0..m {
        theta[i] = next_theta(p.theta[i], p.regimes[i], i, cfg, rng);
        regimes[i] = draw_regime(&cfg.transition[p.regimes[i] as usize], rng);
    }
    AugmentedParticle { x, theta, regimes, weight: p.weight }
}

#[inline]
fn next_theta<G: Rng + ?Sized>(theta: f64, regime: u8, i: usize, cfg: &AbnormalityConfig, rng: &mut G) -> f64 {
    if regime == 2 {
        let z: f64 = StandardNormal.sample(rng);
        theta + cfg.delta[i].sqrt() * z
    } else {
        let u: f64 = rng.random();
        cfg.c[i] + (cfg.d[i] - cfg.c[i]) * u
    }
}

/// `log N(y | h(x) + 𝓘²⊙Θ, R + diag(𝓘¹)U + diag(𝓘²)Υ)`.
pub fn particle_log_likelihood(
    p: &AugmentedParticle,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    r: &DMatrix<f64>,
    cfg: &AbnormalityConfig,
) -> Result<f64> {
    let m = model.m;
    let mut hx = vec![0.0; m];
    model.h_into(p.x.as_slice(), &mut hx);
    let mut mean = DVector::from_vec(hx);
    let mut cov = r.clone();
    for i in 0..m {
        match p.regimes[i] {
            1 => cov[(i, i)] += cfg.u[i],
            2 => {
                mean[i] += p.theta[i];
                cov[(i, i)] += cfg.upsilon[i];
            }
            _ => {}
        }
    }
    if is_diagonal(&cov) {
        let mut ll = 0.0;
        for i in 0..m {
            let v = cov[(i, i)];
            if !(v >= 0.0) {
                return Err(Error::NotPsd("effective measurement variance must be non-negative".into()));
            }
            ll += scalar_loglik(y[i] - mean[i], v, (2.0 * PI * v).ln());
        }
        Ok(ll)
    } else {
        crate::gaussian::log_normal_pdf(y, &mean, &cov)
    }
}

/// Scalar Gaussian log-density of residual `e`; a zero variance is a point
/// mass at zero.
#[inline]
fn scalar_loglik(e: f64, var: f64, log_2pi_var: f64) -> f64 {
    if var > 0.0 {
        -0.5 * (log_2pi_var + e * e / var)
    } else if e == 0.0 {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Known per-step abnormality schedule used by the oracle filter.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealSchedule {
    /// Mean shift of each measurement.
    pub offset: Vec<DVector<f64>>,
    /// Extra variance added to each measurement dimension.
    pub extra_var: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PfMode {
    Robust,
    Bootstrap,
    Ideal(IdealSchedule),
}

/// Initial densities `p(x₀)`, `p(Θ₀)` (diagonal Gaussian) and `p(𝒥₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PfPriors {
    pub x0_mean: DVector<f64>,
    pub x0_cov: DMatrix<f64>,
    pub theta0_var: DVector<f64>,
    pub regime0: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfOutput {
    pub estimates: Vec<DVector<f64>>,
    pub theta_estimates: Vec<DVector<f64>>,
    pub ess: Vec<f64>,
    /// Steps at which every weight underflowed and a uniform reset was used.
    pub resets: usize,
}

/// Normalises log-weights in place into `w` and returns false on total underflow.
pub fn normalize_log_weights(logw: &[f64], w: &mut [f64]) -> bool {
    let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        let u = 1.0 / w.len() as f64;
        w.iter_mut().for_each(|v| *v = u);
        return false;
    }
    let mut s = 0.0;
    for (wi, li) in w.iter_mut().zip(logw) {
        *wi = (li - mx).exp();
        s += *wi;
    }
    w.iter_mut().for_each(|v| *v /= s);
    true
}

/// Runs the particle filter with `n_particles` particles.
#[allow(clippy::too_many_arguments)]
pub fn robust_pf_run(
    model: &StateSpaceModel,
    ys: &[DVector<f64>],
    priors: &PfPriors,
    cfg: &AbnormalityConfig,
    n_particles: usize,
    seed: u64,
    mode: &PfMode,
) -> Result<PfOutput> {
    let n = model.n;
    let m = model.m;
    if n_particles < 2 {
        return Err(Error::InvalidParameter("at least two particles are required".into()));
    }
    cfg.validate(m)?;
    if priors.x0_mean.len() != n || priors.x0_cov.shape() != (n, n) || priors.theta0_var.len() != m {
        return Err(Error::Dimension("prior dimensions".into()));
    }
    if let PfMode::Ideal(s) = mode {
        if s.offset.len() < ys.len() || s.extra_var.len() < ys.len() {
            return Err(Error::Dimension("ideal schedule shorter than the measurement sequence".into()));
        }
    }
    let np = n_particles;
    let mut rng = stream_rng(seed, 1);
    let robust = matches!(mode, PfMode::Robust);

    let mut xs = vec![0.0; np * n];
    let mut th = vec![0.0; np * m];
    let mut jr = vec![0u8; np * m];
    let x0s = psd_sqrt(&priors.x0_cov)?;
    let mut z = vec![0.0; n];
    let mut draw = vec![0.0; n];
    for l in 0..np {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for i in 0..n {
            let mut acc = priors.x0_mean[i];
            for j in 0..n {
                acc += x0s[(i, j)] * z[j];
            }
            draw[i] = acc;
        }
        xs[l * n..(l + 1) * n].copy_from_slice(&draw);
        if robust {
            for i in 0..m {
                let zz: f64 = StandardNormal.sample(&mut rng);
                th[l * m + i] = priors.theta0_var[i].sqrt() * zz;
                jr[l * m + i] = draw_regime(&priors.regime0, &mut rng);
            }
        }
    }

    let mut xs_new = vec![0.0; np * n];
    let mut th_new = vec![0.0; np * m];
    let mut jr_new = vec![0u8; np * m];
    let mut logw = vec![0.0; np];
    let mut w = vec![0.0; np];
    let mut idx = Vec::with_capacity(np);
    let mut fx = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut hx = vec![0.0; m];
    let mut out = PfOutput {
        estimates: Vec::with_capacity(ys.len()),
        theta_estimates: Vec::with_capacity(ys.len()),
        ess: Vec::with_capacity(ys.len()),
        resets: 0,
    };

    for (step, y) in ys.iter().enumerate() {
        let k = step + 1;
        let r = model.r_at(k);
        let r_diag = is_diagonal(&r);
        let sampler = model.process_noise_sampler(k);
        // Per-regime variances and their logs for the diagonal fast path.
        let mut var = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
        for i in 0..m {
            let base = r[(i, i)]
                + match mode {
                    PfMode::Ideal(s) => s.extra_var[step][i],
                    _ => 0.0,
                };
            var[0][i] = base;
            var[1][i] = base + cfg.u[i];
            var[2][i] = base + cfg.upsilon[i];
        }
        let logvar: Vec<Vec<f64>> = var.iter().map(|v| v.iter().map(|x| (2.0 * PI * x).ln()).collect()).collect();
        if r_diag && var.iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(Error::NotPsd("effective measurement variance must be non-negative".into()));
        }

        for l in 0..np {
            model.f_at_into(k, &xs[l * n..(l + 1) * n], &mut fx);
            sampler.sample_into(&mut rng, &mut scratch, &mut q);
            for i in 0..n {
                xs[l * n + i] = fx[i] + q[i];
            }
            if robust {
                for i in 0..m {
                    let prev = jr[l * m + i];
                    th[l * m + i] = next_theta(th[l * m + i], prev, i, cfg, &mut rng);
                    jr[l * m + i] = draw_regime(&cfg.transition[prev as usize], &mut rng);
                }
            }
            model.h_into(&xs[l * n..(l + 1) * n], &mut hx);
            logw[l] = if r_diag {
                let mut ll = 0.0;
                for i in 0..m {
                    let (reg, shift) = if robust {
                        let g = jr[l * m + i] as usize;
                        (g, if g == 2 { th[l * m + i] } else { 0.0 })
                    } else {
                        (0, 0.0)
                    };
                    let off = match mode {
                        PfMode::Ideal(s) => s.offset[step][i],
                        _ => 0.0,
                    };
                    let e = y[i] - hx[i] - shift - off;
                    ll += scalar_loglik(e, var[reg][i], logvar[reg][i]);
                }
                ll
            } else {
                full_cov_loglik(y, &hx, &r, mode, step, robust.then(|| (&th[l * m..(l + 1) * m], &jr[l * m..(l + 1) * m])), cfg)?
            };
        }

        if !normalize_log_weights(&logw, &mut w) {
            out.resets += 1;
            log::warn!("robust_pf_run: all weights underflowed at step {k}; using uniform weights");
        }
        let mut est = DVector::zeros(n);
        let mut test = DVector::zeros(m);
        let mut sw2 = 0.0;
        for l in 0..np {
            let wl = w[l];
            sw2 += wl * wl;
            for i in 0..n {
                est[i] += wl * xs[l * n + i];
            }
            if robust {
                for i in 0..m {
                    test[i] += wl * th[l * m + i];
                }
            }
        }
        out.estimates.push(est);
        out.theta_estimates.push(test);
        out.ess.push(1.0 / sw2);

        let u0: f64 = rng.random();
        systematic_resample_with(&w, u0, &mut idx)?;
        for (dst, &src) in idx.iter().enumerate() {
            xs_new[dst * n..(dst + 1) * n].copy_from_slice(&xs[src * n..(src + 1) * n]);
            if robust {
                th_new[dst * m..(dst + 1) * m].copy_from_slice(&th[src * m..(src + 1) * m]);
                jr_new[dst * m..(dst + 1) * m].copy_from_slice(&jr[src * m..(src + 1) * m]);
            }
        }
        std::mem::swap(&mut xs, &mut xs_new);
        if robust {
            std::mem::swap(&mut th, &mut th_new);
            std::mem::swap(&mut jr, &mut jr_new);
        }
    }
    Ok(out)
}

fn full_cov_loglik(
    y: &DVector<f64>,
    hx: &[f64],
    r: &DMatrix<f64>,
    mode: &PfMode,
    step: usize,
    aug: Option<(&[f64], &[u8])>,
    cfg: &AbnormalityConfig,
) -> Result<f64> {
    let m = y.len();
    let mut mean = DVector::from_row_slice(hx);
    let mut cov = r.clone();
    if let PfMode::Ideal(s) = mode {
        mean += &s.offset[step];
        for i in 0..m {
            cov[(i, i)] += s.extra_var[step][i];
        }
    }
    if let Some((th, jr)) = aug {
        for i in 0..m {
            match jr[i] {
                1 => cov[(i, i)] += cfg.u[i],
                2 => {
                    mean[i] += th[i];
                    cov[(i, i)] += cfg.upsilon[i];
                }
                _ => {}
            }
        }
    }
    crate::gaussian::log_normal_pdf(y, &mean, &cov)
}
