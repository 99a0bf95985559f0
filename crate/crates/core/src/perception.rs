//! Robust reweighting heuristics wrapped around weighted non-minimal solvers,
//! and Horn's closed-form absolute orientation for point-cloud registration.
//!
//! Residuals are indexed `0..=m`; index 0 is the regulariser, whose weight
//! stays at 1 and which is excluded from every parameter statistic.

use nalgebra::{DMatrix, Matrix3, Matrix4, SymmetricEigen, UnitQuaternion, Vector3};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::sor::logistic;

/// A robust estimation problem exposed through a weighted solver.
pub trait ResidualProblem {
    type Estimate: Clone;

    /// Number of measurement residuals (excluding the regulariser).
    fn m(&self) -> usize;

    /// Weighted least-squares estimate for weights of length `m + 1`.
    fn solve(&self, weights: &[f64]) -> Result<Self::Estimate>;

    /// Precision-whitened residuals of length `m + 1` at `x`.
    fn residuals(&self, x: &Self::Estimate, out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeuristicKind {
    Eror,
    Esor,
    Asor,
    /// EROR with μ held at the floor χ (experimental).
    Ror,
}

impl HeuristicKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeuristicKind::Eror => "eror",
            HeuristicKind::Esor => "esor",
            HeuristicKind::Asor => "asor",
            HeuristicKind::Ror => "ror",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AsorParams {
    pub a: f64,
    pub big_a: f64,
    pub big_b: f64,
    pub b_hat0: f64,
    pub theta: f64,
}

impl Default for AsorParams {
    fn default() -> Self {
        Self { a: 0.5, big_a: 1e4, big_b: 1e3, b_hat0: 1e4, theta: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeuristicParams {
    pub kind: HeuristicKind,
    /// Inlier floor (χ for EROR/ROR, γ for ESOR).
    pub chi: f64,
    pub asor: AsorParams,
    pub conv_tol: f64,
    pub max_iters: usize,
}

impl HeuristicParams {
    pub fn new(kind: HeuristicKind, chi: f64) -> Self {
        Self { kind, chi, asor: AsorParams::default(), conv_tol: 1e-5, max_iters: 1000 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.chi > 0.0) {
            return Err(Error::InvalidParameter("chi/gamma must be positive".into()));
        }
        let a = &self.asor;
        if !(a.a > 0.0) || !(a.big_a > 1.0) || !(a.big_b > 0.0) || !(a.b_hat0 > 0.0) {
            return Err(Error::InvalidParameter("ASOR needs a > 0, A > 1, B > 0, b_hat0 > 0".into()));
        }
        if !(a.theta > 0.0 && a.theta < 1.0) {
            return Err(Error::InvalidParameter("ASOR theta must lie in (0, 1)".into()));
        }
        if !(self.conv_tol > 0.0) || self.max_iters == 0 {
            return Err(Error::InvalidParameter("conv_tol and max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Adaptive parameters carried between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicState {
    pub mu: f64,
    pub rho2: f64,
    pub b_hat: f64,
    /// ASOR inlier probabilities (index 0 fixed at 1).
    pub omega: Vec<f64>,
    alpha: f64,
    ln_zeta: f64,
}

impl HeuristicState {
    pub fn new(params: &HeuristicParams, m: usize) -> Self {
        let a = params.asor.a;
        let alpha = a + 0.5;
        let ln_zeta = (1.0 / params.asor.theta - 1.0).ln() + ln_gamma(alpha) - ln_gamma(a);
        Self {
            mu: params.chi,
            rho2: params.chi,
            b_hat: params.asor.b_hat0,
            omega: vec![1.0; m + 1],
            alpha,
            ln_zeta,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `ζ = (1/θ − 1) Γ(α)/Γ(a)`.
    pub fn zeta(&self) -> f64 {
        self.ln_zeta.exp()
    }
}

/// Parametric and weight update for one iteration.
///
/// `weights` is read as the weights used in the preceding solve (needed by
/// ESOR) and overwritten with the new weights.
pub fn weight_update(params: &HeuristicParams, r2: &[f64], weights: &mut [f64], state: &mut HeuristicState) {
    let m1 = r2.len();
    match params.kind {
        HeuristicKind::Eror | HeuristicKind::Ror => {
            if params.kind == HeuristicKind::Eror {
                let (mut mx, mut mn) = (f64::NEG_INFINITY, f64::INFINITY);
                for &v in &r2[1..] {
                    mx = mx.max(v);
                    mn = mn.min(v);
                }
                state.mu = if m1 > 1 { (0.5 * (mx + mn)).max(params.chi) } else { params.chi };
            }
            for i in 1..m1 {
                weights[i] = 1.0 / (1.0 + r2[i] / state.mu);
            }
        }
        HeuristicKind::Esor => {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 1..m1 {
                num += weights[i] * r2[i];
                den += weights[i];
            }
            let centroid = if den > 0.0 { num / den } else { params.chi };
            state.rho2 = centroid.max(params.chi);
            for i in 1..m1 {
                weights[i] = logistic(-0.5 * (r2[i] - state.rho2));
            }
        }
        HeuristicKind::Asor => {
            let a = params.asor.a;
            let alpha = state.alpha;
            let b = state.b_hat;
            let mut num = params.asor.big_a - 1.0;
            let mut den = params.asor.big_b;
            let mut beta = vec![0.0; m1];
            for i in 1..m1 {
                beta[i] = 0.5 * r2[i] + b;
                let z = state.ln_zeta + a * b.ln() - alpha * beta[i].ln() + 0.5 * r2[i];
                let om = logistic(-z);
                state.omega[i] = om;
                num += a * (1.0 - om);
                den += (1.0 - om) * alpha / beta[i];
            }
            state.b_hat = num / den;
            debug_assert!(state.b_hat > 0.0);
            for i in 1..m1 {
                let om = state.omega[i];
                weights[i] = om + (1.0 - om) * alpha / beta[i];
            }
        }
    }
    weights[0] = 1.0;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustSolution<E> {
    pub estimate: E,
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final `Σ wᵢ r̂ᵢ²` tracked by the convergence test.
    pub cost: f64,
}

/// EROR/ESOR stop early once the measurement weights sum below this.
pub const WEIGHT_MASS_FLOOR: f64 = 1e-10;

/// Alternates solve, residual update and weight update until the weighted
/// cost stabilises.
pub fn robust_solve<P: ResidualProblem>(problem: &P, params: &HeuristicParams) -> Result<RobustSolution<P::Estimate>> {
    params.validate()?;
    let m = problem.m();
    let mut w = vec![1.0; m + 1];
    let mut r = vec![0.0; m + 1];
    let mut r2 = vec![0.0; m + 1];
    let mut state = HeuristicState::new(params, m);
    let mut prev_cost: Option<f64> = None;
    let mut estimate = problem.solve(&w)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut cost = 0.0;
    while iterations < params.max_iters {
        iterations += 1;
        if iterations > 1 {
            estimate = problem.solve(&w)?;
        }
        problem.residuals(&estimate, &mut r);
        for i in 0..=m {
            r2[i] = r[i] * r[i];
        }
        cost = w.iter().zip(&r2).map(|(a, b)| a * b).sum();
        if let Some(pc) = prev_cost {
            let rel = if cost > 0.0 { (cost - pc).abs() / cost } else { (cost - pc).abs() };
            if rel < params.conv_tol {
                converged = true;
                break;
            }
        }
        prev_cost = Some(cost);
        weight_update(params, &r2, &mut w, &mut state);
        let mass: f64 = w[1..].iter().sum();
        if params.kind != HeuristicKind::Asor && mass < WEIGHT_MASS_FLOOR {
            log::debug!("robust_solve: weight mass {mass:e} collapsed; stopping");
            estimate = problem.solve(&w)?;
            break;
        }
    }
    Ok(RobustSolution { estimate, weights: w, iterations, converged, cost })
}

/// Weighted absolute orientation: minimises `Σ wᵢ ‖qᵢ − R pᵢ − t‖²` over
/// proper rotations via the unit-quaternion eigenproblem.
pub fn horn_solve(p: &[Vector3<f64>], q: &[Vector3<f64>], weights: &[f64]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let n = p.len();
    if n < 3 || q.len() != n || weights.len() != n {
        return Err(Error::Dimension("horn_solve needs N >= 3 matched points and weights".into()));
    }
    let mass: f64 = weights.iter().sum();
    if !(mass > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Degenerate("weights must be non-negative with positive mass".into()));
    }
    let mut pc = Vector3::zeros();
    let mut qc = Vector3::zeros();
    for i in 0..n {
        pc += p[i] * weights[i];
        qc += q[i] * weights[i];
    }
    pc /= mass;
    qc /= mass;
    let mut s = Matrix3::zeros();
    let mut cov = Matrix3::zeros();
    for i in 0..n {
        let dp = p[i] - pc;
        let dq = q[i] - qc;
        s += dp * dq.transpose() * weights[i];
        cov += dp * dp.transpose() * weights[i];
    }
    let ev = SymmetricEigen::new(cov).eigenvalues;
    let mut sorted = [ev[0], ev[1], ev[2]];
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if !(sorted[0] > 0.0) || sorted[1] <= 1e-12 * sorted[0] {
        return Err(Error::Degenerate("weighted point spread is collinear or empty".into()));
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    #[rustfmt::skip]
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let mut best = 0;
    for i in 1..4 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let v = eig.eigenvectors.column(best);
    let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));
    let rot = quat.to_rotation_matrix().into_inner();
    let t = qc - rot * pc;
    Ok((rot, t))
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_error_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Correspondence-based registration problem with whitened distance residuals.
#[derive(Debug, Clone)]
pub struct RegistrationProblem {
    pub p: Vec<Vector3<f64>>,
    pub q: Vec<Vector3<f64>>,
    /// Inlier noise standard deviation used for whitening.
    pub sigma: f64,
}

impl ResidualProblem for RegistrationProblem {
    type Estimate = (Matrix3<f64>, Vector3<f64>);

    fn m(&self) -> usize {
        self.p.len()
    }

    fn solve(&self, weights: &[f64]) -> Result<Self::Estimate> {
        horn_solve(&self.p, &self.q, &weights[1..])
    }

    fn residuals(&self, x: &Self::Estimate, out: &mut [f64]) {
        out[0] = 0.0;
        for i in 0..self.p.len() {
            out[i + 1] = (self.q[i] - x.0 * self.p[i] - x.1).norm() / self.sigma;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub weights: Vec<f64>,
    pub iterations: usize,
    /// Rotation error in degrees, when ground truth is supplied.
    pub rotation_error_deg: Option<f64>,
    pub translation_error: Option<f64>,
}

/// Registers `p` onto `q` with the selected heuristic around Horn's solver.
pub fn register_point_clouds(
    p: &[Vector3<f64>],
    q: &[Vector3<f64>],
    sigma: f64,
    params: &HeuristicParams,
    truth: Option<(&Matrix3<f64>, &Vector3<f64>)>,
) -> Result<RegistrationResult> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter("noise scale must be positive".into()));
    }
    let problem = RegistrationProblem { p: p.to_vec(), q: q.to_vec(), sigma };
    let sol = robust_solve(&problem, params)?;
    let (rot, t) = sol.estimate;
    let (re, te) = match truth {
        Some((rt, tt)) => (Some(rotation_error_deg(&rot, rt)), Some((t - tt).norm())),
        None => (None, None),
    };
    Ok(RegistrationResult {
        rotation: rot,
        translation: t,
        weights: sol.weights,
        iterations: sol.iterations,
        rotation_error_deg: re,
        translation_error: te,
    })
}

/// Parses "px py pz qx qy qz" lines; `#` starts a comment.
pub fn parse_correspondences(text: &str) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    let mut p = Vec::new();
    let mut q = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?;
        if vals.len() != 6 {
            return Err(Error::Config(format!("line {}: expected 6 numbers, found {}", ln + 1, vals.len())));
        }
        p.push(Vector3::new(vals[0], vals[1], vals[2]));
        q.push(Vector3::new(vals[3], vals[4], vals[5]));
    }
    Ok((p, q))
}

/// Points as a 3×N matrix, for callers working column-wise.
pub fn points_to_matrix(pts: &[Vector3<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(3, pts.len(), |r, c| pts[c][r])
}

/// Synthetic correspondence set with known ground-truth pose.
#[derive(Debug, Clone)]
pub struct SyntheticRegistration {
    pub p: Vec<Vector3<f64>>,
    pub q: Vec<Vector3<f64>>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub outliers: Vec<bool>,
}

/// Draws `m` points in `[-0.5, 0.5]³`, a uniform random rotation and a
/// translation with `‖t‖ ≤ 3`. Inliers get `𝒩(0, noise_sigma²)` noise; a
/// `outlier_ratio` fraction of targets is replaced by points drawn uniformly
/// in a ball of diameter √3 centred on the transformed cloud.
pub fn synthetic_registration(m: usize, outlier_ratio: f64, noise_sigma: f64, seed: u64) -> Result<SyntheticRegistration> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    if m < 3 {
        return Err(Error::InvalidParameter("need at least three points".into()));
    }
    if !(0.0..=1.0).contains(&outlier_ratio) {
        return Err(Error::InvalidParameter("outlier ratio must lie in [0, 1]".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter("noise scale must be non-negative".into()));
    }
    let mut rng = crate::rng::stream_rng(seed, 7);
    let unit = |rng: &mut crate::rng::StreamRng| {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        v / v.norm().max(1e-300)
    };
    let q4 = nalgebra::Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    let rotation = UnitQuaternion::from_quaternion(q4).to_rotation_matrix().into_inner();
    let translation = unit(&mut rng) * 3.0 * rng.random::<f64>().cbrt();
    let p: Vec<Vector3<f64>> =
        (0..m).map(|_| Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut q: Vec<Vector3<f64>> = p
        .iter()
        .map(|x| rotation * x + translation + Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
        .collect();
    let centre = q.iter().fold(Vector3::zeros(), |a, b| a + b) / m as f64;
    let n_out = (outlier_ratio * m as f64).round() as usize;
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut rng);
    let mut outliers = vec![false; m];
    let radius = 3f64.sqrt() / 2.0;
    for &i in &idx[..n_out] {
        q[i] = centre + unit(&mut rng) * radius * rng.random::<f64>().cbrt();
        outliers[i] = true;
    }
    Ok(SyntheticRegistration { p, q, rotation, translation, outliers })
}
