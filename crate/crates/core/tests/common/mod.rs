#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use robust_filters::ssm::StateSpaceModel;

pub mod oracle;
pub mod properties;
pub mod structured;

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn randn_vector<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `B Bᵀ + floor I` with Gaussian `B`.
pub fn random_spd<R: Rng>(rng: &mut R, n: usize, floor: f64) -> DMatrix<f64> {
    let b = randn_matrix(rng, n, n);
    &b * b.transpose() + DMatrix::identity(n, n) * floor
}

pub fn random_diag<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(lo..hi)))
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

pub fn rel_err_v(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

/// Linear-Gaussian model `x' = A x + q`, `y = C x + r` with Jacobians.
pub fn linear_model(a: DMatrix<f64>, c: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> StateSpaceModel {
    let (n, m) = (a.nrows(), c.nrows());
    let (a1, c1, a2, c2) = (a.clone(), c.clone(), a.clone(), c.clone());
    StateSpaceModel::new(
        n,
        m,
        move |x, out| {
            let v = &a1 * DVector::from_column_slice(x);
            out.copy_from_slice(v.as_slice());
        },
        move |x, out| {
            let v = &c1 * DVector::from_column_slice(x);
            out.copy_from_slice(v.as_slice());
        },
        q,
        r,
    )
    .expect("valid linear model")
    .with_jacobians(move |_| a2.clone(), move |_| c2.clone())
}

/// Stable random linear system: `A` scaled to spectral radius below one.
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub model: StateSpaceModel,
}

pub fn random_linear_system<R: Rng>(rng: &mut R, n: usize, m: usize, diag_r: bool) -> LinearSystem {
    let raw = randn_matrix(rng, n, n);
    let rho = raw.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    let a = raw * (0.95 / rho.max(1e-6));
    let c = randn_matrix(rng, m, n);
    let q = random_spd(rng, n, 0.1) * 0.1;
    let r = if diag_r { random_diag(rng, m, 0.5, 2.0) } else { random_spd(rng, m, 0.5) };
    let model = linear_model(a.clone(), c.clone(), q.clone(), r.clone());
    LinearSystem { a, c, q, r, model }
}
