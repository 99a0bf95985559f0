//! Closed-form linear-Gaussian recursions written with explicit inverses.

use nalgebra::{DMatrix, DVector};

pub fn kf_predict(x: &DVector<f64>, p: &DMatrix<f64>, a: &DMatrix<f64>, q: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    (a * x, a * p * a.transpose() + q)
}

pub fn kf_update(
    x: &DVector<f64>,
    p: &DMatrix<f64>,
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let s = c * p * c.transpose() + r;
    let k = p * c.transpose() * s.try_inverse().expect("invertible S");
    let x1 = x + &k * (y - c * x);
    let n = x.len();
    let p1 = (DMatrix::identity(n, n) - &k * c) * p;
    (x1, (&p1 + p1.transpose()) * 0.5)
}

/// Filtered and one-step predicted moments over `ys` starting from the prior
/// at step 0.
pub struct KfRun {
    pub filtered: Vec<(DVector<f64>, DMatrix<f64>)>,
    pub predicted: Vec<(DVector<f64>, DMatrix<f64>)>,
}

pub fn kf_run(
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    ys: &[DVector<f64>],
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> KfRun {
    let (mut x, mut p) = (x0.clone(), p0.clone());
    let mut out = KfRun { filtered: vec![], predicted: vec![] };
    for y in ys {
        let (xp, pp) = kf_predict(&x, &p, a, q);
        out.predicted.push((xp.clone(), pp.clone()));
        let (xf, pf) = kf_update(&xp, &pp, y, c, r);
        out.filtered.push((xf.clone(), pf.clone()));
        x = xf;
        p = pf;
    }
    out
}

/// RTS smoother over a [`kf_run`].
pub fn rts(run: &KfRun, a: &DMatrix<f64>) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let k = run.filtered.len();
    let mut sm = run.filtered.clone();
    for i in (0..k.saturating_sub(1)).rev() {
        let (xf, pf) = &run.filtered[i];
        let (xp, pp) = &run.predicted[i + 1];
        let g = pf * a.transpose() * pp.clone().try_inverse().expect("invertible P-");
        let xs = xf + &g * (&sm[i + 1].0 - xp);
        let ps = pf + &g * (&sm[i + 1].1 - pp) * g.transpose();
        sm[i] = (xs, ps);
    }
    sm
}

/// Posterior covariance recursion of the Kalman filter for a rejection
/// schedule: rejected rows of `C` are dropped.
pub fn kf_cov_with_rejections(
    p0: &DMatrix<f64>,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    kept: &[Vec<bool>],
) -> Vec<DMatrix<f64>> {
    let mut p = p0.clone();
    let mut out = vec![];
    for row in kept {
        p = a * &p * a.transpose() + q;
        let idx: Vec<usize> = (0..row.len()).filter(|&i| row[i]).collect();
        if !idx.is_empty() {
            let cs = DMatrix::from_fn(idx.len(), c.ncols(), |i, j| c[(idx[i], j)]);
            let rs = DMatrix::from_fn(idx.len(), idx.len(), |i, j| r[(idx[i], idx[j])]);
            let s = &cs * &p * cs.transpose() + rs;
            let k = &p * cs.transpose() * s.try_inverse().expect("invertible S");
            let n = p.nrows();
            p = (DMatrix::identity(n, n) - &k * &cs) * &p;
            p = (&p + p.transpose()) * 0.5;
        }
        out.push(p.clone());
    }
    out
}
