mod common;

use approx::assert_relative_eq;
use common::oracle;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use robust_filters::gaussian::{
    ekf_update, ggf_predict, ggf_predict_at, ggf_update, rts_backward, sigma_points, systematic_resample,
    systematic_resample_with, unscented_transform, UtParams,
};
use robust_filters::harness::scenarios::{turn_f, turn_q};
use robust_filters::ssm::{GaussianBelief, StateSpaceModel};

fn belief(m: DVector<f64>, p: DMatrix<f64>) -> GaussianBelief {
    GaussianBelief::new(m, p).unwrap()
}

#[test]
fn default_weights() {
    let p = UtParams::default();
    let n = 4;
    assert_eq!(p.lambda(n), 0.0);
    let (wm, wc) = p.weights(n);
    assert_eq!(wm[0], 0.0);
    assert_eq!(wc[0], 2.0);
    for i in 1..=2 * n {
        assert_relative_eq!(wm[i], 1.0 / (2.0 * n as f64), epsilon = 1e-15);
        assert_relative_eq!(wc[i], 1.0 / (2.0 * n as f64), epsilon = 1e-15);
    }
}

#[test]
fn sigma_point_set_invariants() {
    let mut rng = common::rng(1);
    for params in [UtParams::default(), UtParams { alpha: 0.5, beta: 2.0, kappa: 1.0 }] {
        let b = belief(common::randn_vector(&mut rng, 4), common::random_spd(&mut rng, 4, 0.1));
        let sp = sigma_points(&b, &params).unwrap();
        assert_eq!(sp.len(), 9);
        assert_relative_eq!(sp.mean_weights.sum(), 1.0, epsilon = 1e-12);
        let mean = sp.points.transpose() * &sp.mean_weights;
        assert!(common::rel_err_v(&mean, &b.mean) < 1e-10);
    }
}

#[test]
fn ut_params_reject_bad_scaling() {
    assert!(UtParams { alpha: 1.0, beta: 2.0, kappa: -3.0 }.validate(3).is_err());
}

#[test]
fn ut_exact_on_affine_maps() {
    let mut rng = common::rng(2);
    for _ in 0..20 {
        let n = rng.random_range(1..=5);
        let d = rng.random_range(1..=4);
        let a = common::randn_matrix(&mut rng, d, n);
        let c = common::randn_vector(&mut rng, d);
        let add = common::random_spd(&mut rng, d, 0.1);
        let b = belief(common::randn_vector(&mut rng, n), common::random_spd(&mut rng, n, 0.1));
        let (a1, c1) = (a.clone(), c.clone());
        let map = move |x: &[f64], out: &mut [f64]| {
            let v = &a1 * DVector::from_column_slice(x) + &c1;
            out.copy_from_slice(v.as_slice());
        };
        let m = unscented_transform(&b, map, d, &UtParams::default(), &add).unwrap();
        assert!(common::rel_err_v(&m.mean, &(&a * &b.mean + &c)) < 1e-9);
        assert!(common::rel_err(&m.cov, &(&a * &b.cov * a.transpose() + &add)) < 1e-9);
        assert!(common::rel_err(&m.crosscov, &(&b.cov * a.transpose())) < 1e-9);
    }
}

#[test]
fn ut_square_vs_monte_carlo() {
    let b = belief(dvector![0.0], dmatrix![1.0]);
    let m = unscented_transform(&b, |x, o| o[0] = x[0] * x[0], 1, &UtParams::default(), &DMatrix::zeros(1, 1)).unwrap();
    let mut rng = common::rng(3);
    let n = 1_000_000;
    let mc: f64 = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum::<f64>() / n as f64;
    assert!((m.mean[0] - 1.0).abs() <= 0.1);
    assert!((m.mean[0] - mc).abs() <= 0.01, "UT {} vs MC {mc}", m.mean[0]);
}

#[test]
fn predict_identity_without_noise_is_noop() {
    let model = StateSpaceModel::new(2, 1, |x, o| o.copy_from_slice(x), |x, o| o[0] = x[0], DMatrix::zeros(2, 2), dmatrix![1.0]).unwrap();
    let b = belief(dvector![1.0, -2.0], dmatrix![2.0, 0.3; 0.3, 1.0]);
    let p = ggf_predict(&b, &model, &UtParams::default()).unwrap();
    assert_relative_eq!(p.mean, b.mean, epsilon = 1e-12);
    assert_relative_eq!(p.cov, b.cov, epsilon = 1e-12);
}

#[test]
fn predict_turn_model_inflates_trace() {
    let q = turn_q(1.0, 0.1, 1.75e-4);
    let model = StateSpaceModel::new(5, 1, |x, o| turn_f(1.0, x, o), |x, o| o[0] = x[0], q, dmatrix![1.0]).unwrap();
    let b = belief(dvector![-10000.0, 10.0, 5000.0, -5.0, -0.0524], DMatrix::from_diagonal(&dvector![100.0, 1.0, 100.0, 1.0, 1e-4]));
    let p = ggf_predict(&b, &model, &UtParams::default()).unwrap();
    assert!(p.cov.trace() > b.cov.trace());
}

#[test]
fn scalar_update_textbook() {
    let model = StateSpaceModel::new(1, 1, |x, o| o[0] = x[0], |x, o| o[0] = x[0], dmatrix![0.0], dmatrix![1.0]).unwrap();
    let b = belief(dvector![0.0], dmatrix![1.0]);
    let post = ggf_update(&b, &dvector![2.0], &model, &dmatrix![1.0], &dvector![0.0], &UtParams::default()).unwrap();
    assert_relative_eq!(post.mean[0], 1.0, epsilon = 1e-12);
    assert_relative_eq!(post.cov[(0, 0)], 0.5, epsilon = 1e-12);
}

#[test]
fn huge_noise_leaves_prior() {
    let mut rng = common::rng(4);
    let sys = common::random_linear_system(&mut rng, 3, 2, false);
    let b = belief(dvector![10.0, -5.0, 3.0], common::random_spd(&mut rng, 3, 0.5));
    let y = common::randn_vector(&mut rng, 2) * 100.0;
    let post = ggf_update(&b, &y, &sys.model, &(&sys.r * 1e12), &DVector::zeros(2), &UtParams::default()).unwrap();
    assert!((&post.mean - &b.mean).norm() <= 1e-4 * b.mean.norm());
}

#[test]
fn offset_shifts_innovation() {
    let model = StateSpaceModel::new(1, 1, |x, o| o[0] = x[0], |x, o| o[0] = x[0], dmatrix![0.0], dmatrix![1.0]).unwrap();
    let b = belief(dvector![0.0], dmatrix![1.0]);
    let a = ggf_update(&b, &dvector![5.0], &model, &dmatrix![1.0], &dvector![3.0], &UtParams::default()).unwrap();
    let c = ggf_update(&b, &dvector![2.0], &model, &dmatrix![1.0], &dvector![0.0], &UtParams::default()).unwrap();
    assert_relative_eq!(a.mean, c.mean, epsilon = 1e-12);
}

#[test]
fn ekf_linear_matches_kf() {
    let mut rng = common::rng(5);
    let sys = common::random_linear_system(&mut rng, 4, 3, false);
    let b = belief(common::randn_vector(&mut rng, 4), common::random_spd(&mut rng, 4, 0.2));
    let y = common::randn_vector(&mut rng, 3);
    let post = ekf_update(&b, &y, &sys.model).unwrap();
    let (xo, po) = oracle::kf_update(&b.mean, &b.cov, &y, &sys.c, &sys.r);
    assert!(common::rel_err_v(&post.mean, &xo) < 1e-12);
    assert!(common::rel_err(&post.cov, &po) < 1e-12);
}

#[test]
fn range_jacobian_is_unit_direction() {
    let model = StateSpaceModel::new(2, 1, |x, o| o.copy_from_slice(x), |x, o| o[0] = (x[0] * x[0] + x[1] * x[1]).sqrt(), DMatrix::zeros(2, 2), dmatrix![1.0])
        .unwrap()
        .with_jacobians(
            |_| DMatrix::identity(2, 2),
            |x| {
                let r = x.norm();
                dmatrix![x[0] / r, x[1] / r]
            },
        );
    let h = model.jac_h(&dvector![3.0, 4.0]).unwrap();
    assert_relative_eq!(h, dmatrix![0.6, 0.8], epsilon = 1e-15);
    assert!(model.jacobian_fd_error(&dvector![3.0, 4.0]).unwrap() < 1e-4);
}

#[test]
fn ekf_without_jacobian_errors() {
    let model = StateSpaceModel::new(1, 1, |x, o| o[0] = x[0], |x, o| o[0] = x[0].sin(), dmatrix![0.0], dmatrix![1.0]).unwrap();
    assert!(ekf_update(&belief(dvector![0.0], dmatrix![1.0]), &dvector![0.0], &model).is_err());
}

#[test]
fn ggf_chain_matches_kf_chain() {
    let mut rng = common::rng(6);
    for _ in 0..5 {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(1..=4);
        let sys = common::random_linear_system(&mut rng, n, m, false);
        let x0 = common::randn_vector(&mut rng, n);
        let p0 = common::random_spd(&mut rng, n, 0.5);
        let tr = robust_filters::ssm::simulate(&sys.model, &x0, 100, 7).unwrap();
        let kf = oracle::kf_run(&x0, &p0, &tr.measurements, &sys.a, &sys.c, &sys.q, &sys.r);
        let mut b = belief(x0.clone(), p0.clone());
        for (k, y) in tr.measurements.iter().enumerate() {
            let p = ggf_predict_at(&b, &sys.model, k + 1, &UtParams::default()).unwrap();
            b = ggf_update(&p, y, &sys.model, &sys.r, &DVector::zeros(m), &UtParams::default()).unwrap();
            assert!(common::rel_err_v(&b.mean, &kf.filtered[k].0) < 1e-8);
            assert!(common::rel_err(&b.cov, &kf.filtered[k].1) < 1e-8);
        }
    }
}

#[test]
fn rts_matches_closed_form_and_shrinks_trace() {
    let mut rng = common::rng(8);
    let sys = common::random_linear_system(&mut rng, 4, 2, false);
    let x0 = common::randn_vector(&mut rng, 4);
    let p0 = common::random_spd(&mut rng, 4, 0.5);
    let tr = robust_filters::ssm::simulate(&sys.model, &x0, 60, 9).unwrap();
    let kf = oracle::kf_run(&x0, &p0, &tr.measurements, &sys.a, &sys.c, &sys.q, &sys.r);
    let sm_o = oracle::rts(&kf, &sys.a);
    let filtered: Vec<GaussianBelief> = kf.filtered.iter().map(|(x, p)| belief(x.clone(), p.clone())).collect();
    let predicted: Vec<GaussianBelief> = kf.predicted[1..].iter().map(|(x, p)| belief(x.clone(), p.clone())).collect();
    let sm = rts_backward(&filtered, &predicted, &sys.model, &UtParams::default()).unwrap();
    for k in 0..sm.len() {
        assert!(common::rel_err_v(&sm[k].mean, &sm_o[k].0) < 1e-8);
        assert!(common::rel_err(&sm[k].cov, &sm_o[k].1) < 1e-8);
        assert!(sm[k].cov.trace() <= filtered[k].cov.trace() + 1e-9);
    }
    assert_eq!(sm.last(), filtered.last());
}

#[test]
fn rts_single_step_is_filtered() {
    let mut rng = common::rng(10);
    let sys = common::random_linear_system(&mut rng, 2, 1, false);
    let f = vec![belief(dvector![1.0, 2.0], DMatrix::identity(2, 2))];
    let sm = rts_backward(&f, &[], &sys.model, &UtParams::default()).unwrap();
    assert_eq!(sm, f);
}

#[test]
fn resample_uniform_is_identity() {
    let w = vec![0.25; 4];
    assert_eq!(systematic_resample(&w, 3).unwrap(), vec![0, 1, 2, 3]);
}

#[test]
fn resample_exact_multiples() {
    let idx = systematic_resample(&[0.5, 0.5, 0.0, 0.0], 1).unwrap();
    assert_eq!(idx, vec![0, 0, 1, 1]);
}

#[test]
fn resample_multiplicity_bounds() {
    let mut rng = common::rng(11);
    for trial in 0..20 {
        let raw: Vec<f64> = (0..1000).map(|_| rng.random::<f64>().powi(3)).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let idx = systematic_resample(&w, trial).unwrap();
        assert_eq!(idx.len(), 1000);
        let mut counts = vec![0usize; 1000];
        for i in idx {
            counts[i] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let lo = (1000.0 * w[i]).floor() as usize;
            assert!(c == lo || c == lo + 1, "index {i}: count {c}, N w = {}", 1000.0 * w[i]);
        }
    }
}

#[test]
fn resample_rejects_zero_weights() {
    assert!(systematic_resample(&[0.0, 0.0], 0).is_err());
    let mut out = vec![];
    assert!(systematic_resample_with(&[1.0, -0.1], 0.5, &mut out).is_err());
}
