mod common;

use approx::assert_relative_eq;
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use robust_filters::gaussian::log_normal_pdf;
use robust_filters::harness::metrics::{rmse, trmse};
use robust_filters::pf::{
    normalize_log_weights, particle_log_likelihood, propagate_particle, robust_pf_run, AbnormalityConfig,
    AugmentedParticle, IdealSchedule, PfMode, PfPriors,
};
use robust_filters::ssm::simulate;

fn cfg(m: usize, u: f64, ups: f64, delta: f64, c: f64, d: f64) -> AbnormalityConfig {
    let v = |x: f64| DVector::from_element(m, x);
    AbnormalityConfig::new(v(u), v(ups), v(delta), v(c), v(d)).unwrap()
}

fn scalar_rw(q: f64, r: f64) -> common::LinearSystem {
    let (a, c) = (dmatrix![1.0], dmatrix![1.0]);
    let (q, r) = (dmatrix![q], dmatrix![r]);
    let model = common::linear_model(a.clone(), c.clone(), q.clone(), r.clone());
    common::LinearSystem { a, c, q, r, model }
}

fn particle(x: DVector<f64>, theta: DVector<f64>, regimes: Vec<u8>) -> AugmentedParticle {
    AugmentedParticle { x, theta, regimes, weight: 1.0 }
}

#[test]
fn persisting_bias_without_drift_is_unchanged() {
    let sys = scalar_rw(1.0, 1.0);
    let c = cfg(1, 1.0, 1.0, 0.0, -1.0, 1.0);
    let mut rng = common::rng(1);
    let p = particle(dvector![0.0], dvector![3.25], vec![2]);
    for _ in 0..100 {
        assert_eq!(propagate_particle(&p, &sys.model, &c, 1, &mut rng).theta[0], 3.25);
    }
}

#[test]
fn fresh_bias_is_uniform_and_regimes_uniform() {
    let sys = scalar_rw(1.0, 1.0);
    let d = 7.0;
    let c = cfg(1, 1.0, 1.0, 0.0, -d, d);
    let mut rng = common::rng(2);
    let p = particle(dvector![0.0], dvector![100.0], vec![0]);
    let n = 100_000;
    let mut sum = 0.0;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let q = propagate_particle(&p, &sys.model, &c, 1, &mut rng);
        assert!(q.theta[0] >= -d && q.theta[0] <= d);
        sum += q.theta[0];
        counts[q.regimes[0] as usize] += 1;
    }
    assert!((sum / n as f64).abs() <= 4.0 * d / (3.0 * n as f64).sqrt());
    for c in counts {
        assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01);
    }
}

#[test]
fn nominal_regimes_give_plain_gaussian() {
    let mut rng = common::rng(3);
    let sys = common::random_linear_system(&mut rng, 3, 2, false);
    let c = cfg(2, 10.0, 5.0, 0.1, -1.0, 1.0);
    let p = particle(common::randn_vector(&mut rng, 3), dvector![4.0, -2.0], vec![0, 0]);
    let y = common::randn_vector(&mut rng, 2);
    let ll = particle_log_likelihood(&p, &y, &sys.model, &sys.r, &c).unwrap();
    assert_relative_eq!(ll, log_normal_pdf(&y, &(&sys.c * &p.x), &sys.r).unwrap(), epsilon = 1e-12);
}

#[test]
fn outlier_regime_is_nearly_flat() {
    let sys = scalar_rw(1.0, 2.0);
    let c = cfg(1, 1000.0, 0.0, 0.0, -1.0, 1.0);
    let p = particle(dvector![0.0], dvector![0.0], vec![1]);
    let at = |e: f64| particle_log_likelihood(&p, &dvector![e], &sys.model, &sys.r, &c).unwrap();
    let base = at(0.0);
    for k in 0..=100 {
        let e = 10.0 * 2f64.sqrt() * k as f64 / 100.0;
        let drop = base - at(e);
        assert_relative_eq!(drop, 0.5 * e * e / 1002.0, epsilon = 1e-12);
        assert!(drop <= 0.1);
    }
}

#[test]
fn mixed_regimes_match_dense_pdf() {
    let mut rng = common::rng(4);
    let sys = common::random_linear_system(&mut rng, 2, 2, false);
    let c = cfg(2, 10.0, 5.0, 0.1, -1.0, 1.0);
    let p = particle(common::randn_vector(&mut rng, 2), dvector![1.5, -2.5], vec![1, 2]);
    let y = common::randn_vector(&mut rng, 2);
    let mean = &sys.c * &p.x + dvector![0.0, -2.5];
    let cov = &sys.r + DMatrix::from_diagonal(&dvector![10.0, 5.0]);
    let ll = particle_log_likelihood(&p, &y, &sys.model, &sys.r, &c).unwrap();
    assert_relative_eq!(ll, log_normal_pdf(&y, &mean, &cov).unwrap(), epsilon = 1e-12);
}

#[test]
fn weight_normalisation() {
    let mut w = vec![0.0; 4];
    assert!(normalize_log_weights(&[-1000.0, -1001.0, f64::NEG_INFINITY, -1000.0], &mut w));
    assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    assert_eq!(w[2], 0.0);
    assert!(!normalize_log_weights(&[f64::NEG_INFINITY; 4], &mut w));
    assert_eq!(w, vec![0.25; 4]);
}

fn priors(x0: DVector<f64>, p0: DMatrix<f64>, m: usize) -> PfPriors {
    PfPriors { x0_mean: x0, x0_cov: p0, theta0_var: DVector::from_element(m, 0.001), regime0: [1.0 / 3.0; 3] }
}

#[test]
fn bootstrap_matches_kalman_on_linear_model() {
    let mut rng = common::rng(5);
    let sys = common::random_linear_system(&mut rng, 2, 2, true);
    let x0 = common::randn_vector(&mut rng, 2);
    let p0 = DMatrix::identity(2, 2);
    let tr = simulate(&sys.model, &x0, 100, 6).unwrap();
    let c = cfg(2, 1.0, 1.0, 0.0, -1.0, 1.0);
    let out = robust_pf_run(&sys.model, &tr.measurements, &priors(x0.clone(), p0.clone(), 2), &c, 10_000, 7, &PfMode::Bootstrap).unwrap();
    let kf = common::oracle::kf_run(&x0, &p0, &tr.measurements, &sys.a, &sys.c, &sys.q, &sys.r);
    let kf_est: Vec<_> = kf.filtered.iter().map(|f| f.0.clone()).collect();
    let (e_pf, e_kf) = (rmse(&tr.states, &out.estimates, None).unwrap(), rmse(&tr.states, &kf_est, None).unwrap());
    assert!((e_pf - e_kf).abs() <= 0.1 * e_kf, "pf {e_pf} kf {e_kf}");
    for e in &out.ess {
        assert!(*e >= 1.0 - 1e-9 && *e <= 10_000.0 + 1e-6);
    }
    assert_eq!(out.resets, 0);
}

#[test]
fn robust_reduces_to_bootstrap() {
    let sys = scalar_rw(0.5, 1.0);
    let mut c = cfg(1, 0.0, 0.0, 0.0, -1.0, 1.0);
    c.transition = [[1.0, 0.0, 0.0]; 3];
    let x0 = dvector![0.0];
    let p0 = dmatrix![1.0];
    let mut pr = priors(x0.clone(), p0, 1);
    pr.regime0 = [1.0, 0.0, 0.0];
    let (mut truth, mut rob, mut boot) = (vec![], vec![], vec![]);
    for r in 0..20u64 {
        let tr = simulate(&sys.model, &x0, 100, 100 + r).unwrap();
        rob.push(robust_pf_run(&sys.model, &tr.measurements, &pr, &c, 500, r, &PfMode::Robust).unwrap().estimates);
        boot.push(robust_pf_run(&sys.model, &tr.measurements, &pr, &c, 500, r, &PfMode::Bootstrap).unwrap().estimates);
        truth.push(tr.states);
    }
    let ratio = trmse(&truth, &rob, None).unwrap() / trmse(&truth, &boot, None).unwrap();
    assert!((0.9..=1.1).contains(&ratio), "ratio {ratio}");
}

#[test]
fn deterministic_model_collapses_to_truth() {
    let a = dmatrix![1.0, 0.1; 0.0, 1.0];
    let c = dmatrix![1.0, 0.0];
    let model = common::linear_model(a, c, DMatrix::zeros(2, 2), DMatrix::zeros(1, 1));
    let x0 = dvector![1.0, -0.5];
    let tr = simulate(&model, &x0, 30, 1).unwrap();
    let pr = priors(x0, DMatrix::zeros(2, 2), 1);
    let out = robust_pf_run(&model, &tr.measurements, &pr, &cfg(1, 1.0, 1.0, 0.0, -1.0, 1.0), 50, 2, &PfMode::Bootstrap).unwrap();
    for (e, x) in out.estimates.iter().zip(&tr.states) {
        assert!((e - x).norm() <= 1e-9);
    }
    assert_eq!(out.resets, 0);
}

#[test]
fn ideal_mode_removes_known_offset() {
    let sys = scalar_rw(0.1, 1.0);
    let x0 = dvector![0.0];
    let tr = simulate(&sys.model, &x0, 50, 9).unwrap();
    let offset: Vec<DVector<f64>> = (0..50).map(|k| dvector![if k >= 10 { 40.0 } else { 0.0 }]).collect();
    let ys: Vec<_> = tr.measurements.iter().zip(&offset).map(|(y, o)| y + o).collect();
    let sched = IdealSchedule { offset: offset.clone(), extra_var: vec![dvector![0.0]; 50] };
    let pr = priors(x0, dmatrix![1.0], 1);
    let c = cfg(1, 1.0, 1.0, 0.0, -1.0, 1.0);
    let ideal = robust_pf_run(&sys.model, &ys, &pr, &c, 2000, 3, &PfMode::Ideal(sched)).unwrap();
    let boot = robust_pf_run(&sys.model, &ys, &pr, &c, 2000, 3, &PfMode::Bootstrap).unwrap();
    let (ei, eb) = (rmse(&tr.states, &ideal.estimates, None).unwrap(), rmse(&tr.states, &boot.estimates, None).unwrap());
    assert!(ei < 1.0 && eb > 10.0, "ideal {ei} bootstrap {eb}");
    let short = IdealSchedule { offset: offset[..5].to_vec(), extra_var: vec![dvector![0.0]; 5] };
    assert!(robust_pf_run(&sys.model, &ys, &pr, &c, 10, 3, &PfMode::Ideal(short)).is_err());
}

#[test]
fn invalid_inputs() {
    let sys = scalar_rw(1.0, 1.0);
    let c = cfg(1, 1.0, 1.0, 0.0, -1.0, 1.0);
    let pr = priors(dvector![0.0], dmatrix![1.0], 1);
    assert!(robust_pf_run(&sys.model, &[dvector![0.0]], &pr, &c, 1, 0, &PfMode::Robust).is_err());
    let v = |x: f64| DVector::from_element(1, x);
    assert!(AbnormalityConfig::new(v(1.0), v(1.0), v(0.0), v(1.0), v(1.0)).is_err());
    assert!(AbnormalityConfig::new(v(-1.0), v(1.0), v(0.0), v(0.0), v(1.0)).is_err());
}
