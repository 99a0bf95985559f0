mod common;

use approx::assert_relative_eq;
use nalgebra::{dmatrix, dvector, DMatrix, DVector, SymmetricEigen};
use robust_filters::harness::scenarios::{turn_f, turn_jacobian, turn_q};
use robust_filters::ssm::{check_psd, simulate, symmetrize_psd, GaussianBelief, StateSpaceModel};

#[test]
fn symmetrize_identity_is_fixed() {
    let i = DMatrix::<f64>::identity(3, 3);
    assert_eq!(symmetrize_psd(&i).unwrap(), i);
}

#[test]
fn symmetrize_averages_off_diagonal() {
    let out = symmetrize_psd(&dmatrix![1.0, 2.0; 0.0, 1.0]).unwrap();
    assert_relative_eq!(out, dmatrix![1.0, 1.0; 1.0, 1.0], epsilon = 1e-12);
}

#[test]
fn symmetrize_random_is_psd() {
    let mut rng = common::rng(3);
    for _ in 0..50 {
        let m = common::randn_matrix(&mut rng, 5, 5);
        let out = symmetrize_psd(&m).unwrap();
        assert_relative_eq!(out.clone(), out.transpose(), epsilon = 1e-12);
        let min = SymmetricEigen::new(out.clone()).eigenvalues.min();
        assert!(min >= -1e-10 * out.norm(), "min eigenvalue {min}");
    }
}

#[test]
fn symmetrize_rejects_non_square() {
    assert!(symmetrize_psd(&DMatrix::zeros(2, 3)).is_err());
}

#[test]
fn noise_free_identity_model_stays_put() {
    let model = StateSpaceModel::new(
        2,
        1,
        |x, out| out.copy_from_slice(x),
        |x, out| out[0] = x[0] * x[1],
        DMatrix::zeros(2, 2),
        DMatrix::zeros(1, 1),
    )
    .unwrap();
    let x0 = dvector![1.0, 2.0];
    let tr = simulate(&model, &x0, 10, 4).unwrap();
    assert!(tr.states.iter().all(|x| *x == x0));
    assert!(tr.measurements.iter().all(|y| y[0] == 2.0));
}

#[test]
fn turn_model_first_step_matches_matrix_form() {
    let x0 = [-10000.0, 10.0, 5000.0, -5.0, -0.0524];
    let w: f64 = x0[4];
    let (s, c) = w.sin_cos();
    #[rustfmt::skip]
    let f = DMatrix::from_row_slice(5, 5, &[
        1.0, s / w, 0.0, (c - 1.0) / w, 0.0,
        0.0, c, 0.0, -s, 0.0,
        0.0, (1.0 - c) / w, 1.0, s / w, 0.0,
        0.0, s, 0.0, c, 0.0,
        0.0, 0.0, 0.0, 0.0, 1.0,
    ]);
    let expected = &f * DVector::from_column_slice(&x0);
    let mut out = [0.0; 5];
    turn_f(1.0, &x0, &mut out);
    for i in 0..5 {
        assert_relative_eq!(out[i], expected[i], max_relative = 1e-12);
    }
    let model = StateSpaceModel::new(5, 1, |x, o| turn_f(1.0, x, o), |x, o| o[0] = x[0], DMatrix::zeros(5, 5), DMatrix::zeros(1, 1))
        .unwrap();
    let tr = simulate(&model, &DVector::from_column_slice(&x0), 1, 0).unwrap();
    assert_relative_eq!(tr.states[0], expected, max_relative = 1e-12);
}

#[test]
fn turn_jacobian_matches_finite_differences() {
    let model = StateSpaceModel::new(5, 1, |x, o| turn_f(1.0, x, o), |x, o| o[0] = x[0], turn_q(1.0, 0.1, 1.75e-4), DMatrix::identity(1, 1))
        .unwrap()
        .with_jacobians(|x| turn_jacobian(1.0, x), |_| dmatrix![1.0, 0.0, 0.0, 0.0, 0.0]);
    for w in [-0.0524, 1e-6, 0.3] {
        let x = dvector![100.0, 10.0, -50.0, -5.0, w];
        assert!(model.jacobian_fd_error(&x).unwrap() < 1e-4);
    }
}

#[test]
fn process_noise_sample_mean_is_zero() {
    let q = dmatrix![2.0, 0.5; 0.5, 1.0];
    let model = StateSpaceModel::new(2, 1, |_, o| o.fill(0.0), |x, o| o[0] = x[0], q.clone(), DMatrix::identity(1, 1)).unwrap();
    let n = 100_000;
    let tr = simulate(&model, &dvector![0.0, 0.0], n, 11).unwrap();
    let mean = tr.states.iter().fold(DVector::zeros(2), |a, x| a + x) / n as f64;
    for i in 0..2 {
        let bound = 4.0 * q[(i, i)].sqrt() / (n as f64).sqrt();
        assert!(mean[i].abs() < bound, "component {i}: {} vs {bound}", mean[i]);
    }
}

#[test]
fn measurement_noise_covariance_converges() {
    let r = dmatrix![4.0, 1.0, 0.5; 1.0, 3.0, -0.7; 0.5, -0.7, 2.0];
    let model = StateSpaceModel::new(1, 3, |x, o| o.copy_from_slice(x), |_, o| o.fill(0.0), DMatrix::zeros(1, 1), r.clone()).unwrap();
    let n = 100_000;
    let tr = simulate(&model, &dvector![0.0], n, 12).unwrap();
    let emp = tr.measurements.iter().fold(DMatrix::zeros(3, 3), |a, y| a + y * y.transpose()) / n as f64;
    assert!(common::rel_err(&emp, &r) <= 0.05);
}

#[test]
fn simulate_is_reproducible() {
    let mut rng = common::rng(5);
    let sys = common::random_linear_system(&mut rng, 3, 2, false);
    let x0 = dvector![1.0, -1.0, 0.5];
    let a = simulate(&sys.model, &x0, 50, 99).unwrap();
    let b = simulate(&sys.model, &x0, 50, 99).unwrap();
    let c = simulate(&sys.model, &x0, 50, 100).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.measurements, c.measurements);
    a.validate().unwrap();
}

#[test]
fn simulate_rejects_bad_inputs() {
    let mut rng = common::rng(6);
    let sys = common::random_linear_system(&mut rng, 3, 2, false);
    assert!(simulate(&sys.model, &dvector![1.0], 5, 0).is_err());
    assert!(simulate(&sys.model, &dvector![1.0, 2.0, 3.0], 0, 0).is_err());
}

#[test]
fn model_rejects_non_psd_noise() {
    let bad = dmatrix![1.0, 0.0; 0.0, -1.0];
    assert!(StateSpaceModel::new(2, 1, |x, o| o.copy_from_slice(x), |x, o| o[0] = x[0], bad, DMatrix::identity(1, 1)).is_err());
    assert!(check_psd(&dmatrix![1.0, 2.0; 0.0, 1.0], "asym").is_err());
}

#[test]
fn belief_validates_dimensions() {
    assert!(GaussianBelief::new(dvector![0.0, 0.0], DMatrix::identity(3, 3)).is_err());
    assert!(GaussianBelief::new(dvector![0.0], dmatrix![-1.0]).is_err());
    assert!(GaussianBelief::new(dvector![0.0], dmatrix![1.0]).is_ok());
}
