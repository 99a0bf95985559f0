//! Property suites shared by the standalone property tests and the
//! acceptance run. Each suite returns the first failing case as a string.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng;
use robust_filters::bdm::{bdm_vb_iterate, BdmConfig, BiasBelief};
use robust_filters::bounds::{bcrb_filter, state_samples};
use robust_filters::emorf::{emorf_step, tau_indicator, EmorfConfig, IndicatorVector};
use robust_filters::gaussian::{ggf_predict, ggf_update, systematic_resample_with, unscented_transform, UtParams};
use robust_filters::harness::{build_scenario, ScenarioConfig, ScenarioKind};
use robust_filters::perception::{weight_update, HeuristicKind, HeuristicParams, HeuristicState};
use robust_filters::pf::normalize_log_weights;
use robust_filters::sor::{sor_omega, sor_step, SorConfig};
use robust_filters::ssm::{check_psd, GaussianBelief, StateSpaceModel};

use super::{randn_matrix, randn_vector, random_diag, random_linear_system, random_spd, rng};

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(Config { cases, failure_persistence: None, ..Config::default() }, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn finish(name: &str, r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Result<(), String> {
    r.map_err(|e| format!("{name}: {e}"))
}

fn psd_ok(p: &DMatrix<f64>, what: &str) -> Result<(), TestCaseError> {
    let asym = (p - p.transpose()).norm() / p.norm().max(f64::MIN_POSITIVE);
    prop_assert!(asym <= 1e-9, "{what} asymmetry {asym:e}");
    check_psd(p, what).map_err(|e| TestCaseError::fail(e.to_string()))
}

fn tc<T>(r: robust_filters::Result<T>) -> Result<T, TestCaseError> {
    r.map_err(|e| TestCaseError::fail(e.to_string()))
}

/// `x' = A x + 0.1 sin(x)`, `y = C x + 0.5 sin(C x)`.
fn mildly_nonlinear(seed: u64, n: usize, m: usize, diag_r: bool) -> StateSpaceModel {
    let mut g = rng(seed);
    let sys = random_linear_system(&mut g, n, m, diag_r);
    let (a, c) = (sys.a.clone(), sys.c.clone());
    StateSpaceModel::new(
        n,
        m,
        move |x, o| {
            let v = &a * DVector::from_column_slice(x);
            for i in 0..x.len() {
                o[i] = v[i] + 0.1 * x[i].sin();
            }
        },
        move |x, o| {
            let v = &c * DVector::from_column_slice(x);
            for i in 0..o.len() {
                o[i] = v[i] + 0.5 * v[i].sin();
            }
        },
        sys.q,
        sys.r,
    )
    .expect("valid model")
}

/// Every covariance produced by prediction, the robust updates, the bias VB
/// iteration and the information recursion is symmetric PSD.
pub fn psd_preservation(cases: u32) -> Result<(), String> {
    let strat = (any::<u64>(), 1usize..=5, 1usize..=4, 0.0f64..50.0);
    finish(
        "psd_preservation",
        runner(cases).run(&strat, |(seed, n, m, spike)| {
            let model = mildly_nonlinear(seed, n, m, true);
            let mut g = rng(seed ^ 0x5eed);
            let prior = tc(GaussianBelief::new(randn_vector(&mut g, n), random_spd(&mut g, n, 1e-3)))?;
            let ut = UtParams::default();
            let pred = tc(ggf_predict(&prior, &model, &ut))?;
            psd_ok(&pred.cov, "predicted")?;
            let mut y = model.h(&pred.mean) + randn_vector(&mut g, m);
            y[0] += spike;
            let post = tc(ggf_update(&pred, &y, &model, &model.r, &DVector::zeros(m), &ut))?;
            psd_ok(&post.cov, "updated")?;
            let (sor, _) = tc(sor_step(&pred, &y, &model, &SorConfig::default(), &ut))?;
            psd_ok(&sor.cov, "sor")?;
            let (em, _, _) = tc(emorf_step(&pred, &y, &model, &EmorfConfig::default(), &ut))?;
            psd_ok(&em.cov, "emorf")?;
            let cfg = BdmConfig::from_r(&model.r);
            let bias = BiasBelief::isotropic(m, 10.0);
            let (bp, bb, omega, _) = tc(bdm_vb_iterate(&pred, &bias, &DVector::from_element(m, 0.5), &y, &model, &model.r, &cfg, &ut))?;
            psd_ok(&bp.cov, "bdm state")?;
            psd_ok(&bb.sigma, "bdm bias")?;
            prop_assert!(omega.iter().all(|o| *o > 0.0 && *o < 1.0));
            let sys = random_linear_system(&mut g, n, m, false);
            let k = 8;
            let kept: Vec<Vec<bool>> = (0..k).map(|_| (0..m).map(|_| g.random::<f64>() > 0.3).collect()).collect();
            let x0 = DVector::zeros(n);
            let p0 = DMatrix::identity(n, n);
            let xs = tc(state_samples(&sys.model, &x0, &p0, k, 10, seed))?;
            let (filt, _) = tc(bcrb_filter(&sys.model, &kept, &xs, &p0))?;
            for (j, b) in filt.j_plus.iter().zip(&filt.bcrb) {
                psd_ok(j, "information")?;
                psd_ok(b, "bcrb")?;
            }
            Ok(())
        }),
    )
}

/// Normalised particle weights lie on the simplex and the ESS is in [1, N].
pub fn weight_simplex(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(-800.0f64..800.0, 1..300), -1e4f64..1e4);
    finish(
        "weight_simplex",
        runner(cases).run(&strat, |(logw, shift)| {
            let shifted: Vec<f64> = logw.iter().map(|l| l + shift).collect();
            let mut w = vec![0.0; logw.len()];
            prop_assert!(normalize_log_weights(&shifted, &mut w));
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9, "sum {total}");
            prop_assert!(w.iter().all(|x| *x >= 0.0 && x.is_finite()));
            let ess = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
            prop_assert!(ess >= 1.0 - 1e-9 && ess <= w.len() as f64 * (1.0 + 1e-9), "ess {ess}");
            let mut w2 = vec![0.0; logw.len()];
            normalize_log_weights(&logw, &mut w2);
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
            Ok(())
        }),
    )
}

/// Systematic resampling replicates particle `i` either ⌊N wᵢ⌋ or ⌈N wᵢ⌉ times.
pub fn resampling_multiplicity(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(0.0f64..1.0, 1..400), 0.0f64..1.0);
    finish(
        "resampling_multiplicity",
        runner(cases).run(&strat, |(raw, u0)| {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 0.0);
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let n = w.len();
            let mut idx = Vec::new();
            tc(systematic_resample_with(&w, u0, &mut idx))?;
            prop_assert_eq!(idx.len(), n);
            let mut count = vec![0usize; n];
            for &i in &idx {
                count[i] += 1;
            }
            for i in 0..n {
                let e = n as f64 * w[i];
                let (lo, hi) = ((e - 1e-9).floor(), (e + 1e-9).ceil());
                prop_assert!((count[i] as f64) >= lo && (count[i] as f64) <= hi, "i={i} count={} expected {e}", count[i]);
            }
            prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
            Ok(())
        }),
    )
}

/// Ω decreases strictly in W; τ-decisions flip only once along W for
/// diagonal R; robust weights are non-increasing in the squared residual.
pub fn omega_weight_monotonicity(cases: u32) -> Result<(), String> {
    let strat = (any::<u64>(), 1usize..=6, 0.05f64..0.95, -12.0f64..-1.0);
    finish(
        "omega_weight_monotonicity",
        runner(cases).run(&strat, |(seed, m, theta, log_eps)| {
            let mut g = rng(seed);
            let eps = 10f64.powf(log_eps);
            let r = random_diag(&mut g, m, 0.1, 10.0);
            let r_diag = r.diagonal();
            let cfg = SorConfig { epsilon: eps, theta: vec![theta], ..SorConfig::default() };
            let i = g.random_range(0..m);
            let base = DVector::from_fn(m, |_, _| g.random_range(0.0..20.0));
            let grid: Vec<f64> = (0..40).map(|j| 0.25 * j as f64 * r_diag[i]).collect();
            let mut prev_omega = f64::INFINITY;
            let mut seen_outlier = false;
            let ind = IndicatorVector::all_inliers(m, eps);
            for &wi in &grid {
                let mut w = base.clone();
                w[i] = wi;
                let om = tc(sor_omega(&w, &r_diag, &cfg))?[i];
                prop_assert!(om > 0.0 && om < 1.0 || om == 0.0 && wi > 0.0);
                prop_assert!(om <= prev_omega, "omega rose at W={wi}");
                if prev_omega.is_finite() && om > 1e-300 {
                    prop_assert!(om < prev_omega, "omega flat at W={wi}");
                }
                prev_omega = om;
                let mut wm = DMatrix::from_diagonal(&base);
                wm[(i, i)] = wi;
                let (_, inlier) = tc(tau_indicator(&wm, &r, &ind, i, theta, eps))?;
                prop_assert!(!(seen_outlier && inlier), "tau decision returned to inlier at W={wi}");
                seen_outlier |= !inlier;
            }
            let r2: Vec<f64> = (0..=m * 5).map(|j| if j == 0 { 0.0 } else { g.random_range(0.0..100.0f64).powi(2) / 50.0 }).collect();
            for kind in [HeuristicKind::Eror, HeuristicKind::Esor, HeuristicKind::Asor, HeuristicKind::Ror] {
                let params = HeuristicParams::new(kind, 11.345);
                let mut state = HeuristicState::new(&params, r2.len() - 1);
                let mut w = vec![1.0; r2.len()];
                weight_update(&params, &r2, &mut w, &mut state);
                prop_assert_eq!(w[0], 1.0);
                for a in 1..r2.len() {
                    prop_assert!(w[a] > 0.0 && w[a] <= 1.0 || kind == HeuristicKind::Asor && w[a] > 0.0);
                    for b in 1..r2.len() {
                        if r2[a] < r2[b] {
                            prop_assert!(w[a] >= w[b], "{kind:?}: w({}) < w({})", r2[a], r2[b]);
                        }
                    }
                }
            }
            Ok(())
        }),
    )
}

/// Analytic Jacobians of every harness scenario match central differences.
pub fn jacobian_vs_fd(cases: u32) -> Result<(), String> {
    let kinds = [
        (ScenarioKind::TurnRangeBearing, None),
        (ScenarioKind::TurnTdoa, Some(10)),
        (ScenarioKind::TurnRange, Some(4)),
        (ScenarioKind::CvRangeBearing, None),
        (ScenarioKind::Growth1d, None),
    ];
    let models: Vec<StateSpaceModel> = kinds
        .iter()
        .map(|(k, m)| {
            let mut cfg = ScenarioConfig::new(*k);
            cfg.m = *m;
            build_scenario(&cfg).expect("scenario").model
        })
        .collect();
    let strat = (0usize..models.len(), prop::collection::vec(-1.0f64..1.0, 5), 0.01f64..0.1, any::<bool>());
    finish(
        "jacobian_vs_fd",
        runner(cases).run(&strat, |(which, u, omega, neg)| {
            let model = &models[which];
            let x = match model.n {
                1 => DVector::from_element(1, 20.0 * u[0]),
                4 => DVector::from_column_slice(&[3000.0 * u[0], 20.0 * u[1], 3000.0 * u[2], 20.0 * u[3]]),
                _ => DVector::from_column_slice(&[
                    -5000.0 + 3000.0 * u[0],
                    20.0 * u[1],
                    4000.0 + 3000.0 * u[2],
                    20.0 * u[3],
                    if neg { -omega } else { omega },
                ]),
            };
            let err = tc(model.jacobian_fd_error(&x))?;
            prop_assert!(err <= 1e-4, "{:?} relative Jacobian error {err:e} at {x:?}", kinds[which].0);
            Ok(())
        }),
    )
}

/// UT moments are exact for affine maps and agree with Monte-Carlo moments
/// of a quadratic map.
pub fn ut_vs_mc(cases: u32) -> Result<(), String> {
    let strat = (any::<u64>(), 1usize..=5, 1usize..=4);
    finish(
        "ut_vs_mc",
        runner(cases).run(&strat, |(seed, n, d)| {
            let mut g = rng(seed);
            let belief = tc(GaussianBelief::new(randn_vector(&mut g, n), random_spd(&mut g, n, 0.05)))?;
            let a = randn_matrix(&mut g, d, n);
            let b = randn_vector(&mut g, d);
            let add = random_spd(&mut g, d, 0.1);
            let (a1, b1) = (a.clone(), b.clone());
            let ut = tc(unscented_transform(
                &belief,
                move |x, o| {
                    let v = &a1 * DVector::from_column_slice(x) + &b1;
                    o.copy_from_slice(v.as_slice());
                },
                d,
                &UtParams::default(),
                &add,
            ))?;
            let mean = &a * &belief.mean + &b;
            let cov = &a * &belief.cov * a.transpose() + &add;
            let cross = &belief.cov * a.transpose();
            let rel = |x: f64, y: f64| x / y.max(1e-12);
            prop_assert!(rel((&ut.mean - &mean).norm(), mean.norm()) <= 1e-9);
            prop_assert!(rel((&ut.cov - &cov).norm(), cov.norm()) <= 1e-9);
            prop_assert!(rel((&ut.crosscov - &cross).norm(), cross.norm()) <= 1e-9);

            // y = ‖x‖²: the UT mean is exact, so Monte-Carlo must agree within sampling error.
            let sq = tc(unscented_transform(&belief, |x, o| o[0] = x.iter().map(|v| v * v).sum(), 1, &UtParams::default(), &DMatrix::zeros(1, 1)))?;
            let chol = belief.cov.clone().cholesky().expect("spd").l();
            let draws = 20_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..draws {
                let x = &belief.mean + &chol * randn_vector(&mut g, n);
                let v = x.norm_squared();
                s1 += v;
                s2 += v * v;
            }
            let mc = s1 / draws as f64;
            let se = ((s2 / draws as f64 - mc * mc).max(0.0) / draws as f64).sqrt();
            prop_assert!((sq.mean[0] - mc).abs() <= 5.0 * se + 1e-12, "UT {} vs MC {mc} (se {se})", sq.mean[0]);
            Ok(())
        }),
    )
}
