//! Independent reference computations checked against the library.

use ltv_watermark::detector::covariance_deviation;
use ltv_watermark::linalg::{max_abs, spectral_norm};
use ltv_watermark::rng::{derive_seed, rng_from_seed};
use ltv_watermark::synthesis::{
    car_jacobians, change_coordinates, lqr_gains_with_cost, stationary_lqr_cost,
    stationary_prediction_covariance, weaving_trajectory, TrajectoryParams,
};
use ltv_watermark::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// `exp(M)` by Taylor series with scaling and squaring.
fn expm_taylor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = m.iter().map(|v| v.abs()).sum::<f64>();
    let mut s = 0;
    while norm / 2f64.powi(s) > 0.25 {
        s += 1;
    }
    let scaled = m / 2f64.powi(s);
    let d = m.nrows();
    let mut term = DMatrix::identity(d, d);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

#[test]
fn zoh_matches_taylor_reference_on_car_samples() {
    let traj = weaving_trajectory(0.05, &TrajectoryParams::default()).unwrap();
    for sample in traj.samples().iter().step_by(97) {
        let (a_c, b_c) = car_jacobians(sample);
        let (ad, bd) = discretize_zoh(&a_c, &b_c, 0.05).unwrap();
        let mut aug = DMatrix::zeros(7, 7);
        aug.view_mut((0, 0), (5, 5)).copy_from(&(&a_c * 0.05));
        aug.view_mut((0, 5), (5, 2)).copy_from(&(&b_c * 0.05));
        let reference = expm_taylor(&aug);
        assert!(max_abs(&(ad - reference.view((0, 0), (5, 5)))) < 1e-12);
        assert!(max_abs(&(bd - reference.view((0, 5), (5, 2)))) < 1e-12);
    }
}

#[test]
fn zoh_composes_over_half_steps() {
    let a_c = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -2.0, -0.3, 1.0, 0.5, 0.0, -1.0]);
    let b_c = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 0.5]);
    let (ad, bd) = discretize_zoh(&a_c, &b_c, 0.2).unwrap();
    let (ah, bh) = discretize_zoh(&a_c, &b_c, 0.1).unwrap();
    assert!(max_abs(&(&ad - &ah * &ah)) < 1e-13);
    assert!(max_abs(&(&bd - (&ah * &bh + &bh))) < 1e-13);
}

#[test]
fn scalar_lqr_fixed_point_is_golden_ratio() {
    // P = 1 + P - P²/(1 + P)  =>  P² = P + 1
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let p = stationary_lqr_cost(&m1(1.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
    assert!((p[(0, 0)] - phi).abs() < 1e-10);
    assert!((p[(0, 0)] - 1.618).abs() < 1e-3);

    let sys = StateSpaceSchedule::time_invariant(0.1, 400, m1(1.0), m1(1.0), m1(1.0)).unwrap();
    let (k, costs) = lqr_gains_with_cost(&sys, &m1(1.0), &m1(1.0), &m1(0.0)).unwrap();
    assert!((costs[0][(0, 0)] - phi).abs() < 1e-10);
    assert!((k[0][(0, 0)] + phi / (1.0 + phi)).abs() < 1e-10);
}

#[test]
fn scalar_filter_fixed_point() {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let p = stationary_prediction_covariance(&m1(1.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
    assert!((p[(0, 0)] - phi).abs() < 1e-10);
    let sys = StateSpaceSchedule::time_invariant(0.1, 200, m1(1.0), m1(1.0), m1(1.0)).unwrap();
    let noise = NoiseSchedule::time_invariant(200, m1(1.0), m1(1.0), m1(1.0)).unwrap();
    let l = observer_gains(&sys, &noise, &m1(1.0)).unwrap();
    assert!((l[199][(0, 0)] + phi / (phi + 1.0)).abs() < 1e-10);
}

fn random_stable_ltv(seed: u64, p: usize, horizon: usize) -> (StateSpaceSchedule, NoiseSchedule, GainSchedule) {
    let mut rng = rng_from_seed(seed);
    let r = 2;
    let q = 1;
    let mut rand_mat = |rows: usize, cols: usize, scale: f64| {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0) * scale)
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut c = Vec::new();
    let mut k = Vec::new();
    let mut l = Vec::new();
    let mut sw = Vec::new();
    let mut sz = Vec::new();
    for _ in 0..horizon {
        let an = rand_mat(p, p, 1.0);
        a.push(&an * (0.9 / spectral_norm(&an)));
        b.push(rand_mat(p, q, 1.0));
        let cn = rand_mat(r, p, 1.0);
        let ln = rand_mat(p, r, 0.2);
        c.push(cn);
        l.push(ln);
        k.push(rand_mat(q, p, 0.1));
        let g = rand_mat(p, p, 0.5);
        sw.push(&g * g.transpose() + DMatrix::identity(p, p) * 0.01);
        let h = rand_mat(r, r, 0.5);
        sz.push(&h * h.transpose() + DMatrix::identity(r, r) * 0.01);
    }
    let sys = StateSpaceSchedule::new(0.1, horizon, a, b, c).unwrap();
    let noise = NoiseSchedule::new(sw, sz, DMatrix::identity(q, q)).unwrap();
    (sys, noise, GainSchedule::new(k, l))
}

#[test]
fn error_covariance_matches_explicit_sum() {
    for case in 0..20u64 {
        let p = 3 + (case % 3) as usize;
        let (sys, noise, gains) = random_stable_ltv(derive_seed(11, case), p, 50);
        let rec = propagate_error_covariance(&sys, &gains, &noise, 50).unwrap();
        for n in 0..50 {
            // Σδ[n] = Σ_{k<n} Φ(n,k+1) (Σw[k] + L Σz[k] Lᵀ) Φ(n,k+1)ᵀ
            let mut sum = DMatrix::zeros(p, p);
            for k in 0..n {
                let mut phi = DMatrix::identity(p, p);
                for m in k + 1..n {
                    phi = sys.observer_loop(&gains, m) * phi;
                }
                let l = &gains.observer[k];
                let drive = noise.process(k) + l * noise.measurement(k) * l.transpose();
                sum += &phi * drive * phi.transpose();
            }
            assert!(max_abs(&(&rec[n] - sum)) < 1e-10, "case {case} step {n}");
        }
    }
}

#[test]
fn gaussian_draws_have_requested_moments() {
    let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let mut rng = rng_from_seed(3);
    let n = 100_000;
    let mut mean = DVector::zeros(2);
    let mut second = DMatrix::zeros(2, 2);
    for _ in 0..n {
        let x = draw_gaussian(&cov, &mut rng).unwrap();
        mean += &x;
        second.ger(1.0, &x, &x, 1.0);
    }
    mean /= n as f64;
    second /= n as f64;
    assert!(mean.amax() < 0.02);
    assert!(max_abs(&(second - &cov)) < 0.03);
}

#[test]
fn observer_error_splits_into_noise_and_attack_parts() {
    let car = build_car_scenario(&CarParams::default()).unwrap();
    let s = &car.scenario;
    let attack = replay_preset(&s.system, &s.noise, &s.gains, 300).unwrap();
    let trace = s.simulate(Some(&attack), 8).unwrap();
    let mut worst: f64 = 0.0;
    for n in 0..trace.len() {
        let delta = &trace.x_hat[n] - &trace.x[n];
        let parts = &trace.delta_bar[n] + &trace.delta_hat[n];
        worst = worst.max((delta - parts).amax());
        if n <= 300 {
            assert_eq!(trace.delta_hat[n].amax(), 0.0);
        }
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn unattacked_residual_covariance_matches_prediction() {
    let params = ScalarParams::default();
    let s = Scenario::scalar_lti(&params, 30).unwrap();
    let runs = 40_000;
    let mut second = vec![0.0; 30];
    for j in 0..runs {
        let t = s.simulate(None, derive_seed(21, j)).unwrap();
        for (acc, r) in second.iter_mut().zip(&t.residual) {
            *acc += r[0] * r[0] / runs as f64;
        }
    }
    let sigma = s.normalization.sigma_delta().unwrap();
    for n in [0, 1, 5, 29] {
        let predicted = sigma[n][(0, 0)] + params.measurement;
        assert!((second[n] / predicted - 1.0).abs() < 0.04, "step {n}");
    }
}

#[test]
fn ensemble_normalization_agrees_with_analytic() {
    let s = Scenario::scalar_lti(&ScalarParams::default(), 30).unwrap();
    let traces: Vec<_> = (0..40_000)
        .map(|j| s.simulate(None, derive_seed(22, j)).unwrap())
        .collect();
    let ens = estimate_normalization_ensemble(&traces).unwrap();
    for n in 0..30 {
        let a = s.normalization.v(n)[(0, 0)];
        let e = ens.v(n)[(0, 0)];
        assert!((e / a - 1.0).abs() < 0.02, "step {n}: {e} vs {a}");
    }
}

#[test]
fn lti_baseline_matches_steady_state_factor() {
    let s = Scenario::scalar_lti(&ScalarParams::default(), 2_000).unwrap();
    let traces: Vec<_> = (0..50)
        .map(|j| s.simulate(None, derive_seed(23, j)).unwrap())
        .collect();
    let v = lti_baseline_normalization(&traces).unwrap();
    let steady = s.normalization.v(1_999)[(0, 0)];
    assert!((v[(0, 0)] / steady - 1.0).abs() < 0.02);
}

#[test]
fn realizations_share_normalization_and_visibility() {
    let physical = build_car_scenario(&CarParams {
        coordinates: CarCoordinates::Physical,
        ..CarParams::default()
    })
    .unwrap();
    let balanced = build_car_scenario(&CarParams::default()).unwrap();
    let (p, b) = (&physical.scenario, &balanced.scenario);
    for n in (0..p.horizon()).step_by(50) {
        let rel = max_abs(&(p.normalization.v(n) - b.normalization.v(n))) / max_abs(p.normalization.v(n));
        assert!(rel < 1e-8, "step {n}: {rel}");
        let cb_p = p.system.c(n + 1) * p.system.b(n);
        let cb_b = b.system.c(n + 1) * b.system.b(n);
        assert!(max_abs(&(cb_p - cb_b)) < 1e-10);
    }
}

#[test]
fn coordinate_change_preserves_residuals_given_same_signals() {
    let (sys, noise, gains) = random_stable_ltv(5, 4, 40);
    let mut rng = rng_from_seed(9);
    let t: Vec<_> = (0..=40)
        .map(|_| DMatrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.0 } + rng.random_range(-0.3..0.3)))
        .collect();
    let (sys2, _, gains2) = change_coordinates(&sys, &noise, &gains, &t).unwrap();
    let mut s1 = SimulationState::zero(4);
    let mut s2 = SimulationState::zero(4);
    for n in 0..40 {
        let e = DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let z = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let v = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let (n1, o1) = system::advance(&sys, &gains, &s1, &e, &w, &z, &v).unwrap();
        let (n2, o2) = system::advance(&sys2, &gains2, &s2, &e, &(&t[n + 1] * &w), &z, &v).unwrap();
        assert!((o1.residual - o2.residual).amax() < 1e-9, "step {n}");
        s1 = n1;
        s2 = n2;
    }
}

#[test]
fn covariance_deviation_of_identity_is_zero() {
    assert_eq!(covariance_deviation(&DMatrix::identity(3, 3)), 0.0);
}
