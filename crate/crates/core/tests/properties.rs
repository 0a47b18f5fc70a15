use ltv_watermark::detector::{stack_psi, wishart_nll};
use ltv_watermark::linalg::{block_diag, max_abs};
use ltv_watermark::rng::{derive_seed, rng_from_seed};
use ltv_watermark::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn orthogonal(dim: usize, seed: u64) -> DMatrix<f64> {
    gaussian_matrix(dim, dim, seed).qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_invariant_under_scale_preserving_rotation(
        r in 1usize..4,
        q in 1usize..3,
        extra in 0usize..6,
        sigma in 0.1f64..3.0,
        seed in any::<u64>(),
    ) {
        let d = r + q;
        let window = d + extra;
        let sigma_e = DMatrix::identity(q, q) * sigma;
        let s = block_diag(&DMatrix::identity(r, r), &sigma_e);
        let s_inv = s.clone().try_inverse().unwrap();
        let psi = gaussian_matrix(d, window, seed);
        let qm = &psi * psi.transpose();
        let u = block_diag(&orthogonal(r, seed ^ 1), &orthogonal(q, seed ^ 2));
        prop_assert!(max_abs(&(&u * &s - &s * &u)) < 1e-12);
        let rotated = &u * &qm * u.transpose();
        let (a, _) = wishart_nll(&qm, &s_inv, window);
        let (b, _) = wishart_nll(&rotated, &s_inv, window);
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn incremental_window_sum_matches_recomputation(
        dim in 1usize..5,
        window in 1usize..30,
        steps in 1usize..200,
        seed in any::<u64>(),
    ) {
        let mut stat = WindowStatistic::new(window, dim);
        let mut rng = rng_from_seed(seed);
        for _ in 0..steps {
            let psi = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal) * 10.0);
            stat.push(psi);
            let fresh = stat.recompute();
            prop_assert!(max_abs(&(stat.q() - &fresh)) < 1e-8);
        }
    }

    #[test]
    fn normalization_whitens_every_step(seed in any::<u64>(), p in 2usize..5) {
        let mut rng = rng_from_seed(seed);
        let h = 30;
        let mut m = |rows: usize, cols: usize| DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let a: Vec<_> = (0..h).map(|_| { let x = m(p, p); &x * (0.8 / ltv_watermark::linalg::spectral_norm(&x)) }).collect();
        let b: Vec<_> = (0..h).map(|_| m(p, 1)).collect();
        let c: Vec<_> = (0..h).map(|_| m(2, p)).collect();
        let k: Vec<_> = (0..h).map(|_| m(1, p) * 0.1).collect();
        let l: Vec<_> = (0..h).map(|_| m(p, 2) * 0.3).collect();
        let sw: Vec<_> = (0..h).map(|_| { let g = m(p, p); &g * g.transpose() + DMatrix::identity(p, p) * 0.1 }).collect();
        let sz: Vec<_> = (0..h).map(|_| { let g = m(2, 2); &g * g.transpose() + DMatrix::identity(2, 2) * 0.1 }).collect();
        let sys = StateSpaceSchedule::new(0.1, h, a, b, c).unwrap();
        let noise = NoiseSchedule::new(sw, sz, DMatrix::identity(1, 1)).unwrap();
        let norm = NormalizationSchedule::analytic(&sys, &GainSchedule::new(k, l), &noise).unwrap();
        prop_assert!(norm.identity_error(&sys, &noise).unwrap() < 1e-9);
    }

    #[test]
    fn stacked_vector_layout(r in 1usize..4, q in 1usize..4, seed in any::<u64>()) {
        let v = gaussian_matrix(r, r, seed);
        let res = DVector::from_iterator(r, gaussian_matrix(r, 1, seed ^ 3).iter().copied());
        let e = DVector::from_iterator(q, gaussian_matrix(q, 1, seed ^ 4).iter().copied());
        let psi = stack_psi(&v, &res, &e);
        prop_assert_eq!(psi.len(), r + q);
        prop_assert!((psi.rows(0, r) - &v * &res).amax() < 1e-12);
        prop_assert_eq!(psi.rows(r, q).into_owned(), e);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn uniform_quantile_threshold(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let samples: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        // dt · rate = 1/1000
        let thr = calibrate_threshold(&samples, 0.05, 1.0 / 50.0).unwrap();
        prop_assert!((thr - 0.999).abs() < 0.002, "{}", thr);
    }

    #[test]
    fn decomposition_holds_under_arbitrary_attacks(
        alpha in -2.0f64..2.0,
        start in 0usize..80,
        seed in any::<u64>(),
    ) {
        let s = Scenario::scalar_lti(&ScalarParams::default(), 100).unwrap();
        let attack = AttackConfig::new(
            alpha,
            vec![DMatrix::from_element(1, 1, 0.3); 100],
            vec![DMatrix::from_element(1, 1, 0.2); 100],
            start,
        ).unwrap();
        let trace = s.simulate(Some(&attack), derive_seed(seed, 0)).unwrap();
        for n in 0..trace.len() {
            let err = (&trace.x_hat[n] - &trace.x[n]) - (&trace.delta_bar[n] + &trace.delta_hat[n]);
            prop_assert!(err.amax() < 1e-9 * (1.0 + trace.x[n].amax()));
        }
    }
}

#[test]
fn same_seed_same_trace_different_seed_differs() {
    let s = Scenario::scalar_lti(&ScalarParams::default(), 200).unwrap();
    let a = s.simulate(None, 77).unwrap();
    let b = s.simulate(None, 77).unwrap();
    let c = s.simulate(None, 78).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.y, c.y);
}
