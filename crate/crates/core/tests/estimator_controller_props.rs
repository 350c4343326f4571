use dercoord::controller::{beta_bounds, sample_mask, solve_odcp, tracking_step, ControlError};
use dercoord::estimator::{estimation_step, predict_output, scaled_alpha, SensitivityEstimate, StepSize};
use dercoord::verify::random_qp_instance;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const B_LO: f64 = 0.8;
const B_HI: f64 = 1.2;

fn estimate(v: Vec<f64>) -> SensitivityEstimate {
    SensitivityEstimate::new(v, B_LO, B_HI).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vecs(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(B_LO..=B_HI, n),
        prop::collection::vec(B_LO..=B_HI, n),
        prop::collection::vec(-20.0f64..20.0, n),
    )
}

#[test]
fn scalar_reflection_and_exact_landing() {
    // n = 1, estimate 1.0, true slope 1.1, du = 2: dy = 2.2, residual -0.2.
    let est = estimate(vec![1.0]);
    let reflected = estimation_step(&est, &[2.0], 2.2, scaled_alpha(&[2.0], 1e-12, 2.0)).unwrap();
    assert!((reflected.phi_hat()[0] - 1.2).abs() < 1e-12);
    let landed = estimation_step(&est, &[2.0], 2.2, scaled_alpha(&[2.0], 1e-12, 1.0)).unwrap();
    assert!((landed.phi_hat()[0] - 1.1).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn estimate_stays_in_box(
        (phi, _, du) in (1usize..10).prop_flat_map(vecs),
        dy in -1e3f64..1e3,
        gain in 0.0f64..4.0,
    ) {
        let next = estimation_step(&estimate(phi), &du, dy, scaled_alpha(&du, 1e-12, gain)).unwrap();
        prop_assert!(next.phi_hat().iter().all(|v| (B_LO..=B_HI).contains(v)));
    }

    #[test]
    fn unit_gain_cancels_the_residual((phi_hat, phi, du) in (1usize..8).prop_flat_map(vecs)) {
        prop_assume!(du.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let est = estimate(phi_hat.clone());
        let dy = dot(&phi, &du);
        let next = estimation_step(&est, &du, dy, scaled_alpha(&du, 1e-12, 1.0)).unwrap();
        let raw_inside = next.phi_hat().iter().all(|v| *v > B_LO && *v < B_HI);
        if raw_inside {
            // Unclamped: the new estimate explains the last observation.
            prop_assert!((dot(next.phi_hat(), &du) - dy).abs() <= 1e-9 * (1.0 + dy.abs()));
        }
        // Gain 2 reflects the residual when nothing clamps.
        let refl = estimation_step(&est, &du, dy, scaled_alpha(&du, 1e-12, 2.0)).unwrap();
        if refl.phi_hat().iter().all(|v| *v > B_LO && *v < B_HI) {
            let before = dot(&phi_hat, &du) - dy;
            let after = dot(refl.phi_hat(), &du) - dy;
            prop_assert!((after + before).abs() <= 1e-9 * (1.0 + before.abs()));
        }
    }

    #[test]
    fn projection_never_increases_distance_to_truth((phi_hat, phi, du) in (1usize..8).prop_flat_map(vecs)) {
        prop_assume!(du.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let est = estimate(phi_hat.clone());
        let next = estimation_step(&est, &du, dot(&phi, &du), scaled_alpha(&du, 1e-12, 1.0)).unwrap();
        let dist = |a: &[f64]| a.iter().zip(&phi).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        prop_assert!(dist(next.phi_hat()) <= dist(&phi_hat) + 1e-12);
    }

    #[test]
    fn skipped_step_keeps_estimate((phi_hat, _, _) in (1usize..8).prop_flat_map(vecs), dy in -5.0f64..5.0) {
        let est = estimate(phi_hat);
        let du = vec![0.0; est.len()];
        prop_assert_eq!(scaled_alpha(&du, 1e-12, 1.0), StepSize::Skip);
        let next = estimation_step(&est, &du, dy, StepSize::Skip).unwrap();
        prop_assert_eq!(next, est);
    }

    #[test]
    fn prediction_is_exact_for_linear_plants((phi, _, du) in (1usize..8).prop_flat_map(vecs), y0 in -100.0f64..100.0) {
        let u_prev = vec![50.0; phi.len()];
        let u: Vec<f64> = u_prev.iter().zip(&du).map(|(a, d)| a + d).collect();
        let y = predict_output(&estimate(phi.clone()), y0, &u, &u_prev).unwrap();
        prop_assert!((y - y0 - dot(&phi, &du)).abs() < 1e-9);
    }

    #[test]
    fn tracking_step_stays_in_box(
        n in 1usize..10,
        e in -1e4f64..1e4,
        beta in 0.0f64..1.0,
        seed in any::<u64>(),
        frac in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = sample_mask(&mut rng, n);
        let lo = vec![0.0; n];
        let hi = vec![100.0; n];
        let u = vec![100.0 * frac; n];
        let est = estimate(vec![1.0; n]);
        let next = tracking_step(&u, e, &est, &mask, beta, &lo, &hi).unwrap();
        for i in 0..n {
            prop_assert!(next[i] >= lo[i] && next[i] <= hi[i]);
            if !mask[i] {
                prop_assert_eq!(next[i], u[i]);
            }
        }
    }

    /// With beta below the upper bound and every component of both the true
    /// and estimated sensitivity in the box, one step never overshoots the
    /// target and never increases the error, projection or not.
    #[test]
    fn admissible_step_contracts_the_error(
        (phi_hat, phi, frac) in (1usize..10).prop_flat_map(|n| (
            prop::collection::vec(B_LO..=B_HI, n),
            prop::collection::vec(B_LO..=B_HI, n),
            prop::collection::vec(0.0f64..=1.0, n),
        )),
        e in -500.0f64..500.0,
        t in 0.01f64..1.0,
        seed in any::<u64>(),
    ) {
        let n = phi.len();
        let (_, hi_beta) = beta_bounds(n, B_LO, B_HI, 0.01).unwrap();
        let beta = t * hi_beta;
        let lo = vec![0.0; n];
        let hi = vec![100.0; n];
        let u: Vec<f64> = frac.iter().map(|f| 100.0 * f).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = sample_mask(&mut rng, n);
        let next = tracking_step(&u, e, &estimate(phi_hat), &mask, beta, &lo, &hi).unwrap();
        let du: Vec<f64> = next.iter().zip(&u).map(|(a, b)| a - b).collect();
        let e_new = e + dot(&phi, &du);
        prop_assert!(e_new * e >= -1e-12, "overshoot: {} -> {}", e, e_new);
        prop_assert!(e_new.abs() <= e.abs() + 1e-12);
    }

    #[test]
    fn dispatch_is_feasible_and_scale_invariant(seed in 0u64..500, s in 0.01f64..100.0) {
        let inst = random_qp_instance(seed, false);
        let f = Some(&inst.feeder);
        let d = match solve_odcp(&inst.prob, f) {
            Ok(d) => d,
            Err(e) => return Err(TestCaseError::fail(format!("{e}"))),
        };
        let ineq = inst.prob.inequalities(f).unwrap();
        prop_assert!(ineq.max_violation(&d.p) < 1e-8);
        let reach = inst.prob.y_now
            + (0..inst.prob.n()).map(|i| inst.prob.phi_hat[i] * (d.p[i] - inst.prob.p_tilde[i])).sum::<f64>();
        prop_assert!((reach - inst.prob.y_star).abs() < 1e-8);
        prop_assert!(d.kkt.max() < 1e-6);
        let mut scaled = inst.prob.clone();
        scaled.cost = scaled.cost.scaled(s, scaled.n());
        let d2 = solve_odcp(&scaled, f).unwrap();
        for (a, b) in d.p.iter().zip(&d2.p) {
            prop_assert!((a - b).abs() < 1e-7, "{} vs {}", a, b);
        }
    }

    #[test]
    fn unreachable_targets_are_infeasible(seed in 0u64..500) {
        let inst = random_qp_instance(seed, true);
        let r = solve_odcp(&inst.prob, Some(&inst.feeder));
        prop_assert!(matches!(r, Err(ControlError::Infeasible(_))));
    }
}
