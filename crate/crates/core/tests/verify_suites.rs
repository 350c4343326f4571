use dercoord::sim::{classify, run_estimation_phase};
use dercoord::verify::{
    check_bounded_sum, check_corollary1, check_lemma1, check_product_convergence, check_qp_oracle,
    check_theorem1, check_theorem2, check_trichotomy, random_trichotomy_case, run_suite, Corollary1Config,
    Suite, TargetKind, Theorem2Config, Verdict,
};
use proptest::prelude::*;

#[test]
fn products_vanish() {
    let r = check_product_convergence(1, 0.99, 100_000, 300, 0.99);
    assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    let r = check_product_convergence(2, 0.5, 100, 300, 0.999);
    assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
}

#[test]
fn short_horizon_is_inconclusive_not_failed() {
    // 0.99^k < 1e-6 needs about 1375 x-draws, impossible in 1000 steps.
    let r = check_product_convergence(3, 0.99, 1000, 50, 0.99);
    assert_eq!(r.pass_fraction, 0.0);
    assert_eq!(r.verdict, Verdict::Inconclusive);
}

#[test]
fn bad_factor_is_a_precondition_failure() {
    let r = check_product_convergence(4, 1.0, 1000, 10, 0.99);
    assert_eq!(r.verdict, Verdict::PreconditionNotMet);
    let r = check_bounded_sum(4, 1.5, 100, 10, 0.99);
    assert_eq!(r.verdict, Verdict::PreconditionNotMet);
}

#[test]
fn sums_are_bounded() {
    let r = check_bounded_sum(5, 0.5, 200, 5000, 0.999);
    assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    let r = check_bounded_sum(6, 0.9, 2000, 500, 0.999);
    assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
}

#[test]
fn projected_updates_have_witnesses() {
    let r = check_lemma1(7, 20);
    assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
}

#[test]
fn trichotomy_cases_end_where_predicted() {
    let r = check_trichotomy(8, 60);
    assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    assert_eq!(r.n_trials, 60);
}

#[test]
fn each_kind_of_target_is_generated_and_classified() {
    for seed in 30..36 {
        let case = random_trichotomy_case(seed);
        let tr = run_estimation_phase(&case.params, &case.plant).unwrap();
        assert_eq!(classify(&tr), Ok(case.kind.expected()), "seed {seed}");
        assert!(check_theorem1(&tr, &case.params).passed());
    }
    let kinds: Vec<TargetKind> = (0..3).map(|s| random_trichotomy_case(s).kind).collect();
    assert_eq!(kinds, [TargetKind::Feasible, TargetKind::BelowReach, TargetKind::AboveReach]);
}

#[test]
fn unsafe_step_is_not_asserted() {
    let mut case = random_trichotomy_case(12);
    case.params.controller.beta = 10.0;
    case.params.allow_unsafe_beta = true;
    let tr = run_estimation_phase(&case.params, &case.plant).unwrap();
    assert_eq!(check_theorem1(&tr, &case.params).verdict, Verdict::PreconditionNotMet);
}

#[test]
fn deterministic_rate_holds() {
    let r = check_corollary1(&Corollary1Config {
        n_seeds: 20,
        seed: 9,
        ..Corollary1Config::default()
    });
    assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    assert!(r.n_trials > 0);
    let r = check_corollary1(&Corollary1Config {
        n_seeds: 5,
        seed: 9,
        beta: Some(5.0),
        ..Corollary1Config::default()
    });
    assert_eq!(r.verdict, Verdict::PreconditionNotMet, "{r:?}");
}

#[test]
fn estimation_error_shrinks_in_median() {
    let r = check_theorem2(&Theorem2Config {
        n_seeds: 60,
        seed: 10,
        ..Theorem2Config::default()
    });
    assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
}

#[test]
fn dispatch_solver_matches_grid_search() {
    let r = check_qp_oracle(11, 40);
    assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
}

#[test]
fn suites_are_reproducible() {
    let a = run_suite(Suite::Qp, Some(10));
    let b = run_suite(Suite::Qp, Some(10));
    assert_eq!(a, b);
    assert!(a.iter().all(|r| r.reproduce == "dercoord verify --suite qp --seeds 10"));
    let lemmas = run_suite(Suite::Lemmas, None);
    assert_eq!(lemmas.len(), 5);
    assert!(lemmas.iter().all(|r| r.verdict == Verdict::Pass), "{lemmas:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn verdict_follows_the_threshold(
        seed in any::<u64>(),
        x in 0.05f64..0.95,
        k_max in 1u64..300,
        n_trials in 1usize..40,
        threshold in 0.0f64..=1.0,
    ) {
        let r = check_product_convergence(seed, x, k_max, n_trials, threshold);
        let reached = r.pass_fraction >= threshold;
        match r.verdict {
            Verdict::Pass => prop_assert!(reached),
            Verdict::Fail | Verdict::Inconclusive => prop_assert!(!reached),
            Verdict::PreconditionNotMet => prop_assert!(false, "valid inputs"),
        }
        prop_assert_eq!(r.n_trials, n_trials);
        prop_assert_eq!(&check_product_convergence(seed, x, k_max, n_trials, threshold), &r);
    }
}
