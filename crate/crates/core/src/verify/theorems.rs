//! Theorem-level checks on traces of the closed loop.

use rand::Rng;
use rayon::prelude::*;

use super::{StatTestReport, Verdict};
use crate::controller::beta_bounds;
use crate::plant::{LinearPlant, Plant};
use crate::rng::{stream_rng, Stream};
use crate::sim::{
    classify, run_estimation_phase, BetaRule, Equilibrium, Phase, RunParams, SimTrace,
};

/// Checks one trace against the tracking result: the final state is one of
/// the three equilibria, the error never changes sign, and a saturated run
/// has stopped moving.
///
/// The claim is asserted only when `beta` lies inside [`beta_bounds`] for
/// the run's `epsilon` and sensitivity box.
pub fn check_theorem1(trace: &SimTrace, params: &RunParams) -> StatTestReport {
    let mut rep = StatTestReport::new(
        "theorem1",
        params.seed,
        1.0,
        "deterministic given the trace; every condition must hold",
    );
    rep.reproduce = format!("seed {}", params.seed);
    let n = trace.n();
    let e = &params.estimator;
    match beta_bounds(n, e.b_lo, e.b_hi, params.controller.epsilon) {
        Ok((lo, hi)) if params.controller.beta > lo && params.controller.beta < hi => {}
        Ok((lo, hi)) => {
            rep.notes.push(format!(
                "beta = {} outside ({lo:.6}, {hi:.6}); nothing asserted",
                params.controller.beta
            ));
            return rep;
        }
        Err(err) => {
            rep.notes.push(format!("{err}; nothing asserted"));
            return rep;
        }
    }
    let mut ok = true;
    let class = classify(trace);
    match &class {
        Ok(c) => rep.notes.push(format!("equilibrium: {c:?}")),
        Err(why) => {
            rep.notes.push(format!("unclassifiable: {why}"));
            ok = false;
        }
    }
    // The claim covers a single fast phase; stop at the first dispatch.
    let fast: Vec<_> = trace
        .rows
        .iter()
        .take_while(|r| r.phase != Phase::Dispatch)
        .collect();
    let e0 = fast[0].e;
    if let Some(r) = fast.iter().find(|r| r.e * e0 < 0.0) {
        rep.notes.push(format!("error changed sign at row {}", r.k));
        ok = false;
    }
    if matches!(class, Ok(Equilibrium::AtLower | Equilibrium::AtUpper)) {
        let w = trace.header.stall_window.min(fast.len() - 1);
        let guard = params.estimator.alpha_guard;
        let moving = fast[fast.len() - w..].windows(2).any(|p| {
            let d: f64 = p[0].u.iter().zip(&p[1].u).map(|(a, b)| (a - b).powi(2)).sum();
            d >= guard
        });
        if moving {
            rep.notes.push("setpoints still moving in the final window".into());
            ok = false;
        }
    }
    rep.tally(usize::from(ok), 1);
    rep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    /// Target strictly inside the reachable output range.
    Feasible,
    /// Target below the output at the lower bounds.
    BelowReach,
    /// Target above the output at the upper bounds.
    AboveReach,
}

impl TargetKind {
    pub fn expected(self) -> Equilibrium {
        match self {
            TargetKind::Feasible => Equilibrium::Tracked,
            TargetKind::BelowReach => Equilibrium::AtLower,
            TargetKind::AboveReach => Equilibrium::AtUpper,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrichotomyCase {
    pub plant: LinearPlant,
    pub params: RunParams,
    pub kind: TargetKind,
}

/// A random linear plant with up to nine DERs, a random start inside the box,
/// and a target of the given kind (cycled by seed). `beta` is drawn inside
/// the admissible interval.
pub fn random_trichotomy_case(seed: u64) -> TrichotomyCase {
    let mut rng = stream_rng(seed, Stream::ScenarioNoise);
    let kind = match seed % 3 {
        0 => TargetKind::Feasible,
        1 => TargetKind::BelowReach,
        _ => TargetKind::AboveReach,
    };
    let n = rng.random_range(1..=9);
    let phi: Vec<f64> = (0..n).map(|_| rng.random_range(0.85..1.15)).collect();
    let lo: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..0.0)).collect();
    let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(20.0..150.0)).collect();
    let offset = rng.random_range(-100.0..100.0);
    let plant = LinearPlant::new(phi, offset, lo.clone(), hi.clone()).expect("valid plant");
    let u0: Vec<f64> = (0..n).map(|i| rng.random_range(lo[i]..=hi[i])).collect();
    let y_lo = plant.output(&lo);
    let y_hi = plant.output(&hi);
    let y_star = match kind {
        TargetKind::Feasible => {
            let t = rng.random_range(0.05..0.95);
            y_lo + t * (y_hi - y_lo)
        }
        TargetKind::BelowReach => y_lo - rng.random_range(5.0..100.0),
        TargetKind::AboveReach => y_hi + rng.random_range(5.0..100.0),
    };
    let mut params = RunParams::new(y_star, u0);
    params.seed = seed;
    let e = &params.estimator;
    params.controller.epsilon = 0.25 * e.b_lo * e.b_lo / (n as f64 * e.b_hi * e.b_hi);
    let (blo, bhi) = beta_bounds(n, e.b_lo, e.b_hi, params.controller.epsilon).expect("valid epsilon");
    params.controller.beta = rng.random_range(blo..bhi);
    params.controller.delta = 0.5;
    params.controller.max_iters = 20_000;
    params.stall_window = 100;
    TrichotomyCase { plant, params, kind }
}

/// Runs `n_cases` random cases and checks each against [`check_theorem1`]
/// and the equilibrium its target kind predicts.
pub fn check_trichotomy(seed: u64, n_cases: usize) -> StatTestReport {
    let mut rep = StatTestReport::new(
        "theorem1_trichotomy",
        seed,
        1.0,
        "every run must classify; a single unclassifiable trace fails",
    );
    let results: Vec<(bool, Option<String>)> = (0..n_cases as u64)
        .into_par_iter()
        .map(|i| {
            let case = random_trichotomy_case(seed.wrapping_add(i));
            let trace = match run_estimation_phase(&case.params, &case.plant) {
                Ok(t) => t,
                Err(e) => return (false, Some(format!("case {i}: {e}"))),
            };
            let r = check_theorem1(&trace, &case.params);
            let class = classify(&trace);
            if !r.passed() {
                return (false, Some(format!("case {i}: {}", r.notes.join("; "))));
            }
            if class != Ok(case.kind.expected()) {
                return (
                    false,
                    Some(format!("case {i}: {:?} target ended as {class:?}", case.kind)),
                );
            }
            (true, None)
        })
        .collect();
    let passed = results.iter().filter(|r| r.0).count();
    rep.notes.extend(results.into_iter().filter_map(|r| r.1).take(10));
    rep.tally(passed, n_cases);
    rep
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corollary1Config {
    pub n_seeds: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub b_lo: f64,
    pub b_hi: f64,
    /// DER counts are drawn from `1..=n_max`.
    pub n_max: usize,
    /// Fixed step; `None` draws one inside the interval per seed.
    pub beta: Option<f64>,
    pub max_iters: usize,
}

impl Default for Corollary1Config {
    fn default() -> Self {
        Corollary1Config {
            n_seeds: 50,
            seed: 0,
            epsilon: 0.1,
            b_lo: 0.8,
            b_hi: 1.2,
            n_max: 4,
            beta: None,
            max_iters: 300,
        }
    }
}

/// Deterministic-mask runs on random linear plants; every iteration whose
/// step was not projected must shrink `|e|` by more than `1 - epsilon`.
pub fn check_corollary1(cfg: &Corollary1Config) -> StatTestReport {
    let mut rep = StatTestReport::new(
        "corollary1_rate",
        cfg.seed,
        1.0,
        "pathwise claim; every interior iteration must satisfy the rate",
    );
    let mut checked = 0;
    let mut good = 0;
    let mut skipped_seeds = 0;
    for s in 0..cfg.n_seeds as u64 {
        let seed = cfg.seed.wrapping_add(s);
        let mut rng = stream_rng(seed, Stream::ScenarioNoise);
        let n = rng.random_range(1..=cfg.n_max);
        let (blo, bhi) = match beta_bounds(n, cfg.b_lo, cfg.b_hi, cfg.epsilon) {
            Ok(b) => b,
            Err(e) => {
                rep.notes.push(format!("seed {seed}: {e}; skipped"));
                skipped_seeds += 1;
                continue;
            }
        };
        let beta = cfg.beta.unwrap_or_else(|| rng.random_range(blo..bhi));
        if !(beta > blo && beta < bhi) {
            rep.notes.push(format!(
                "seed {seed}: beta = {beta} outside ({blo:.6}, {bhi:.6}); not asserted"
            ));
            skipped_seeds += 1;
            continue;
        }
        let phi: Vec<f64> = (0..n).map(|_| rng.random_range(cfg.b_lo..=cfg.b_hi)).collect();
        let u0 = vec![50.0; n];
        let e0 = rng.random_range(10.0..40.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let offset = e0 - phi.iter().map(|p| p * 50.0).sum::<f64>();
        let plant = LinearPlant::uniform(phi, offset, 0.0, 100.0).expect("valid plant");
        let mut p = RunParams::new(0.0, u0);
        p.seed = seed;
        p.controller.randomized = false;
        p.controller.epsilon = cfg.epsilon;
        p.controller.beta = beta;
        p.controller.delta = 1e-6;
        p.controller.max_iters = cfg.max_iters;
        p.estimator.b_lo = cfg.b_lo;
        p.estimator.b_hi = cfg.b_hi;
        let trace = match run_estimation_phase(&p, &plant) {
            Ok(t) => t,
            Err(e) => {
                rep.notes.push(format!("seed {seed}: {e}"));
                skipped_seeds += 1;
                continue;
            }
        };
        let (lo, hi) = plant.bounds();
        let margin = 1e-9;
        for w in trace.rows.windows(2) {
            let interior = w[1]
                .u
                .iter()
                .enumerate()
                .all(|(i, u)| *u > lo[i] + margin && *u < hi[i] - margin);
            if !interior {
                continue;
            }
            checked += 1;
            let ratio = (w[1].e / w[0].e).abs();
            if ratio < 1.0 - cfg.epsilon {
                good += 1;
            } else if rep.notes.len() < 10 {
                rep.notes.push(format!("seed {seed} row {}: ratio {ratio}", w[1].k));
            }
        }
    }
    if skipped_seeds > 0 {
        rep.notes.push(format!("{skipped_seeds} seeds skipped"));
    }
    rep.tally(good, checked);
    rep
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Config {
    pub n: usize,
    pub n_seeds: usize,
    pub seed: u64,
    pub beta: f64,
    pub epsilon: f64,
    pub iters: usize,
    /// Pass when the final `|phi_hat - phi|` is below this.
    pub tol: f64,
    pub threshold: f64,
    pub phi_lo: f64,
    pub phi_hi: f64,
    /// Multiplier on the adaptive step `2 / |du|^2`.
    pub gain: f64,
}

impl Default for Theorem2Config {
    fn default() -> Self {
        Theorem2Config {
            n: 9,
            n_seeds: 200,
            seed: 0,
            beta: 0.0095,
            epsilon: 0.05,
            iters: 500,
            tol: 1e-3,
            threshold: 0.95,
            phi_lo: 0.85,
            phi_hi: 1.15,
            gain: 1.0,
        }
    }
}

/// Estimation convergence on linear plants with random sensitivities.
///
/// A seed passes when `|phi_hat - phi|` ends below `tol`. Seeds whose
/// setpoints touch the box are skipped. The median error at rows
/// 1, 10, 100 and the last row must not increase.
pub fn check_theorem2(cfg: &Theorem2Config) -> StatTestReport {
    let mut rep = StatTestReport::new(
        "theorem2_estimation",
        cfg.seed,
        cfg.threshold,
        "95% of seeds; with a true per-seed rate near 1 the chance of falling below is under 1e-3",
    );
    let mut params = RunParams::new(0.0, vec![50.0; cfg.n]);
    params.beta_rule = BetaRule::Estimation;
    params.controller.beta = cfg.beta;
    params.controller.epsilon = cfg.epsilon;
    params.controller.max_iters = cfg.iters;
    params.controller.delta = f64::MIN_POSITIVE;
    params.estimator.alpha_mode = crate::estimator::AlphaMode::Adaptive { gain: cfg.gain };
    let b = params.estimator;
    if let Err(e) = params.beta_interval(cfg.n).and_then(|(lo, hi)| {
        if cfg.beta > lo && cfg.beta < hi {
            Ok(())
        } else {
            Err(crate::controller::ControlError::Invalid(format!(
                "beta = {} outside ({lo:.6}, {hi:.6})",
                cfg.beta
            )))
        }
    }) {
        rep.notes.push(format!("{e}; nothing asserted"));
        return rep;
    }
    if !(cfg.phi_lo >= b.b_lo && cfg.phi_hi <= b.b_hi) {
        rep.notes.push("true sensitivities outside the estimate box; nothing asserted".into());
        return rep;
    }
    let checkpoints = [1usize, 10, 100, usize::MAX];
    let runs: Vec<Option<(bool, Vec<f64>)>> = (0..cfg.n_seeds as u64)
        .into_par_iter()
        .map(|s| {
            let seed = cfg.seed.wrapping_add(s);
            let mut rng = stream_rng(seed, Stream::ScenarioNoise);
            let phi: Vec<f64> = (0..cfg.n).map(|_| rng.random_range(cfg.phi_lo..cfg.phi_hi)).collect();
            let e0 = rng.random_range(100.0..200.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let offset = e0 - phi.iter().map(|p| p * 50.0).sum::<f64>();
            let plant = LinearPlant::uniform(phi.clone(), offset, 0.0, 100.0).ok()?;
            let mut p = params.clone();
            p.seed = seed;
            let trace = run_estimation_phase(&p, &plant).ok()?;
            let interior = trace
                .rows
                .iter()
                .all(|r| r.u.iter().all(|u| *u > 0.0 && *u < 100.0));
            if !interior {
                return None;
            }
            let err = |k: usize| {
                let r = &trace.rows[k.min(trace.rows.len() - 1)];
                r.phi_hat
                    .iter()
                    .zip(&phi)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let errs: Vec<f64> = checkpoints.iter().map(|&k| err(k)).collect();
            Some((*errs.last().unwrap() < cfg.tol, errs))
        })
        .collect();
    let skipped = runs.iter().filter(|r| r.is_none()).count();
    let done: Vec<_> = runs.into_iter().flatten().collect();
    let passed = done.iter().filter(|r| r.0).count();
    rep.tally(passed, done.len());
    if skipped > 0 {
        rep.notes.push(format!("{skipped} seeds saturated and were skipped"));
    }
    if done.len() * 2 < cfg.n_seeds {
        rep.verdict = Verdict::PreconditionNotMet;
        rep.notes.push("most seeds saturated; nothing asserted".into());
        return rep;
    }
    let medians: Vec<f64> = (0..checkpoints.len())
        .map(|c| {
            let mut v: Vec<f64> = done.iter().map(|r| r.1[c]).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    rep.notes.push(format!("median error at rows 1, 10, 100, last: {medians:?}"));
    if medians.windows(2).any(|w| w[1] > w[0]) {
        rep.notes.push("median error increased between checkpoints".into());
        rep.verdict = Verdict::Fail;
    }
    rep
}
