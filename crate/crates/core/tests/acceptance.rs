//! Acceptance report: one PASS/FAIL line per headline criterion.
//!
//! Runs as a plain binary (`harness = false`). The process exits 0 so the
//! report is always printed in full; the same properties are asserted by
//! the ordinary integration tests.

use std::path::PathBuf;
use std::time::Instant;

use dercoord::controller::beta_bounds;
use dercoord::plant::Plant;
use dercoord::sim::{
    compute_metrics, run_estimation_phase, run_two_timescale, write_trace, Phase, Scenario,
    Termination,
};
use dercoord::verify::{
    check_corollary1, check_qp_oracle, check_trichotomy, run_suite, Corollary1Config, Suite,
    Verdict, SUITE_SEED,
};

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/scenarios").join(name);
    Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn step_size_bound() -> Outcome {
    let (_, hi) = beta_bounds(9, 0.8, 1.2, 0.01).expect("valid inputs");
    let quoted = 0.069_444;
    let pass = (hi - quoted).abs() / quoted < 5e-5;
    Outcome {
        pass,
        detail: format!("upper = 1/(9*1.2^2) = {hi:.6}; quoted {quoted}"),
    }
}

fn tracking() -> Outcome {
    let sc = scenario("case1.toml");
    let plant = sc.plant().expect("plant");
    let t0 = Instant::now();
    let mut tracked = 0;
    let mut y0 = f64::NAN;
    for seed in 0..100 {
        let p = sc.run_params(Some(seed)).expect("params");
        let tr = run_estimation_phase(&p, &plant).expect("run");
        y0 = tr.rows[0].y;
        let last = tr.last().expect("rows");
        if matches!(tr.termination(), Some(Termination::Tracked)) && last.k <= 1000 {
            tracked += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: tracked >= 95 && secs <= 60.0,
        detail: format!("y0 = {y0:.1} kW, tracked {tracked}/100 within 1000 iterations, {secs:.1} s"),
    }
}

fn trichotomy() -> Outcome {
    let r = check_trichotomy(SUITE_SEED + 10, 300);
    Outcome {
        pass: r.verdict == Verdict::Pass,
        detail: format!(
            "{}/{} classified as predicted{}",
            (r.pass_fraction * r.n_trials as f64).round(),
            r.n_trials,
            r.notes.first().map(|n| format!("; {n}")).unwrap_or_default()
        ),
    }
}

fn corollary() -> Outcome {
    let r = check_corollary1(&Corollary1Config {
        seed: SUITE_SEED + 11,
        ..Corollary1Config::default()
    });
    Outcome {
        pass: r.verdict == Verdict::Pass,
        detail: format!(
            "{} interior iterations over 50 seeds, fraction below 0.9: {}",
            r.n_trials, r.pass_fraction
        ),
    }
}

fn estimation() -> Outcome {
    let sc = scenario("case1.toml");
    let plant = sc.plant().expect("plant");
    let mut runs = Vec::new();
    for seed in 0..50 {
        let p = sc.run_params(Some(seed)).expect("params");
        let tr = run_estimation_phase(&p, &plant).expect("run");
        let last = tr.last().expect("rows").clone();
        let oracle = plant.sensitivity(&last.u).expect("oracle");
        let m = compute_metrics(&tr, std::slice::from_ref(&oracle)).expect("metrics");
        runs.push((*m.mae.last().expect("rows"), last.k, last.phi_hat, oracle));
    }
    let good = runs.iter().filter(|r| r.0 < 0.01 && r.1 <= 600).count();
    runs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mae, _, est, oracle) = &runs[runs.len() / 2];
    let worst_rel = est
        .iter()
        .zip(oracle)
        .map(|(e, o)| ((e - o) / o).abs())
        .fold(0.0, f64::max);
    Outcome {
        pass: good >= 45 && worst_rel <= 0.01,
        detail: format!(
            "MAE < 0.01 in {good}/50 seeds; median-seed MAE {mae:.2e}, worst component {:.3}%",
            100.0 * worst_rel
        ),
    }
}

fn regimes() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, lo, hi) in [("case1.toml", 1.0, 1.2), ("case2.toml", 0.8, 1.0)] {
        let sc = scenario(name);
        let plant = sc.plant().expect("plant");
        let u0 = sc.run_params(None).expect("params").u0;
        let phi = plant.sensitivity(&u0).expect("oracle");
        let (mn, mx) = phi
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        pass &= mn > lo && mx < hi;
        parts.push(format!("{name}: [{mn:.4}, {mx:.4}] vs ({lo}, {hi})"));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn congestion() -> Outcome {
    let sc = scenario("case3.toml");
    let plant = sc.plant().expect("plant");
    let p = sc.run_params(None).expect("params");
    let tr = run_two_timescale(&p, &plant, sc.config.n_slow).expect("run");
    let Some(k) = tr.rows.iter().position(|r| r.phase == Phase::Dispatch) else {
        return Outcome {
            pass: false,
            detail: "no dispatch row".into(),
        };
    };
    let line = 56;
    let limit = 40.0;
    let der = sc.feeder.der_buses().iter().position(|b| *b == 56).expect("DER 56");
    let (before, after) = (&tr.rows[k - 1], &tr.rows[k]);
    let flow = tr.line_flows[k][line - 1].abs();
    let miss = after.e.abs();
    let down = after.u[der] < before.u[der];
    let others_up = (0..after.u.len())
        .filter(|&i| i != der)
        .all(|i| after.u[i] >= before.u[i]);
    let peak = tr.line_flows[..k]
        .iter()
        .map(|f| f[line - 1].abs())
        .fold(0.0, f64::max);
    Outcome {
        pass: flow <= limit + 1e-6 && miss <= 2.0 && down && others_up,
        detail: format!(
            "pre-dispatch peak {peak:.2} kW, post {flow:.3} kW (limit {limit}); |y - y*| = {miss:.3} kW; DER 56 {:.2} -> {:.2} kW, others up: {others_up}",
            before.u[der], after.u[der]
        ),
    }
}

fn qp_oracle() -> Outcome {
    let r = check_qp_oracle(SUITE_SEED + 20, 100);
    Outcome {
        pass: r.verdict == Verdict::Pass,
        detail: format!(
            "{}/100 instances agree{}",
            (r.pass_fraction * r.n_trials as f64).round(),
            r.notes.first().map(|n| format!("; {n}")).unwrap_or_default()
        ),
    }
}

fn lemma_suites() -> Outcome {
    let a = run_suite(Suite::Lemmas, None);
    let b = run_suite(Suite::Lemmas, None);
    let all_pass = a.iter().all(|r| r.verdict == Verdict::Pass);
    let summary: Vec<String> = a
        .iter()
        .map(|r| format!("{} {:?} {:.4}", r.name, r.verdict, r.pass_fraction))
        .collect();
    Outcome {
        pass: all_pass && a == b,
        detail: format!("{}; rerun identical: {}", summary.join(", "), a == b),
    }
}

fn determinism() -> Outcome {
    let sc = scenario("case1.toml");
    let plant = sc.plant().expect("plant");
    let once = || {
        let p = sc.run_params(Some(7)).expect("params");
        let tr = run_two_timescale(&p, &plant, sc.config.n_slow).expect("run");
        let mut buf = Vec::new();
        write_trace(&tr, &mut buf).expect("write");
        buf
    };
    let (a, b) = (once(), once());
    Outcome {
        pass: a == b,
        detail: format!("{} bytes, identical: {}", a.len(), a == b),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("step-size bound", step_size_bound),
        ("tracking convergence", tracking),
        ("equilibrium trichotomy", trichotomy),
        ("deterministic rate", corollary),
        ("estimation convergence", estimation),
        ("sensitivity regimes", regimes),
        ("congestion relief", congestion),
        ("dispatch oracle", qp_oracle),
        ("random product/sum suites", lemma_suites),
        ("determinism", determinism),
    ];
    let mut passed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let o = f();
        passed += usize::from(o.pass);
        println!(
            "{} {name}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("{passed}/{} criteria pass", criteria.len());
}
