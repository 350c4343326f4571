use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use dercoord::plant::Plant;
use dercoord::sim::{
    compute_metrics, run_two_timescale, write_trace, Scenario, ScenarioConfig, SimError, SimTrace,
    Termination,
};
use dercoord::verify::{run_suite, Suite, Verdict};

/// Data-driven DER coordination on radial feeders.
#[derive(Parser)]
#[command(name = "dercoord", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its trace.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Trace CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario for several values of one parameter and many seeds.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        /// Seeds 0..N per value.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Run the verification suites; one JSON report per line.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        /// Seeds or instances per randomized check.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Finite-difference sensitivities of a scenario's plant.
    Oracle {
        #[arg(long)]
        scenario: PathBuf,
        /// Setpoints (kW, comma-separated); defaults to the run's u0.
        #[arg(long, value_delimiter = ',')]
        at: Option<Vec<f64>>,
    },
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        // Anything that is not the plant failing is bad input.
        let code = match err.downcast_ref::<SimError>() {
            Some(e) if e.is_plant_failure() => 3,
            _ => 2,
        };
        Failure { code, err }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run { scenario, seed, out } => run(&scenario, seed, out.as_deref()),
        Command::Sweep {
            scenario,
            param,
            values,
            seeds,
        } => sweep(&scenario, &param, &values, seeds),
        Command::Verify { suite, seeds } => verify(suite, seeds),
        Command::Oracle { scenario, at } => oracle(&scenario, at),
    };
    match res {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    Scenario::load(path)
        .with_context(|| format!("loading scenario {}", path.display()))
        .map_err(Failure::from)
}

fn run(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<ExitCode, Failure> {
    let sc = load(path)?;
    let check = sc.sensitivity_check()?;
    if !check.within {
        eprintln!(
            "warning: plant sensitivities span [{:.4}, {:.4}], outside the assumed [{}, {}]",
            check.min, check.max, sc.config.b_lo, sc.config.b_hi
        );
    }
    let plant = sc.plant()?;
    let params = sc.run_params(seed)?;
    let trace = run_two_timescale(&params, &plant, sc.config.n_slow)?;
    match out {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            let mut w = BufWriter::new(f);
            write_trace(&trace, &mut w)?;
            w.flush().context("writing trace")?;
        }
        None => write_trace(&trace, io::stdout().lock())?,
    }
    let last = trace.last().expect("a trace has its initial row");
    eprintln!(
        "{} rows, termination {:?}, final y = {:.3} kW, e = {:.3} kW",
        trace.rows.len(),
        trace.termination(),
        last.y,
        last.e
    );
    if let Some(Termination::PlantFailure { k, message }) = trace.termination() {
        eprintln!("error: plant failed to converge at row {k}: {message}");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

struct SeedOutcome {
    tracked: bool,
    iterations: Option<usize>,
    terminal_e: f64,
    terminal_mae: f64,
}

fn sweep(path: &Path, param: &str, values: &[f64], seeds: u64) -> Result<ExitCode, Failure> {
    if values.is_empty() {
        return Err(anyhow::anyhow!("--values needs at least one value").into());
    }
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let base = ScenarioConfig::from_toml(&text)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut stdout = io::stdout().lock();
    for &v in values {
        let mut cfg = base.clone();
        cfg.set_param(param, v)?;
        let sc = Scenario::from_config(cfg, dir)?;
        let plant = sc.plant()?;
        let n_slow = sc.config.n_slow;
        let outcomes: Vec<Result<SeedOutcome, SimError>> = (0..seeds)
            .into_par_iter()
            .map(|s| {
                let params = sc.run_params(Some(s))?;
                let trace = run_two_timescale(&params, &plant, n_slow)?;
                summarize(&trace, &plant)
            })
            .collect();
        let outcomes: Vec<SeedOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;
        let n = outcomes.len() as f64;
        let mut iters: Vec<usize> = outcomes.iter().filter_map(|o| o.iterations).collect();
        iters.sort_unstable();
        let mut maes: Vec<f64> = outcomes.iter().map(|o| o.terminal_mae).collect();
        maes.sort_by(f64::total_cmp);
        let line = json!({
            "param": param,
            "value": v,
            "seeds": seeds,
            "tracked_fraction": outcomes.iter().filter(|o| o.tracked).count() as f64 / n,
            "median_iterations_to_delta": iters.get(iters.len() / 2),
            "median_terminal_mae": maes.get(maes.len() / 2),
            "mean_abs_terminal_e": outcomes.iter().map(|o| o.terminal_e.abs()).sum::<f64>() / n,
        });
        writeln!(stdout, "{line}").context("writing output")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn summarize(trace: &SimTrace, plant: &dyn Plant) -> Result<SeedOutcome, SimError> {
    let last = trace.last().expect("initial row");
    let oracle = plant.sensitivity(&last.u)?;
    let m = compute_metrics(trace, &[oracle])?;
    Ok(SeedOutcome {
        tracked: matches!(trace.termination(), Some(Termination::Tracked)),
        iterations: m.iterations_to_delta,
        terminal_e: m.terminal_e,
        terminal_mae: *m.mae.last().expect("one entry per row"),
    })
}

fn verify(suite: Suite, seeds: Option<usize>) -> Result<ExitCode, Failure> {
    if seeds == Some(0) {
        return Err(anyhow::anyhow!("--seeds must be at least 1").into());
    }
    let reports = run_suite(suite, seeds);
    let mut stdout = io::stdout().lock();
    for r in &reports {
        let line = serde_json::to_string(r).context("encoding report")?;
        writeln!(stdout, "{line}").context("writing output")?;
    }
    let failed = reports.iter().any(|r| r.verdict == Verdict::Fail);
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn oracle(path: &Path, at: Option<Vec<f64>>) -> Result<ExitCode, Failure> {
    let sc = load(path)?;
    let plant = sc.plant()?;
    let u = match at {
        Some(u) => u,
        None => sc.run_params(None)?.u0,
    };
    if u.len() != plant.n_inputs() {
        return Err(anyhow::anyhow!("--at needs {} values, got {}", plant.n_inputs(), u.len()).into());
    }
    let m = plant.measure(&u).map_err(SimError::from)?;
    let phi = plant.sensitivity(&u).map_err(SimError::from)?;
    let line = json!({
        "u": u,
        "y": m.y,
        "der_buses": sc.feeder.der_buses(),
        "phi": phi,
    });
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}
