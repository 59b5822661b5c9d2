//! The experiment drivers behind the four command-line verbs.
//!
//! Every artifact is written atomically: content lands in a sibling
//! temporary file and is renamed into place, so an interrupted run never
//! leaves a truncated CSV behind. All floating-point output uses the
//! shortest decimal form that round-trips to the same f64.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use distress_portfolio::filter::{run_filter, simulate_truth_path, SimConfig};
use distress_portfolio::hjb::{recursive_solve, ValueSurface};
use distress_portfolio::model::{DistressState, MarketConfig, SimplexPoint};
use distress_portfolio::strategy::{feedback, FeedbackStrategy};
use distress_portfolio::verify::{
    calibrate_dt_allowance, run_verification, standard_perturbations, suboptimality_audit,
    Perturbation,
};

use crate::config::{ExperimentConfig, SweepTarget};
use crate::Failure;

/// Step-halving calibration measures a mean shift, not a tail, so it needs
/// far fewer paths than the verification run it feeds.
const CALIBRATION_PATH_CAP: usize = 20_000;

fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let tmp = dir.join(format!("{name}.tmp"));
    let path = dir.join(name);
    fs::write(&tmp, contents)
        .and_then(|()| fs::rename(&tmp, &path))
        .map_err(|e| Failure::Numerical(format!("cannot write {}: {e}", path.display())))
}

fn surface_stats(surface: &ValueSurface) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for row in &surface.values {
        for &v in row {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

/// Solves the coupled system and writes one full surface CSV per distress
/// state plus a bounds/diagnostics summary.
pub fn cmd_solve(exp: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    let market = exp.market.to_market()?;
    let surfaces = recursive_solve(&market, &exp.grid, &exp.solver)?;

    let mut report = format!(
        "grid {} x {} on horizon {}\n",
        exp.grid.n_time, exp.grid.n_space, market.horizon
    );
    for (z, surface) in &surfaces {
        write_atomic(out, &format!("surface_{z}.csv"), &surface.to_csv())?;
        let (lo, hi) = surface_stats(surface);
        writeln!(
            report,
            "state {z}: w in [{lo}, {hi}], enclosure [{}, {}]{}",
            surface.lower_bound,
            surface.upper_bound,
            if surface.analytic { ", closed form" } else { "" },
        )
        .expect("string formatting");
    }
    write_atomic(out, "bounds.txt", &report)
}

/// Re-solves the system per swept value and writes the feedback control as a
/// function of the first filter coordinate at t = 0, one CSV per value and
/// distress state, plus a monotonicity summary across the values.
pub fn cmd_sweep(exp: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    let sweep = exp
        .sweep
        .as_ref()
        .ok_or_else(|| Failure::Config("sweep command requires a sweep block".into()))?;
    if sweep.values.is_empty() {
        return Err(Failure::Config("sweep value list must be non-empty".into()));
    }
    let base = exp.market.to_market()?;
    let target = SweepTarget::parse(&sweep.parameter, base.n_stocks, base.n_regimes)?;
    let slug = target.slug();

    // tables[v][z][m] is the control vector at sweep value v, distress state
    // index z, lambda node m; kept for the cross-value summary.
    let mut tables: Vec<Vec<Vec<Vec<f64>>>> = Vec::with_capacity(sweep.values.len());
    for &value in &sweep.values {
        let mut cfg = base.clone();
        target.apply(&mut cfg, value);
        cfg.validate()?;
        let surfaces = recursive_solve(&cfg, &exp.grid, &exp.solver)?;
        let mut per_state = Vec::with_capacity(cfg.n_states());
        for zi in 0..cfg.n_states() {
            let z = DistressState::from_index(cfg.n_stocks, zi);
            let mut csv = String::from("lambda1");
            for i in 1..=cfg.n_stocks {
                write!(csv, ",pi{i}").expect("string formatting");
            }
            csv.push('\n');
            let mut rows = Vec::with_capacity(exp.grid.n_space);
            for m in 0..exp.grid.n_space {
                let lam = SimplexPoint::from_scalar(exp.grid.lambda(m))?;
                let pi = feedback(&cfg, &surfaces, 0.0, &lam, z)?;
                write!(csv, "{}", exp.grid.lambda(m)).expect("string formatting");
                for &p in &pi {
                    write!(csv, ",{p}").expect("string formatting");
                }
                csv.push('\n');
                rows.push(pi);
            }
            write_atomic(out, &format!("strategy_{slug}_{value}_{z}.csv"), &csv)?;
            per_state.push(rows);
        }
        tables.push(per_state);
    }

    write_atomic(out, "property_checks.txt", &sweep_summary(&base, sweep, &tables))
}

/// Direction tallies of each control component against the swept parameter,
/// pointwise in lambda: one line per distress state and live stock.
fn sweep_summary(
    base: &MarketConfig,
    sweep: &crate::config::SweepBlock,
    tables: &[Vec<Vec<Vec<f64>>>],
) -> String {
    let values: Vec<String> = sweep.values.iter().map(|v| v.to_string()).collect();
    let mut text = format!(
        "control response to {} over [{}] at t = 0\n",
        sweep.parameter,
        values.join(", ")
    );
    if tables.len() < 2 {
        text.push_str("single value; nothing to compare\n");
        return text;
    }
    for zi in 0..base.n_states() {
        let z = DistressState::from_index(base.n_stocks, zi);
        for i in z.live() {
            let (mut up, mut down, mut flat) = (0usize, 0usize, 0usize);
            for pair in tables.windows(2) {
                for (row_a, row_b) in pair[0][zi].iter().zip(&pair[1][zi]) {
                    let d = row_b[i] - row_a[i];
                    if d > 0.0 {
                        up += 1;
                    } else if d < 0.0 {
                        down += 1;
                    } else {
                        flat += 1;
                    }
                }
            }
            let verdict = match (up, down) {
                (0, 0) => "constant",
                (_, 0) => "increasing",
                (0, _) => "decreasing",
                _ => "mixed",
            };
            writeln!(
                text,
                "state {z}, pi{}: up {up} / down {down} / flat {flat} -> {verdict}",
                i + 1
            )
            .expect("string formatting");
        }
    }
    text
}

/// Solves, runs both Monte Carlo estimators against the solved value, runs
/// the suboptimality audit, and writes all four report files. Returns a
/// verification failure when any pass flag is false, so the process exit
/// code distinguishes a failed identity from a failed run.
pub fn cmd_verify(exp: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    let market = exp.market.to_market()?;
    let sim = exp.simulation.to_sim(market.horizon);
    sim.validate(&market)?;
    let z0 = exp.simulation.initial_state(market.n_stocks)?;
    let lam0 = market.initial_filter.clone();

    let surfaces = recursive_solve(&market, &exp.grid, &exp.solver)?;
    let allowance_per_dt = match exp.simulation.allowance_per_dt {
        Some(c) => c,
        None => {
            let strategy = FeedbackStrategy::new(&market, &surfaces);
            let cal = SimConfig::new(
                sim.step(),
                sim.horizon,
                sim.seed,
                sim.n_paths.min(CALIBRATION_PATH_CAP),
            );
            calibrate_dt_allowance(&market, &cal, &strategy, &lam0, z0)?
        }
    };
    let report = run_verification(&market, &sim, &surfaces, &lam0, z0, allowance_per_dt)?;
    write_atomic(out, "verification.csv", &report.to_csv())?;
    write_atomic(out, "verification.txt", &format!("{report}\n"))?;

    // The audit's constant competitors are two-stock presets; other stock
    // counts keep the scale ladder, which is defined for any market.
    let perturbations: Vec<Perturbation> = standard_perturbations()
        .into_iter()
        .filter(|p| match p {
            Perturbation::Constant(w) => w.len() == market.n_stocks,
            Perturbation::Scaled(_) => true,
        })
        .collect();
    let audit = suboptimality_audit(&market, &sim, &surfaces, &perturbations)?;
    write_atomic(out, "audit.csv", &audit.to_csv())?;
    write_atomic(out, "audit.txt", &format!("{audit}\n"))?;

    match (report.pass(), audit.pass()) {
        (true, true) => Ok(()),
        (estimators, audit_ok) => {
            let mut failed = Vec::new();
            if !estimators {
                failed.push("estimator identity");
            }
            if !audit_ok {
                failed.push("suboptimality audit");
            }
            Err(Failure::Verification(format!(
                "{} failed; see {}",
                failed.join(" and "),
                out.display()
            )))
        }
    }
}

/// Simulates one truth path, filters it, and writes the pair side by side:
/// the hidden regime, the observed log prices and distress record, and the
/// filter's regime probabilities computed from those observations alone.
pub fn cmd_filter_demo(exp: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    let market = exp.market.to_market()?;
    let sim = SimConfig::new(exp.simulation.dt, market.horizon, exp.simulation.seed, 1);
    sim.validate(&market)?;

    let path = simulate_truth_path(&market, &sim, 0);
    let filt = run_filter(&market, &path)?;

    let mut csv = String::from("t,regime");
    for i in 1..=market.n_stocks {
        write!(csv, ",log_price{i}").expect("string formatting");
    }
    csv.push_str(",distress");
    for k in 1..market.n_regimes {
        write!(csv, ",lambda{k}").expect("string formatting");
    }
    csv.push('\n');
    for j in 0..path.times.len() {
        write!(csv, "{},{}", path.times[j], path.regimes[j] + 1).expect("string formatting");
        for i in 0..market.n_stocks {
            write!(csv, ",{}", path.log_prices[j][i]).expect("string formatting");
        }
        write!(csv, ",{}", path.state_at(j)).expect("string formatting");
        for k in 0..market.n_regimes - 1 {
            write!(csv, ",{}", filt.probs[j][k]).expect("string formatting");
        }
        csv.push('\n');
    }
    write_atomic(out, "filter_demo.csv", &csv)
}
