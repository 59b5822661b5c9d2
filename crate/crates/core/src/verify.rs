//! Monte Carlo checks of a solved system against the quantity it claims to
//! compute: expected terminal utility of the feedback investor.
//!
//! Two independent estimators attack the same number from opposite sides of
//! the measure change. [`estimate_objective_tilde_p`] simulates the
//! controlled filter and averages the exponential cost functional, which is
//! the objective in the reduced, fully observed problem. One path costs one
//! filter simulation. [`simulate_wealth_physical`] never sees the reduced
//! problem: it simulates hidden ground truth, filters the observations, lets
//! the strategy trade on the filter, and compounds actual wealth. If model,
//! filter, solver, and feedback rule are wired correctly, both averages match
//! the solved value `(v^gamma / gamma) exp(w(0, lambda0, z0))` up to sampling
//! noise and an `O(dt)` discretization bias.
//!
//! The bias allowance is calibrated, not assumed: [`calibrate_dt_allowance`]
//! runs the estimators at `dt` and `dt/2` and extrapolates the first-order
//! bias coefficient, which [`run_verification`] then applies as
//! `coefficient * dt` on top of the three-standard-error band.
//!
//! [`suboptimality_audit`] closes the loop on optimality itself: scaling the
//! feedback control or replacing it with constants must not beat it beyond
//! statistical noise. All perturbations reuse the same driving noise per path
//! index, so the comparison is paired rather than independent.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{run_filter_tilde_p_cost, stream_truth_and_filter, SimConfig};
use crate::hjb::ValueSurface;
use crate::model::{DistressState, MarketConfig, SimplexPoint};
use crate::strategy::{value_terminal_utility, FeedbackStrategy, ScaledStrategy, Strategy};

// ============================================================================
// Sample statistics
// ============================================================================

/// Sample mean and standard error of a Monte Carlo batch.
///
/// The standard error is zero exactly when every sample is identical, which
/// happens for payoffs the model makes deterministic (for example an
/// all-cash strategy); stochastic payoffs give a strictly positive value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl McEstimate {
    /// Mean and standard error via pairwise summation, so the result does not
    /// depend on how a parallel run happened to batch the samples.
    pub fn from_samples(samples: &[f64]) -> Self {
        assert!(samples.len() >= 2, "need at least two samples");
        let n = samples.len() as f64;
        let mean = pairwise_sum(samples) / n;
        let mut sq = vec![0.0; samples.len()];
        for (d, &x) in sq.iter_mut().zip(samples) {
            let c = x - mean;
            *d = c * c;
        }
        let var = pairwise_sum(&sq) / (n - 1.0);
        Self {
            mean,
            stderr: (var / n).sqrt(),
        }
    }

    /// Standard error of the difference of two estimates treated as
    /// independent. Paired sampling makes this an overestimate, which is the
    /// conservative direction for every check in this module.
    pub fn combined_stderr(&self, other: &McEstimate) -> f64 {
        (self.stderr * self.stderr + other.stderr * other.stderr).sqrt()
    }
}

/// Summation over a balanced binary tree: error grows like `log n` instead of
/// `n`, and the result is a pure function of the slice ordering.
fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn require_batch(sim: &SimConfig, cfg: &MarketConfig) -> Result<()> {
    sim.validate(cfg)?;
    if sim.n_paths < 2 {
        return Err(Error::InvalidConfig(
            "Monte Carlo estimation needs at least two paths".into(),
        ));
    }
    Ok(())
}

// ============================================================================
// Objective estimators
// ============================================================================

/// Estimates the reduced objective `(v^gamma / gamma) E[exp(-gamma int eta)]`
/// by simulating the controlled filter from `(lam0, z0)` under the given
/// strategy. Paths stream through a running accumulator; nothing but one
/// number per path is retained.
pub fn estimate_objective_tilde_p(
    cfg: &MarketConfig,
    sim: &SimConfig,
    strategy: &dyn Strategy,
    lam0: &SimplexPoint,
    z0: DistressState,
) -> Result<McEstimate> {
    require_batch(sim, cfg)?;
    let utility_scale = cfg.initial_wealth.powf(cfg.gamma) / cfg.gamma;
    let samples: Vec<f64> = (0..sim.n_paths as u64)
        .into_par_iter()
        .map(|idx| {
            run_filter_tilde_p_cost(cfg, sim, strategy, lam0, z0, idx)
                .map(|cost| utility_scale * (-cfg.gamma * cost).exp())
        })
        .collect::<Result<_>>()?;
    Ok(McEstimate::from_samples(&samples))
}

/// Terminal utility of one physically simulated path: hidden truth, filter,
/// strategy on the filter, wealth compounded with the truth's coefficients
/// and the same Brownian increments that drove the observed prices. Truth
/// and filter stream through [`stream_truth_and_filter`] with the wealth
/// recursion folded over the steps.
fn physical_path_utility(
    cfg: &MarketConfig,
    sim: &SimConfig,
    strategy: &dyn Strategy,
    z0: DistressState,
    idx: u64,
) -> Result<f64> {
    let kk = cfg.n_regimes;
    let dt = sim.step();
    let mut pi = vec![0.0; cfg.n_stocks];
    let mut log_wealth = cfg.initial_wealth.ln();
    stream_truth_and_filter(cfg, sim, z0, idx, &mut |step| {
        let z = step.z;
        let x = step.regime;
        strategy.allocate(step.t, &step.probs[..kk - 1], z, &mut pi);
        let mut drift = cfg.rate;
        let mut noise = 0.0;
        for i in z.live() {
            let vol = cfg.vol_of(i, z);
            let excess = cfg.drift_of(i, x, z) + cfg.intensity_of(i, x, z) - cfg.rate;
            drift += pi[i] * excess - 0.5 * pi[i] * pi[i] * vol * vol;
            noise += pi[i] * vol * step.dw[i];
        }
        log_wealth += drift * dt + noise;
        if !log_wealth.is_finite() {
            return Err(Error::WealthNonPositive {
                path: idx,
                t: (step.index + 1) as f64 * dt,
            });
        }
        Ok(())
    })?;
    Ok((cfg.gamma * log_wealth).exp() / cfg.gamma)
}

/// Estimates expected terminal utility under the physical measure for a
/// strategy that reads the filter computed from its own observations.
///
/// `lam0` doubles as the prior of the hidden regime, so truth and filter
/// start consistent; `z0` marks stocks already distressed at time zero. The
/// wealth recursion is a log-Euler step of the self-financing dynamics, drift
/// `r + sum_i pi_i (b_i + h_i - r) - sum_i pi_i^2 vol_i^2 / 2` and noise
/// `sum_i pi_i vol_i dW_i`, with coefficients of the hidden regime frozen at
/// the left node, exactly like the price paths the filter saw.
pub fn simulate_wealth_physical(
    cfg: &MarketConfig,
    sim: &SimConfig,
    strategy: &dyn Strategy,
    lam0: &SimplexPoint,
    z0: DistressState,
) -> Result<McEstimate> {
    require_batch(sim, cfg)?;
    if lam0.dim() != cfg.n_regimes - 1 {
        return Err(Error::LengthMismatch {
            expected: cfg.n_regimes - 1,
            got: lam0.dim(),
            context: "initial filter point",
        });
    }
    let mut cfg = cfg.clone();
    cfg.initial_filter = lam0.clone();
    let samples: Vec<f64> = (0..sim.n_paths as u64)
        .into_par_iter()
        .map(|idx| physical_path_utility(&cfg, sim, strategy, z0, idx))
        .collect::<Result<_>>()?;
    Ok(McEstimate::from_samples(&samples))
}

// ============================================================================
// Discretization allowance
// ============================================================================

/// Estimates the first-order bias coefficient of the Euler estimators by
/// Richardson extrapolation: runs the reduced-objective estimator at `sim.dt`
/// and at `sim.dt / 2` with the same seed and path count, and reads the bias
/// at step `dt` as roughly twice the observed shift. Returned is the
/// coefficient `C` such that the allowance at step `dt` is `C * dt`.
///
/// The shift estimate carries sampling noise of its own; the verification
/// band adds three standard errors separately, so no safety factor is folded
/// in here.
pub fn calibrate_dt_allowance(
    cfg: &MarketConfig,
    sim: &SimConfig,
    strategy: &dyn Strategy,
    lam0: &SimplexPoint,
    z0: DistressState,
) -> Result<f64> {
    let coarse = estimate_objective_tilde_p(cfg, sim, strategy, lam0, z0)?;
    let half = SimConfig::new(sim.step() / 2.0, sim.horizon, sim.seed, sim.n_paths);
    let fine = estimate_objective_tilde_p(cfg, &half, strategy, lam0, z0)?;
    Ok(2.0 * (coarse.mean - fine.mean).abs() / sim.step())
}

// ============================================================================
// Verification report
// ============================================================================

/// Side-by-side comparison of the solved value with both Monte Carlo
/// estimators, including the tolerance verdicts.
#[derive(Clone, Debug)]
pub struct VerificationReport {
    pub pde_value: f64,
    pub mc_tilde_p: McEstimate,
    pub mc_physical: McEstimate,
    pub n_paths: usize,
    pub dt: f64,
    /// Absolute discretization allowance already scaled by `dt`.
    pub allowance: f64,
    pub tilde_p_pass: bool,
    pub physical_pass: bool,
}

impl VerificationReport {
    /// Applies the acceptance rule `|mc - pde| <= 3 stderr + allowance` to
    /// both estimators.
    pub fn assemble(
        pde_value: f64,
        mc_tilde_p: McEstimate,
        mc_physical: McEstimate,
        n_paths: usize,
        dt: f64,
        allowance: f64,
    ) -> Self {
        let within = |mc: &McEstimate| (mc.mean - pde_value).abs() <= 3.0 * mc.stderr + allowance;
        Self {
            pde_value,
            tilde_p_pass: within(&mc_tilde_p),
            physical_pass: within(&mc_physical),
            mc_tilde_p,
            mc_physical,
            n_paths,
            dt,
            allowance,
        }
    }

    pub fn pass(&self) -> bool {
        self.tilde_p_pass && self.physical_pass
    }

    /// One header line and one data row; floats in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        format!(
            "pde_value,mc_tilde_p_mean,mc_tilde_p_stderr,mc_physical_mean,\
             mc_physical_stderr,n_paths,dt,allowance,tilde_p_pass,physical_pass\n\
             {},{},{},{},{},{},{},{},{},{}\n",
            self.pde_value,
            self.mc_tilde_p.mean,
            self.mc_tilde_p.stderr,
            self.mc_physical.mean,
            self.mc_physical.stderr,
            self.n_paths,
            self.dt,
            self.allowance,
            self.tilde_p_pass,
            self.physical_pass,
        )
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let line = |name: &str, mc: &McEstimate, pass: bool| {
            format!(
                "  {name:<18} {:+.6} +- {:.6}  |diff| = {:.6}  [{}]",
                mc.mean,
                mc.stderr,
                (mc.mean - self.pde_value).abs(),
                if pass { "pass" } else { "FAIL" },
            )
        };
        writeln!(
            f,
            "verification vs solved value {:+.6} ({} paths, dt = {}, allowance = {:.6})",
            self.pde_value, self.n_paths, self.dt, self.allowance
        )?;
        writeln!(
            f,
            "{}",
            line("filter objective", &self.mc_tilde_p, self.tilde_p_pass)
        )?;
        write!(
            f,
            "{}",
            line("realized wealth", &self.mc_physical, self.physical_pass)
        )
    }
}

/// Runs both estimators for the feedback strategy read off `surfaces` and
/// compares them with the solved value at `(lam0, z0)`. `allowance_per_dt`
/// comes from [`calibrate_dt_allowance`] or from a stored calibration.
pub fn run_verification(
    cfg: &MarketConfig,
    sim: &SimConfig,
    surfaces: &BTreeMap<DistressState, ValueSurface>,
    lam0: &SimplexPoint,
    z0: DistressState,
    allowance_per_dt: f64,
) -> Result<VerificationReport> {
    let pde_value = value_terminal_utility(cfg, surfaces, lam0, z0)?;
    let strategy = FeedbackStrategy::new(cfg, surfaces);
    let mc_tilde_p = estimate_objective_tilde_p(cfg, sim, &strategy, lam0, z0)?;
    let mc_physical = simulate_wealth_physical(cfg, sim, &strategy, lam0, z0)?;
    Ok(VerificationReport::assemble(
        pde_value,
        mc_tilde_p,
        mc_physical,
        sim.n_paths,
        sim.step(),
        allowance_per_dt * sim.step(),
    ))
}

// ============================================================================
// Suboptimality audit
// ============================================================================

/// A competitor strategy for the audit: the feedback control scaled by a
/// constant, or a fixed allocation vector.
#[derive(Clone, Debug)]
pub enum Perturbation {
    Scaled(f64),
    Constant(Vec<f64>),
}

impl Perturbation {
    pub fn label(&self) -> String {
        match self {
            Perturbation::Scaled(c) => format!("scaled x{c}"),
            Perturbation::Constant(w) => format!("constant {w:?}"),
        }
    }
}

/// The default competitor set: the scale ladder around the feedback control
/// plus two fixed allocations of moderate leverage.
pub fn standard_perturbations() -> Vec<Perturbation> {
    vec![
        Perturbation::Scaled(0.0),
        Perturbation::Scaled(0.5),
        Perturbation::Scaled(0.8),
        Perturbation::Scaled(1.0),
        Perturbation::Scaled(1.2),
        Perturbation::Scaled(2.0),
        Perturbation::Constant(vec![1.0, 0.5]),
        Perturbation::Constant(vec![3.0, 1.5]),
    ]
}

/// One competitor's estimate and its verdict against the optimal strategy.
#[derive(Clone, Debug)]
pub struct AuditLine {
    pub label: String,
    pub estimate: McEstimate,
    /// `optimal mean - competitor mean`; negative means the competitor came
    /// out ahead in sample.
    pub shortfall: f64,
    /// Three combined standard errors; the verdict tolerates shortfalls no
    /// more negative than this.
    pub tolerance: f64,
    pub pass: bool,
}

/// Outcome of the audit: the optimal estimate and one line per competitor.
#[derive(Clone, Debug)]
pub struct AuditReport {
    pub optimal: McEstimate,
    pub lines: Vec<AuditLine>,
}

impl AuditReport {
    pub fn pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,mean,stderr,shortfall,tolerance,pass\n");
        out.push_str(&format!(
            "optimal,{},{},0,0,true\n",
            self.optimal.mean, self.optimal.stderr
        ));
        for l in &self.lines {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.label, l.estimate.mean, l.estimate.stderr, l.shortfall, l.tolerance, l.pass
            ));
        }
        out
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "suboptimality audit; optimal objective {:+.6} +- {:.6}",
            self.optimal.mean, self.optimal.stderr
        )?;
        for (i, l) in self.lines.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(
                f,
                "  {:<22} {:+.6} +- {:.6}  shortfall {:+.6}  [{}]",
                l.label,
                l.estimate.mean,
                l.estimate.stderr,
                l.shortfall,
                if l.pass { "pass" } else { "FAIL" },
            )?;
        }
        Ok(())
    }
}

/// Pits the feedback control read off `surfaces` against each perturbation,
/// all starting from the configured filter prior with every stock live.
///
/// Every competitor consumes the identical per-path noise (the simulator
/// draws a fixed number of variates per step), so differences in the
/// estimates are differences in the strategies, and a scale factor of one
/// reproduces the optimal estimate bit for bit.
pub fn suboptimality_audit(
    cfg: &MarketConfig,
    sim: &SimConfig,
    surfaces: &BTreeMap<DistressState, ValueSurface>,
    perturbations: &[Perturbation],
) -> Result<AuditReport> {
    for p in perturbations {
        if let Perturbation::Constant(w) = p {
            if w.len() != cfg.n_stocks {
                return Err(Error::LengthMismatch {
                    expected: cfg.n_stocks,
                    got: w.len(),
                    context: "constant perturbation weights",
                });
            }
        }
    }
    let lam0 = cfg.initial_filter.clone();
    let z0 = DistressState::all_live(cfg.n_stocks);
    let optimal_strategy = FeedbackStrategy::new(cfg, surfaces);
    let optimal = estimate_objective_tilde_p(cfg, sim, &optimal_strategy, &lam0, z0)?;

    let mut lines = Vec::with_capacity(perturbations.len());
    for p in perturbations {
        let estimate = match p {
            Perturbation::Scaled(c) => {
                let s = ScaledStrategy {
                    inner: &optimal_strategy,
                    factor: *c,
                };
                estimate_objective_tilde_p(cfg, sim, &s, &lam0, z0)?
            }
            Perturbation::Constant(w) => {
                let s = crate::strategy::ConstantStrategy { weights: w.clone() };
                estimate_objective_tilde_p(cfg, sim, &s, &lam0, z0)?
            }
        };
        let tolerance = 3.0 * optimal.combined_stderr(&estimate);
        let shortfall = optimal.mean - estimate.mean;
        lines.push(AuditLine {
            label: p.label(),
            estimate,
            shortfall,
            tolerance,
            pass: shortfall >= -tolerance,
        });
    }
    Ok(AuditReport { optimal, lines })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{run_filter, simulate_truth_path_from};
    use crate::hjb::{recursive_solve, Grid, SolveOptions};
    use crate::model::uniform_state_table;
    use crate::strategy::{Strategy, ZeroStrategy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn bench() -> MarketConfig {
        MarketConfig::benchmark()
    }

    /// Market with the benchmark's shape but moderate excess returns, so the
    /// optimal leverage stays in single digits and terminal utility has light
    /// enough tails for plain Monte Carlo averages to converge at a few
    /// thousand paths. Statistical tests run here; the aggressive benchmark
    /// is exercised by the acceptance suite at full path counts.
    pub(super) fn moderate() -> MarketConfig {
        let mut cfg = bench();
        cfg.drift = uniform_state_table(&[vec![0.25, 0.05], vec![0.20, 0.0]], 4);
        cfg.intensity = uniform_state_table(&[vec![0.25, 0.05], vec![0.20, 0.05]], 4);
        cfg.volatility = vec![vec![0.35; 4], vec![0.45; 4]];
        cfg.rate = 0.02;
        cfg.validate().unwrap();
        cfg
    }

    /// Moderate-market surfaces on a production-quality grid, solved once per
    /// test binary.
    fn solved_moderate() -> &'static BTreeMap<DistressState, ValueSurface> {
        static CELL: OnceLock<BTreeMap<DistressState, ValueSurface>> = OnceLock::new();
        CELL.get_or_init(|| {
            recursive_solve(&moderate(), &Grid::benchmark(), &SolveOptions::default()).unwrap()
        })
    }

    fn all_live() -> DistressState {
        DistressState::all_live(2)
    }

    fn all_distressed() -> DistressState {
        DistressState::all_distressed(2)
    }

    #[test]
    fn all_distressed_start_pays_the_money_market_exactly() {
        let mut cfg = bench();
        let lam0 = SimplexPoint::from_scalar(0.5).unwrap();
        let sim = SimConfig::new(5e-3, cfg.horizon, 99, 16);

        // No live stocks and no interest: the cost integrand vanishes and
        // every path pays initial utility exactly; the mean can differ from
        // it only by summation rounding.
        let est = estimate_objective_tilde_p(&cfg, &sim, &ZeroStrategy, &lam0, all_distressed())
            .unwrap();
        let base = 1.0 / cfg.gamma;
        assert!((est.mean - base).abs() <= 2.0 * f64::EPSILON * base);
        assert!(est.stderr <= 1e-14 * base);

        // With interest the integrand is the constant -r, again path
        // independent, and the payoff matches the all-distressed closed form
        // up to quadrature rounding (the per-path value is still identical
        // across paths, so the spread is pure summation noise).
        cfg.rate = 0.05;
        let est =
            estimate_objective_tilde_p(&cfg, &sim, &ZeroStrategy, &lam0, all_distressed()).unwrap();
        let expected = base * (cfg.gamma * cfg.rate * cfg.horizon).exp();
        assert!((est.mean - expected).abs() < 1e-12 * expected);
        assert!(est.stderr < 1e-13 * expected);

        // The terminal-state surface prices the same cash flow.
        let terminal = crate::hjb::solve_terminal_state(&cfg, &Grid::new(21, 31));
        let mut surfaces = BTreeMap::new();
        surfaces.insert(all_distressed(), terminal);
        let pde = value_terminal_utility(&cfg, &surfaces, &lam0, all_distressed()).unwrap();
        assert!((est.mean - pde).abs() < 1e-9);
    }

    #[test]
    fn zero_allocation_wealth_grows_at_the_risk_free_rate() {
        let mut cfg = bench();
        let lam0 = cfg.initial_filter.clone();
        let sim = SimConfig::new(5e-3, cfg.horizon, 5, 8);

        let est = simulate_wealth_physical(&cfg, &sim, &ZeroStrategy, &lam0, all_live()).unwrap();
        let base = 1.0 / cfg.gamma;
        assert!((est.mean - base).abs() <= 2.0 * f64::EPSILON * base);
        assert!(est.stderr <= 1e-14 * base);

        cfg.rate = 0.05;
        let est = simulate_wealth_physical(&cfg, &sim, &ZeroStrategy, &lam0, all_live()).unwrap();
        let expected = (cfg.gamma * cfg.rate * cfg.horizon).exp() / cfg.gamma;
        assert!((est.mean - expected).abs() < 1e-12 * expected);
        assert!(est.stderr < 1e-13 * expected);
    }

    /// The streaming implementation behind the physical estimator must equal
    /// the composed pipeline (truth path, then filter, then wealth fold)
    /// sample by sample, including across distress events.
    #[test]
    fn fused_physical_utility_matches_the_composed_pipeline() {
        let mcfg = moderate();
        let feedback = FeedbackStrategy::new(&mcfg, solved_moderate());
        let constant = crate::strategy::ConstantStrategy {
            weights: vec![0.9, 0.4],
        };
        let cases: Vec<(MarketConfig, &dyn Strategy)> =
            vec![(bench(), &constant), (mcfg.clone(), &feedback)];
        let sim = SimConfig::new(5e-3, 2.0, 331, 1);
        for (which, (cfg, strategy)) in cases.iter().enumerate() {
            for idx in 0..48u64 {
                let fused =
                    physical_path_utility(cfg, &sim, *strategy, all_live(), idx).unwrap();

                let path = simulate_truth_path_from(cfg, &sim, all_live(), idx);
                let filt = run_filter(cfg, &path).unwrap();
                let kk = cfg.n_regimes;
                let dt = path.step();
                let mut pi = vec![0.0; cfg.n_stocks];
                let mut log_wealth = cfg.initial_wealth.ln();
                for j in 0..path.n_steps() {
                    let z = path.state_at(j);
                    let x = path.regimes[j];
                    strategy.allocate(path.times[j], &filt.probs[j][..kk - 1], z, &mut pi);
                    let mut drift = cfg.rate;
                    let mut noise = 0.0;
                    for i in z.live() {
                        let vol = cfg.vol_of(i, z);
                        let excess =
                            cfg.drift_of(i, x, z) + cfg.intensity_of(i, x, z) - cfg.rate;
                        drift += pi[i] * excess - 0.5 * pi[i] * pi[i] * vol * vol;
                        noise += pi[i] * vol * path.dw[j][i];
                    }
                    log_wealth += drift * dt + noise;
                }
                let composed = (cfg.gamma * log_wealth).exp() / cfg.gamma;
                assert_eq!(fused, composed, "strategy {which}, path {idx}");
            }
        }
    }

    #[test]
    fn estimators_reject_malformed_batches() {
        let cfg = bench();
        let lam0 = cfg.initial_filter.clone();
        let tiny = SimConfig::new(0.05, cfg.horizon, 0, 1);
        assert!(matches!(
            estimate_objective_tilde_p(&cfg, &tiny, &ZeroStrategy, &lam0, all_live()),
            Err(Error::InvalidConfig(_))
        ));
        let bad_lam = SimplexPoint::new(vec![0.3, 0.3]).unwrap();
        let sim = SimConfig::new(0.05, cfg.horizon, 0, 4);
        assert!(matches!(
            simulate_wealth_physical(&cfg, &sim, &ZeroStrategy, &bad_lam, all_live()),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn feedback_value_matches_the_pde_from_both_estimators() {
        let cfg = moderate();
        let surfaces = solved_moderate();
        let lam0 = SimplexPoint::from_scalar(0.5).unwrap();
        let sim = SimConfig::new(5e-3, cfg.horizon, 2024, 6000);

        let strategy = FeedbackStrategy::new(&cfg, surfaces);
        let allowance_per_dt =
            calibrate_dt_allowance(&cfg, &sim, &strategy, &lam0, all_live()).unwrap();
        assert!(allowance_per_dt.is_finite() && allowance_per_dt >= 0.0);

        let report =
            run_verification(&cfg, &sim, surfaces, &lam0, all_live(), allowance_per_dt).unwrap();
        assert!(report.mc_tilde_p.stderr > 0.0);
        assert!(report.mc_physical.stderr > 0.0);
        assert!(
            report.pass(),
            "estimators disagree with the solved value: {report}"
        );

        // The two estimators also agree with each other.
        let gap = (report.mc_tilde_p.mean - report.mc_physical.mean).abs();
        let band = 3.0 * report.mc_tilde_p.combined_stderr(&report.mc_physical)
            + 2.0 * report.allowance;
        assert!(gap <= band, "estimator gap {gap} exceeds band {band}");
    }

    /// Draws a market around the moderate fixture with every coefficient
    /// jittered, bounded so the optimal leverage stays Monte Carlo friendly.
    fn random_market(rng: &mut ChaCha8Rng) -> MarketConfig {
        let mut cfg = moderate();
        let mut jitter = |x: f64, lo: f64, hi: f64| x * rng.random_range(lo..hi);
        for i in 0..2 {
            for k in 0..2 {
                let d = jitter(cfg.drift[i][k][0], 0.8, 1.2);
                let h = jitter(cfg.intensity[i][k][0], 0.8, 1.2);
                for z in 0..4 {
                    cfg.drift[i][k][z] = d;
                    cfg.intensity[i][k][z] = h;
                }
            }
            let v = jitter(cfg.volatility[i][0], 0.9, 1.15);
            for z in 0..4 {
                cfg.volatility[i][z] = v;
            }
        }
        cfg.rate = rng.random_range(0.0..0.05);
        cfg.gamma = rng.random_range(0.15..0.45);
        cfg.generator = crate::model::generator_from_rates(&[
            vec![0.0, rng.random_range(0.3..0.7)],
            vec![rng.random_range(0.25..0.6), 0.0],
        ]);
        cfg.initial_filter = SimplexPoint::from_scalar(rng.random_range(0.25..0.75)).unwrap();
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn random_market_draws_keep_the_two_estimators_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(90210);
        for draw in 0..3 {
            let cfg = random_market(&mut rng);
            let grid = Grid::new(151, 2251);
            let surfaces = recursive_solve(&cfg, &grid, &SolveOptions::default()).unwrap();
            let lam0 = cfg.initial_filter.clone();
            let sim = SimConfig::new(5e-3, cfg.horizon, 31 + draw, 4000);

            let strategy = FeedbackStrategy::new(&cfg, &surfaces);
            let allowance_per_dt =
                calibrate_dt_allowance(&cfg, &sim, &strategy, &lam0, all_live()).unwrap();
            let report =
                run_verification(&cfg, &sim, &surfaces, &lam0, all_live(), allowance_per_dt)
                    .unwrap();
            assert!(report.pass(), "draw {draw} failed: {report}");
        }
    }

    #[test]
    fn scaling_the_feedback_away_from_one_costs_utility() {
        let cfg = moderate();
        let surfaces = solved_moderate();
        let sim = SimConfig::new(5e-3, cfg.horizon, 11, 4000);

        let report = suboptimality_audit(&cfg, &sim, surfaces, &standard_perturbations()).unwrap();
        assert!(report.pass(), "{report}");

        let by_label =
            |label: &str| report.lines.iter().find(|l| l.label == label).unwrap();

        // Scale one is the identical strategy on identical noise.
        assert_eq!(by_label("scaled x1").estimate.mean, report.optimal.mean);

        // All cash pays the deterministic money-market payoff on every path,
        // and cannot beat the optimum.
        let cash = by_label("scaled x0");
        let money_market = (cfg.gamma * cfg.rate * cfg.horizon).exp() / cfg.gamma;
        assert!((cash.estimate.mean - money_market).abs() < 1e-12 * money_market);
        assert!(report.optimal.mean > cash.estimate.mean);

        // Doubling the control is detectably worse, not noise.
        let doubled = by_label("scaled x2");
        assert!(
            doubled.shortfall > doubled.tolerance,
            "doubling should lose clearly: {report}"
        );
    }

    #[test]
    fn audit_rejects_wrong_sized_constant_weights() {
        let cfg = moderate();
        let surfaces = solved_moderate();
        let sim = SimConfig::new(0.05, cfg.horizon, 1, 8);
        let bad = [Perturbation::Constant(vec![1.0])];
        assert!(matches!(
            suboptimality_audit(&cfg, &sim, surfaces, &bad),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn halving_dt_shrinks_the_monte_carlo_bias() {
        let cfg = moderate();
        let surfaces = solved_moderate();
        let lam0 = SimplexPoint::from_scalar(0.5).unwrap();
        let pde = value_terminal_utility(&cfg, surfaces, &lam0, all_live()).unwrap();
        let strategy = FeedbackStrategy::new(&cfg, surfaces);

        let run = |dt: f64, paths: usize| {
            let sim = SimConfig::new(dt, cfg.horizon, 4242, paths);
            let t = estimate_objective_tilde_p(&cfg, &sim, &strategy, &lam0, all_live()).unwrap();
            let p = simulate_wealth_physical(&cfg, &sim, &strategy, &lam0, all_live()).unwrap();
            (t, p)
        };
        let (t_coarse, p_coarse) = run(0.04, 20_000);
        let (t_fine, p_fine) = run(0.01, 20_000);

        // The fine-step bias may not exceed the coarse-step bias by more than
        // sampling noise, for either estimator.
        let slack_t = 3.0 * t_coarse.combined_stderr(&t_fine);
        assert!(
            (t_fine.mean - pde).abs() <= (t_coarse.mean - pde).abs() + slack_t,
            "filter-objective bias grew under refinement"
        );
        let slack_p = 3.0 * p_coarse.combined_stderr(&p_fine);
        assert!(
            (p_fine.mean - pde).abs() <= (p_coarse.mean - pde).abs() + slack_p,
            "realized-wealth bias grew under refinement"
        );
    }

    #[test]
    fn report_rendering_round_trips_the_numbers() {
        let report = VerificationReport::assemble(
            3.75,
            McEstimate {
                mean: 3.76,
                stderr: 0.02,
            },
            McEstimate {
                mean: 3.90,
                stderr: 0.01,
            },
            1000,
            0.001,
            0.005,
        );
        assert!(report.tilde_p_pass);
        assert!(!report.physical_pass);
        assert!(!report.pass());

        let csv = report.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        let row = lines.next().unwrap();
        assert_eq!(header.split(',').count(), row.split(',').count());
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[0].parse::<f64>().unwrap(), 3.75);
        assert_eq!(fields[5].parse::<usize>().unwrap(), 1000);
        assert_eq!(fields[8], "true");
        assert_eq!(fields[9], "false");

        let text = report.to_string();
        assert!(text.contains("pass") && text.contains("FAIL"));
    }

    #[test]
    fn sample_statistics_match_hand_values() {
        let est = McEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert!((est.mean - 2.5).abs() < 1e-15);
        let var = 5.0 / 3.0;
        assert!((est.stderr - (var / 4.0f64).sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn pairwise_summation_agrees_with_sequential(
            xs in proptest::collection::vec(-1e3f64..1e3, 2..200)
        ) {
            let naive: f64 = xs.iter().sum();
            let paired = pairwise_sum(&xs);
            prop_assert!((naive - paired).abs() <= 1e-9 * (1.0 + naive.abs()));
        }
    }
}

#[cfg(test)]
mod timing_probe {
    use super::*;
    use crate::hjb::{recursive_solve, Grid, SolveOptions};
    use crate::strategy::FeedbackStrategy;
    use std::time::Instant;

    #[test]
    #[ignore]
    fn probe() {
        let cfg = super::tests::moderate();
        let lam0 = SimplexPoint::from_scalar(0.5).unwrap();
        let z0 = DistressState::all_live(2);
        for (ns, nt) in [(201usize, 3000usize), (201, 12000), (801, 3000), (801, 12000)] {
            let t0 = Instant::now();
            let surfaces =
                recursive_solve(&cfg, &Grid::new(ns, nt), &SolveOptions::default()).unwrap();
            let pde = value_terminal_utility(&cfg, &surfaces, &lam0, z0).unwrap();
            let w0 = surfaces[&z0].value_at(0.0, 0.0);
            let w5 = surfaces[&z0].value_at(0.0, 0.5);
            let w1 = surfaces[&z0].value_at(0.0, 1.0);
            println!(
                "grid {}x{}: {:?}  pde {:.9}  w(0,0) {:.9}  w(0,.5) {:.9}  w(0,1) {:.9}",
                ns, nt, t0.elapsed(), pde, w0, w5, w1
            );
        }
        let surfaces =
            recursive_solve(&cfg, &Grid::benchmark(), &SolveOptions::default()).unwrap();
        let strategy = FeedbackStrategy::new(&cfg, &surfaces);
        for dt in [5e-3, 2.5e-3, 1.25e-3] {
            let sim = SimConfig::new(dt, cfg.horizon, 9, 20_000);
            let t0 = Instant::now();
            let est = estimate_objective_tilde_p(&cfg, &sim, &strategy, &lam0, z0).unwrap();
            println!(
                "tilde dt {:.2e}: {:?}  mean {:.6} se {:.6}",
                dt, t0.elapsed(), est.mean, est.stderr
            );
        }
    }

    #[test]
    #[ignore]
    fn bench_probe() {
        let cfg = MarketConfig::benchmark();
        let z0 = DistressState::all_live(2);
        let t0 = Instant::now();
        let surfaces =
            recursive_solve(&cfg, &Grid::benchmark(), &SolveOptions::default()).unwrap();
        println!("benchmark solve: {:?}", t0.elapsed());
        let t0 = Instant::now();
        let fine = recursive_solve(&cfg, &Grid::new(401, 12000), &SolveOptions::default()).unwrap();
        println!("fine solve: {:?}", t0.elapsed());
        let strategy = FeedbackStrategy::new(&cfg, &surfaces);
        for (k, lv) in [0.2f64, 0.5, 0.8].into_iter().enumerate() {
            let lam = SimplexPoint::from_scalar(lv).unwrap();
            let pde = value_terminal_utility(&cfg, &surfaces, &lam, z0).unwrap();
            let pde_f = value_terminal_utility(&cfg, &fine, &lam, z0).unwrap();
            let cal = SimConfig::new(2e-3, cfg.horizon, 100 + k as u64, 20_000);
            let t1 = Instant::now();
            let c = calibrate_dt_allowance(&cfg, &cal, &strategy, &lam, z0).unwrap();
            let cal_t = t1.elapsed();
            let sim = SimConfig::new(1e-3, cfg.horizon, 7 + k as u64, 100_000);
            let t1 = Instant::now();
            let report = run_verification(&cfg, &sim, &surfaces, &lam, z0, c).unwrap();
            println!(
                "lam {lv}: pde {pde:.6e} (fine {pde_f:.6e})  C {c:.4e}  cal {:?}  mc {:?}",
                cal_t,
                t1.elapsed()
            );
            println!("{report}");
        }
    }

    // Independent transcription of the stationary equation, evaluated on a
    // solved surface: every coefficient recomputed through the model layer,
    // never through the stepper's caches. A healthy solve leaves a residual
    // of size O(dt + dlam^2); a mis-assembled term leaves its full magnitude.
    #[test]
    #[ignore]
    fn residual() {
        let cfg = super::tests::moderate();
        let grid = Grid::new(801, 12000);
        let surfaces = recursive_solve(&cfg, &grid, &SolveOptions::default()).unwrap();
        let dlam = 1.0 / 800.0;
        let dt = cfg.horizon / 11999.0;

        for (zi, zbits) in [(0usize, [false, false]), (1, [true, false]), (2, [false, true])] {
            let z = DistressState::from_bits(&zbits);
            let surf = &surfaces[&z];
            let mut worst = 0.0f64;
            let mut worst_at = (0usize, 0usize);
            for &j in &[1000usize, 4000, 8000, 11000] {
                for m in (40..761).step_by(40) {
                    let lam = SimplexPoint::from_scalar(m as f64 * dlam).unwrap();
                    let w = |jj: usize, mm: usize| surf.values[jj][mm];
                    let wt = (w(j + 1, m) - w(j, m)) / dt;
                    // Spatial terms at the half level to cancel the O(dt)
                    // imbalance of the one-sided time difference.
                    let mid = |mm: usize| 0.5 * (w(j, mm) + w(j + 1, mm));
                    let g = (mid(m + 1) - mid(m - 1)) / (2.0 * dlam);
                    let d2 = (mid(m + 1) - 2.0 * mid(m) + mid(m - 1)) / (dlam * dlam);

                    let a = cfg.sigma_sigma_t(0.0, &lam, z)[0][0];
                    let sigma = cfg.sigma_matrix(0.0, &lam, z);
                    let az: f64 = z.live().map(|i| sigma[0][i] * sigma[0][i]).sum();
                    let (theta, rho) = cfg.theta_rho(0.0, &lam, z);
                    let pre = cfg.gamma / (2.0 * (1.0 - cfg.gamma));

                    let mut jumppart = 0.0;
                    for i in z.live() {
                        let h = cfg.tilde_intensity(0.0, &lam, i, z);
                        let rev = cfg.jump_revision(0.0, &lam, i, z).unwrap();
                        let child = &surfaces[&z.flip(i).unwrap()];
                        let t_mid = cfg.horizon * (j as f64 + 0.5) / 11999.0;
                        let wc = child.value_at(t_mid, rev.scalar());
                        jumppart += h * (wc - mid(m)).exp();
                    }

                    let resid = wt + 0.5 * a * d2 + 0.5 * a * g * g + pre * az * g * g
                        + theta[0] * g
                        + jumppart
                        + rho;
                    if resid.abs() > worst {
                        worst = resid.abs();
                        worst_at = (j, m);
                    }
                }
            }
            println!("state {zi}: worst residual {worst:.3e} at {worst_at:?}");
        }
    }
}
