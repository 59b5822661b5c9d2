//! Path simulation and nonlinear filtering.
//!
//! Two probability measures appear, and each gets its own simulator:
//!
//! - Under the physical measure the hidden chain, the log prices, and the
//!   distress events are simulated forward ([`simulate_truth`]); the filter
//!   ([`run_filter`]) then consumes only what an investor observes, namely
//!   price increments and distress events, and integrates the normalized
//!   filtering SDE. An independent discrete Bayes filter
//!   ([`hmm_oracle_filter`]) cross-checks it.
//!
//! - Under the verification measure (the exponential change of measure behind
//!   the risk-sensitive reduction, written P-tilde in the usual notation) the
//!   filter itself is the primitive state: it diffuses with a
//!   strategy-dependent drift and distress arrives with the filtered
//!   intensity ([`run_filter_tilde_p`]). This simulator also accumulates the
//!   running cost whose exponential average the Monte Carlo verification
//!   compares against the PDE value.
//!
//! Discretization conventions, shared by all simulators: uniform grid landing
//! exactly on the horizon, Euler steps with coefficients frozen at the left
//! endpoint, distress by accumulating the integrated intensity against unit
//! exponential thresholds drawn up front, at most one distress per step with
//! concurrent crossings ordered deterministically, and exactly `N` Gaussian
//! draws per step so that runs with different strategies consume identical
//! randomness (common random numbers). Every path draws from a counter-based
//! stream keyed by `(seed, path index)`, so path `i` is reproducible in
//! isolation and independent of scheduling.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DistressState, MarketConfig, SimplexPoint};
use crate::strategy::Strategy;

/// A filter coordinate may exceed [0, 1] by at most this much before the
/// integrator reports divergence (step size too large for the signal).
pub const FILTER_DIVERGENCE_TOL: f64 = 0.1;

/// Floor applied to filter coordinates before renormalization. The exact
/// filter never touches the simplex boundary, so the floor only absorbs
/// Euler overshoot.
const FILTER_FLOOR: f64 = 1e-12;

// ============================================================================
// Simulation configuration
// ============================================================================

/// Time discretization and sampling plan for a batch of simulated paths.
#[derive(Clone, Copy, Debug)]
pub struct SimConfig {
    /// Requested Euler step; the effective step is `horizon / n_steps` with
    /// `n_steps = round(horizon / dt)`, so the grid lands exactly on the
    /// horizon.
    pub dt: f64,
    /// Simulation horizon; at most the market horizon.
    pub horizon: f64,
    pub seed: u64,
    pub n_paths: usize,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, seed: u64, n_paths: usize) -> Self {
        Self {
            dt,
            horizon,
            seed,
            n_paths,
        }
    }

    /// Checks the step against the market's event rates. A step with
    /// `max intensity * dt >= 0.5` is legal but poorly resolved, so it only
    /// warns on stderr.
    pub fn validate(&self, cfg: &MarketConfig) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "simulation dt = {} must be positive",
                self.dt
            )));
        }
        if !(self.horizon > 0.0) || self.horizon > cfg.horizon + 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "simulation horizon {} outside (0, {}]",
                self.horizon, cfg.horizon
            )));
        }
        if self.dt > self.horizon {
            return Err(Error::InvalidConfig(format!(
                "dt = {} exceeds horizon {}",
                self.dt, self.horizon
            )));
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidConfig("n_paths must be positive".into()));
        }
        let max_h = cfg
            .intensity
            .iter()
            .flatten()
            .flatten()
            .fold(0.0f64, |a, &b| a.max(b));
        if max_h * self.dt >= 0.5 {
            eprintln!(
                "warning: max intensity * dt = {:.3} >= 0.5; distress events are poorly resolved",
                max_h * self.dt
            );
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }

    /// Effective uniform step.
    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps() as f64
    }

    fn time_grid(&self) -> Vec<f64> {
        let n = self.n_steps();
        let dt = self.step();
        (0..=n).map(|j| j as f64 * dt).collect()
    }
}

// ============================================================================
// Path containers
// ============================================================================

/// One simulated trajectory of the ground truth: hidden chain, Brownian
/// increments, log prices, and distress history.
#[derive(Clone, Debug)]
pub struct MarketPath {
    /// Uniform grid `t_0 = 0, ..., t_n = horizon`.
    pub times: Vec<f64>,
    /// Hidden regime index at each grid time (exact chain sampled at nodes).
    pub regimes: Vec<usize>,
    /// Brownian increments per step, `dw[j][i]` for step `j`, stock `i`.
    pub dw: Vec<Vec<f64>>,
    /// Log prices at each grid time, `log_prices[j][i]`.
    pub log_prices: Vec<Vec<f64>>,
    /// Distress mask at each grid time; nondecreasing, flips at most one bit
    /// per step.
    pub distress: Vec<u32>,
    /// Exact within-step crossing time of each stock's integrated intensity,
    /// or +inf for stocks that never distress.
    pub distress_times: Vec<f64>,
}

impl MarketPath {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn step(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn state_at(&self, level: usize) -> DistressState {
        DistressState::from_index(self.log_prices[0].len(), self.distress[level] as usize)
    }
}

/// One trajectory of regime probabilities, aligned with a distress history.
#[derive(Clone, Debug)]
pub struct FilterPath {
    pub times: Vec<f64>,
    /// Full probability vector (length K) at each grid time.
    pub probs: Vec<Vec<f64>>,
    pub distress: Vec<u32>,
}

impl FilterPath {
    pub fn state_at(&self, level: usize, n_stocks: usize) -> DistressState {
        DistressState::from_index(n_stocks, self.distress[level] as usize)
    }
}

// ============================================================================
// Ground-truth simulation (physical measure)
// ============================================================================

/// Selects which live stock, if any, enters distress this step.
///
/// `acc[i]` already includes this step's contribution `rate_i * dt`. A stock
/// crosses when its accumulated integral reaches its threshold; concurrent
/// crossings are ordered by crossing position within the step, then by
/// threshold overshoot, then by index, which makes collision handling
/// deterministic. Returns `(stock, fraction of the step at which it crossed)`.
fn select_distress(
    z: DistressState,
    acc: &[f64],
    thresholds: &[f64],
    step_rates: &[f64],
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for i in z.live() {
        if acc[i] >= thresholds[i] && step_rates[i] > 0.0 {
            let overshoot = acc[i] - thresholds[i];
            let frac = (1.0 - overshoot / step_rates[i]).clamp(0.0, 1.0);
            let better = match best {
                None => true,
                Some((_, bfrac, bover)) => {
                    frac < bfrac || (frac == bfrac && overshoot < bover)
                }
            };
            if better {
                best = Some((i, frac, overshoot));
            }
        }
    }
    best.map(|(i, frac, _)| (i, frac))
}

/// Draws an index from a probability vector by inversion of one uniform.
fn draw_from_prior(rng: &mut ChaCha8Rng, prior: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut drawn = prior.len() - 1;
    let mut cum = 0.0;
    for (k, &p) in prior.iter().enumerate() {
        cum += p;
        if u < cum {
            drawn = k;
            break;
        }
    }
    drawn
}

/// Exponential holding time of the hidden chain in `state`; +inf when the
/// state is absorbing, in which case no randomness is consumed.
fn chain_holding(cfg: &MarketConfig, rng: &mut ChaCha8Rng, state: usize) -> f64 {
    let rate = -cfg.generator[state][state];
    if rate > 0.0 {
        rng.sample::<f64, _>(Exp1) / rate
    } else {
        f64::INFINITY
    }
}

/// Jump target of the hidden chain out of `state`, drawn from the generator
/// row, consuming exactly one uniform.
fn chain_next_state(cfg: &MarketConfig, rng: &mut ChaCha8Rng, state: usize) -> usize {
    let kk = cfg.n_regimes;
    let rate = -cfg.generator[state][state];
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut target = if state == 0 { kk - 1 } else { 0 };
    for l in 0..kk {
        if l == state {
            continue;
        }
        cum += cfg.generator[state][l] / rate;
        if u < cum {
            target = l;
            break;
        }
    }
    target
}

/// Simulates one ground-truth path keyed by `(sim.seed, path_idx)`, with
/// every stock live at time zero. See [`simulate_truth_path_from`].
pub fn simulate_truth_path(cfg: &MarketConfig, sim: &SimConfig, path_idx: u64) -> MarketPath {
    simulate_truth_path_from(cfg, sim, DistressState::all_live(cfg.n_stocks), path_idx)
}

/// Simulates one ground-truth path keyed by `(sim.seed, path_idx)`, starting
/// from distress state `z0`.
///
/// The hidden chain is simulated with exact exponential holding times and
/// sampled at the grid nodes; log prices follow an Euler step with the
/// regime, distress state, and coefficients frozen at the left node; the
/// distress time of stock `i` is the first crossing of its integrated
/// intensity over an independent unit exponential, inverted linearly inside
/// the crossing step. The initial regime is drawn from the filter prior, so
/// filtering starts consistent by construction.
///
/// Stocks already distressed in `z0` keep trading (their prices still carry
/// regime information) and report a distress time of zero. The random draw
/// sequence does not depend on `z0`, so paths with different start states
/// share noise under the same `(seed, path_idx)`.
pub fn simulate_truth_path_from(
    cfg: &MarketConfig,
    sim: &SimConfig,
    z0: DistressState,
    path_idx: u64,
) -> MarketPath {
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    rng.set_stream(path_idx);

    let n = cfg.n_stocks;
    let n_steps = sim.n_steps();
    let dt = sim.step();
    let sqrt_dt = dt.sqrt();
    let times = sim.time_grid();

    // Unit exponential thresholds, one per stock, drawn up front.
    let thresholds: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();

    // Initial regime from the prior.
    let mut x = draw_from_prior(&mut rng, &cfg.initial_filter.full_probs());
    let mut t_jump = chain_holding(cfg, &mut rng, x);

    let mut regimes = vec![0usize; n_steps + 1];
    regimes[0] = x;
    let mut dw = vec![vec![0.0; n]; n_steps];
    let mut log_prices = vec![vec![0.0; n]; n_steps + 1];
    let mut distress = vec![z0.index() as u32; n_steps + 1];
    let mut distress_times: Vec<f64> = (0..n)
        .map(|i| if z0.is_distressed(i) { 0.0 } else { f64::INFINITY })
        .collect();

    let mut mask = z0;
    let mut acc = vec![0.0; n];
    let mut step_rates = vec![0.0; n];

    for j in 0..n_steps {
        let xj = regimes[j];
        let zj = mask;

        // Price step with left-frozen coefficients; distressed stocks keep
        // trading (their observations continue to carry regime information).
        for i in 0..n {
            let g: f64 = rng.sample(StandardNormal);
            dw[j][i] = sqrt_dt * g;
            log_prices[j + 1][i] =
                log_prices[j][i] + cfg.log_drift(i, xj, zj) * dt + cfg.vol_of(i, zj) * dw[j][i];
        }

        // Integrated intensity and crossing detection.
        for i in zj.live() {
            step_rates[i] = cfg.intensity_of(i, xj, zj) * dt;
            acc[i] += step_rates[i];
        }
        if let Some((i, frac)) = select_distress(zj, &acc, &thresholds, &step_rates) {
            distress_times[i] = times[j] + frac * dt;
            mask = mask.flip(i).expect("crossing stock is live");
        }
        distress[j + 1] = mask.index() as u32;

        // Advance the chain exactly across (t_j, t_{j+1}].
        while t_jump <= times[j + 1] {
            x = chain_next_state(cfg, &mut rng, x);
            t_jump += chain_holding(cfg, &mut rng, x);
        }
        regimes[j + 1] = x;
    }

    MarketPath {
        times,
        regimes,
        dw,
        log_prices,
        distress,
        distress_times,
    }
}

/// Simulates `sim.n_paths` independent ground-truth paths in parallel.
/// Results are identical to calling [`simulate_truth_path`] for indices
/// `0..n_paths` in order, whatever the thread schedule.
pub fn simulate_truth(cfg: &MarketConfig, sim: &SimConfig) -> Vec<MarketPath> {
    (0..sim.n_paths as u64)
        .into_par_iter()
        .map(|idx| simulate_truth_path(cfg, sim, idx))
        .collect()
}

// ============================================================================
// Observation-driven filter (physical measure)
// ============================================================================

/// Integrates the normalized filtering SDE along one observed path.
///
/// Per step, with all coefficients frozen at the left node: the mixing drift
/// from the chain generator, the no-distress information drift
/// `-p_k sum_{i live} (h_i(e_k) - tilde_h_i)`, and the innovation term
/// `p_k sum_i (mu_i(e_k) - tilde_mu_i) / vol_i^2 (dY_i - tilde_mu_i dt)`.
/// Each correction has zero p-weighted sum, so the total mass is conserved
/// exactly; renormalization only cleans up floating-point drift and the
/// boundary floor. At a distress of stock `i` the post-step vector (the left
/// limit at the event) is revised by Bayes' rule with the pre-event tables.
pub fn run_filter(cfg: &MarketConfig, path: &MarketPath) -> Result<FilterPath> {
    let n = cfg.n_stocks;
    let kk = cfg.n_regimes;
    let n_steps = path.n_steps();
    let dt = path.step();

    let mut probs = vec![vec![0.0; kk]; n_steps + 1];
    probs[0] = cfg.initial_filter.full_probs();

    let mut mu_hat = vec![0.0; n];
    let mut h_hat = vec![0.0; n];

    for j in 0..n_steps {
        let zj = path.state_at(j);
        let zi = zj.index();
        let (cur, rest) = probs.split_at_mut(j + 1);
        let p = &cur[j];
        let p_new = &mut rest[0];

        for i in 0..n {
            mu_hat[i] = cfg.tilde_log_drift_probs(i, zj, p);
            h_hat[i] = cfg.tilde_intensity_probs(i, zj, p);
        }

        for k in 0..kk {
            let mut mixing = 0.0;
            for l in 0..kk {
                mixing += cfg.generator[l][k] * p[l];
            }
            let mut survival = 0.0;
            for i in zj.live() {
                survival += cfg.intensity[i][k][zi] - h_hat[i];
            }
            let mut innovation = 0.0;
            for i in 0..n {
                let vol = cfg.vol_of(i, zj);
                let dy = path.log_prices[j + 1][i] - path.log_prices[j][i];
                innovation +=
                    (cfg.log_drift(i, k, zj) - mu_hat[i]) / (vol * vol) * (dy - mu_hat[i] * dt);
            }
            p_new[k] = p[k] + dt * mixing - dt * p[k] * survival + p[k] * innovation;
        }

        finish_filter_step(cfg, path.times[j + 1], zj, path.distress[j + 1], p_new)?;
    }

    Ok(FilterPath {
        times: path.times.clone(),
        probs,
        distress: path.distress.clone(),
    })
}

/// Divergence check, boundary floor, Bayes revision on a fresh distress, and
/// exact renormalization, shared by both filter integrators. `mask_next` is
/// the distress mask after the step; `z` the state before it.
fn finish_filter_step(
    cfg: &MarketConfig,
    t: f64,
    z: DistressState,
    mask_next: u32,
    p: &mut [f64],
) -> Result<()> {
    for (k, &v) in p.iter().enumerate() {
        if !v.is_finite() || v < -FILTER_DIVERGENCE_TOL || v > 1.0 + FILTER_DIVERGENCE_TOL {
            return Err(Error::FilterDiverged { t, k, value: v });
        }
    }
    for v in p.iter_mut() {
        *v = v.max(FILTER_FLOOR);
    }
    let fresh = mask_next & !(z.index() as u32);
    if fresh != 0 {
        let i = fresh.trailing_zeros() as usize;
        cfg.jump_revision_probs(i, z, p)?;
    }
    let sum: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

// ============================================================================
// Discrete Bayes oracle (physical measure)
// ============================================================================

/// Exact forward filter of the Euler-discretized model: predict with
/// `I + Q dt`, update with the Gaussian likelihood of each log-return and the
/// exact Bernoulli likelihood of per-step survival or distress, normalize.
///
/// This is a deliberately independent implementation: it never touches the
/// SDE coefficients, only the generative model of [`simulate_truth_path`],
/// and therefore cross-validates [`run_filter`] up to discretization error.
pub fn hmm_oracle_filter(cfg: &MarketConfig, path: &MarketPath) -> FilterPath {
    let n = cfg.n_stocks;
    let kk = cfg.n_regimes;
    let n_steps = path.n_steps();
    let dt = path.step();

    let mut probs = vec![vec![0.0; kk]; n_steps + 1];
    probs[0] = cfg.initial_filter.full_probs();

    for j in 0..n_steps {
        let zj = path.state_at(j);
        let zi = zj.index();
        let fresh = path.distress[j + 1] & !path.distress[j];

        let mut post = vec![0.0; kk];
        for k in 0..kk {
            for l in 0..kk {
                let trans = if l == k { 1.0 } else { 0.0 } + cfg.generator[l][k] * dt;
                post[k] += probs[j][l] * trans;
            }
        }

        for (k, w) in post.iter_mut().enumerate() {
            let mut log_like = 0.0;
            for i in 0..n {
                let vol = cfg.vol_of(i, zj);
                let dy = path.log_prices[j + 1][i] - path.log_prices[j][i];
                let resid = dy - cfg.log_drift(i, k, zj) * dt;
                // The 1/sqrt(2 pi vol^2 dt) factor is regime-independent and
                // cancels in the normalization.
                log_like -= resid * resid / (2.0 * vol * vol * dt);
            }
            for i in zj.live() {
                let h = cfg.intensity[i][k][zi];
                if fresh & (1 << i) != 0 {
                    log_like += (1.0 - (-h * dt).exp()).ln();
                } else {
                    log_like += -h * dt;
                }
            }
            *w *= log_like.exp();
        }

        let sum: f64 = post.iter().sum();
        for w in post.iter_mut() {
            *w /= sum;
        }
        probs[j + 1] = post;
    }

    FilterPath {
        times: path.times.clone(),
        probs,
        distress: path.distress.clone(),
    }
}

// ============================================================================
// Controlled filter under the verification measure
// ============================================================================

/// Simulates one path of the controlled filter under the verification
/// measure and accumulates the running cost integral whose exponential
/// average the Monte Carlo check needs. Keyed by `(sim.seed, path_idx)`.
///
/// The simulation starts from `(lam0, z0)`. Per step, with left
/// endpoints: the strategy is evaluated, the running cost
/// `eta(t, p, z, pi)` is accumulated by left-endpoint quadrature, the first
/// `K-1` coordinates take an Euler step with drift
/// `beta_mixing + gamma sigma Sigma^T pi - sum_{i live} tilde_h_i J_i`
/// (the last term compensates the jump revision between events) and diffusion
/// `sigma dW` with fresh Gaussian increments, and distress of stock `i`
/// arrives when its accumulated filtered intensity crosses a unit exponential
/// threshold, triggering the same Bayes revision as the physical filter.
///
/// Exactly `N` Gaussians are drawn per step whatever the strategy, so two
/// runs with the same `(seed, path_idx)` but different strategies see
/// identical noise; the suboptimality audit relies on this coupling.
pub fn run_filter_tilde_p_path(
    cfg: &MarketConfig,
    sim: &SimConfig,
    strategy: &dyn Strategy,
    lam0: &SimplexPoint,
    z0: DistressState,
    path_idx: u64,
) -> Result<(FilterPath, f64)> {
    if lam0.dim() != cfg.n_regimes - 1 {
        return Err(Error::LengthMismatch {
            expected: cfg.n_regimes - 1,
            got: lam0.dim(),
            context: "initial filter point",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    rng.set_stream(path_idx);

    let n = cfg.n_stocks;
    let kk = cfg.n_regimes;
    let n_steps = sim.n_steps();
    let dt = sim.step();
    let sqrt_dt = dt.sqrt();
    let times = sim.time_grid();

    let thresholds: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();

    let mut probs = vec![vec![0.0; kk]; n_steps + 1];
    probs[0] = lam0.full_probs();
    let mut distress = vec![0u32; n_steps + 1];
    distress[0] = z0.index() as u32;

    let mut z = z0;
    let mut acc_eta = 0.0;
    let mut acc = vec![0.0; n];
    let mut step_rates = vec![0.0; n];
    let mut pi = vec![0.0; n];
    let mut mu_hat = vec![0.0; n];
    let mut h_hat = vec![0.0; n];
    let mut dwbuf = vec![0.0; n];

    for j in 0..n_steps {
        let zi = z.index();
        let (cur, rest) = probs.split_at_mut(j + 1);
        let p = &cur[j];
        let p_new = &mut rest[0];

        strategy.allocate(times[j], &p[..kk - 1], z, &mut pi);
        for i in 0..n {
            if z.is_distressed(i) {
                pi[i] = 0.0;
            }
        }

        acc_eta += dt * cfg.eta_tilde_probs(z, &pi, p);

        for i in 0..n {
            mu_hat[i] = cfg.tilde_log_drift_probs(i, z, p);
            h_hat[i] = cfg.tilde_intensity_probs(i, z, p);
            let g: f64 = rng.sample(StandardNormal);
            dwbuf[i] = sqrt_dt * g;
        }

        for k in 0..kk - 1 {
            let mut mixing = 0.0;
            for l in 0..kk {
                mixing += cfg.generator[l][k] * p[l];
            }
            let mut control = 0.0;
            let mut noise = 0.0;
            for i in 0..n {
                let spread = cfg.log_drift(i, k, z) - mu_hat[i];
                control += spread * pi[i];
                noise += spread / cfg.vol_of(i, z) * dwbuf[i];
            }
            let mut survival = 0.0;
            for i in z.live() {
                survival += cfg.intensity[i][k][zi] - h_hat[i];
            }
            p_new[k] =
                p[k] + dt * (mixing + cfg.gamma * p[k] * control - p[k] * survival) + p[k] * noise;
        }
        p_new[kk - 1] = (1.0 - p_new[..kk - 1].iter().sum::<f64>()).max(0.0);

        // Distress arrival with the filtered intensity at the left endpoint.
        for i in z.live() {
            step_rates[i] = h_hat[i] * dt;
            acc[i] += step_rates[i];
        }
        let mut mask_next = z.index() as u32;
        if let Some((i, _)) = select_distress(z, &acc, &thresholds, &step_rates) {
            mask_next |= 1 << i;
        }

        finish_filter_step(cfg, times[j + 1], z, mask_next, p_new)?;
        distress[j + 1] = mask_next;
        z = DistressState::from_index(n, mask_next as usize);
    }

    Ok((
        FilterPath {
            times,
            probs,
            distress,
        },
        acc_eta,
    ))
}

/// Runs [`run_filter_tilde_p_path`] for indices `0..n_paths` in parallel,
/// preserving per-path determinism and output order.
pub fn run_filter_tilde_p(
    cfg: &MarketConfig,
    sim: &SimConfig,
    strategy: &dyn Strategy,
    lam0: &SimplexPoint,
    z0: DistressState,
) -> Result<Vec<(FilterPath, f64)>> {
    (0..sim.n_paths as u64)
        .into_par_iter()
        .map(|idx| run_filter_tilde_p_path(cfg, sim, strategy, lam0, z0, idx))
        .collect()
}

// ============================================================================
// Single-pass variants for Monte Carlo batches
// ============================================================================
//
// A verification batch folds one number out of each path; materializing the
// whole trajectory first costs thousands of allocations per path and
// dominates the runtime at the path counts the statistical checks need. The
// two drivers below run the same recursions as their composed counterparts
// in one pass with flat state. They must stay bit-identical to the composed
// versions (the tests compare them draw for draw), so every arithmetic
// expression mirrors its original, including evaluation order; the only
// liberties taken are in data layout.

/// Coefficient tables of one distress state, flattened to `k * n_stocks + i`.
/// Refreshing on a state change (at most `n_stocks` times per path) keeps the
/// per-step loops free of nested table walks; the entries are verbatim copies,
/// so sums over them reproduce the table-walking originals bit for bit.
struct StateTables {
    n: usize,
    kk: usize,
    rate: f64,
    gamma: f64,
    /// `b_i(e_k, z)`.
    drift: Vec<f64>,
    /// `h_i(e_k, z)`.
    intensity: Vec<f64>,
    /// `b + h - vol^2 / 2`.
    log_drift: Vec<f64>,
    /// `vol_i(z)`.
    vol: Vec<f64>,
    /// Transposed generator, `[k * kk + l] = Q_{l k}`.
    gen_t: Vec<f64>,
}

impl StateTables {
    fn new(cfg: &MarketConfig, z: DistressState) -> Self {
        let n = cfg.n_stocks;
        let kk = cfg.n_regimes;
        let mut gen_t = vec![0.0; kk * kk];
        for k in 0..kk {
            for l in 0..kk {
                gen_t[k * kk + l] = cfg.generator[l][k];
            }
        }
        let mut tables = Self {
            n,
            kk,
            rate: cfg.rate,
            gamma: cfg.gamma,
            drift: vec![0.0; kk * n],
            intensity: vec![0.0; kk * n],
            log_drift: vec![0.0; kk * n],
            vol: vec![0.0; n],
            gen_t,
        };
        tables.refresh(cfg, z);
        tables
    }

    fn refresh(&mut self, cfg: &MarketConfig, z: DistressState) {
        for i in 0..self.n {
            self.vol[i] = cfg.vol_of(i, z);
            for k in 0..self.kk {
                self.drift[k * self.n + i] = cfg.drift_of(i, k, z);
                self.intensity[k * self.n + i] = cfg.intensity_of(i, k, z);
                self.log_drift[k * self.n + i] = cfg.log_drift(i, k, z);
            }
        }
    }

    #[inline]
    fn tilde_drift(&self, i: usize, p: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.kk {
            s += p[k] * self.drift[k * self.n + i];
        }
        s
    }

    #[inline]
    fn tilde_intensity(&self, i: usize, p: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.kk {
            s += p[k] * self.intensity[k * self.n + i];
        }
        s
    }

    #[inline]
    fn tilde_log_drift(&self, i: usize, p: &[f64]) -> f64 {
        let vol = self.vol[i];
        self.tilde_drift(i, p) + self.tilde_intensity(i, p) - 0.5 * vol * vol
    }

    #[inline]
    fn eta_tilde(&self, pi: &[f64], p: &[f64]) -> f64 {
        let mut s = -self.rate;
        for i in 0..self.n {
            let vol = self.vol[i];
            s += pi[i] * (self.rate - self.tilde_drift(i, p) - self.tilde_intensity(i, p));
            s += 0.5 * (1.0 - self.gamma) * pi[i] * pi[i] * vol * vol;
        }
        s
    }
}

/// Everything a per-step observer needs at the left node of step `index`,
/// before the state advances: the time, the distress state, the hidden
/// regime, the filter vector (full length `K`), and the Brownian increments
/// the prices are about to consume.
pub struct StreamStep<'a> {
    pub index: usize,
    pub t: f64,
    pub z: DistressState,
    pub regime: usize,
    pub probs: &'a [f64],
    pub dw: &'a [f64],
}

/// Simulates one ground-truth path and integrates the observation filter
/// along it in a single pass, calling `visit` once per step with the
/// left-node state. The trajectory is exactly the one
/// [`simulate_truth_path_from`] followed by [`run_filter`] would produce,
/// noise draw for noise draw and bit for bit, with neither path
/// materialized; a wealth functional folds over the visits instead.
pub fn stream_truth_and_filter(
    cfg: &MarketConfig,
    sim: &SimConfig,
    z0: DistressState,
    path_idx: u64,
    visit: &mut dyn FnMut(&StreamStep<'_>) -> Result<()>,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    rng.set_stream(path_idx);

    let n = cfg.n_stocks;
    let kk = cfg.n_regimes;
    let n_steps = sim.n_steps();
    let dt = sim.step();
    let sqrt_dt = dt.sqrt();

    let thresholds: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let mut x = draw_from_prior(&mut rng, &cfg.initial_filter.full_probs());
    let mut t_jump = chain_holding(cfg, &mut rng, x);

    let mut z = z0;
    let mut tab = StateTables::new(cfg, z);

    let mut p = cfg.initial_filter.full_probs();
    let mut p_new = vec![0.0; kk];
    let mut lp = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut mu_hat = vec![0.0; n];
    let mut h_hat = vec![0.0; n];
    let mut acc = vec![0.0; n];
    let mut step_rates = vec![0.0; n];

    for j in 0..n_steps {
        let t = j as f64 * dt;
        let t_next = (j + 1) as f64 * dt;

        // Truth price step with left-frozen coefficients; the filter's
        // observed increment is the same floating-point difference of log
        // prices the composed pipeline computes.
        for i in 0..n {
            let g: f64 = rng.sample(StandardNormal);
            dw[i] = sqrt_dt * g;
            let next = lp[i] + tab.log_drift[x * n + i] * dt + tab.vol[i] * dw[i];
            dy[i] = next - lp[i];
            lp[i] = next;
        }

        visit(&StreamStep {
            index: j,
            t,
            z,
            regime: x,
            probs: &p,
            dw: &dw,
        })?;

        // Distress crossing against the truth intensities.
        for i in z.live() {
            step_rates[i] = tab.intensity[x * n + i] * dt;
            acc[i] += step_rates[i];
        }
        let mut mask_next = z.index() as u32;
        if let Some((i, _)) = select_distress(z, &acc, &thresholds, &step_rates) {
            mask_next |= 1 << i;
        }

        // Filter Euler step, frozen at the left node.
        for i in 0..n {
            mu_hat[i] = tab.tilde_log_drift(i, &p);
            h_hat[i] = tab.tilde_intensity(i, &p);
        }
        for k in 0..kk {
            let mut mixing = 0.0;
            for l in 0..kk {
                mixing += tab.gen_t[k * kk + l] * p[l];
            }
            let mut survival = 0.0;
            for i in z.live() {
                survival += tab.intensity[k * n + i] - h_hat[i];
            }
            let mut innovation = 0.0;
            for i in 0..n {
                let vol = tab.vol[i];
                innovation +=
                    (tab.log_drift[k * n + i] - mu_hat[i]) / (vol * vol) * (dy[i] - mu_hat[i] * dt);
            }
            p_new[k] = p[k] + dt * mixing - dt * p[k] * survival + p[k] * innovation;
        }
        finish_filter_step(cfg, t_next, z, mask_next, &mut p_new)?;
        std::mem::swap(&mut p, &mut p_new);

        // Advance the chain exactly across (t_j, t_{j+1}].
        while t_jump <= t_next {
            x = chain_next_state(cfg, &mut rng, x);
            t_jump += chain_holding(cfg, &mut rng, x);
        }

        if mask_next != z.index() as u32 {
            z = DistressState::from_index(n, mask_next as usize);
            tab.refresh(cfg, z);
        }
    }
    Ok(())
}

/// Single-pass twin of [`run_filter_tilde_p_path`]: same draws, same
/// recursion, bit-identical accumulated cost, no trajectory kept.
pub fn run_filter_tilde_p_cost(
    cfg: &MarketConfig,
    sim: &SimConfig,
    strategy: &dyn Strategy,
    lam0: &SimplexPoint,
    z0: DistressState,
    path_idx: u64,
) -> Result<f64> {
    if lam0.dim() != cfg.n_regimes - 1 {
        return Err(Error::LengthMismatch {
            expected: cfg.n_regimes - 1,
            got: lam0.dim(),
            context: "initial filter point",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    rng.set_stream(path_idx);

    let n = cfg.n_stocks;
    let kk = cfg.n_regimes;
    let n_steps = sim.n_steps();
    let dt = sim.step();
    let sqrt_dt = dt.sqrt();

    let thresholds: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();

    let mut z = z0;
    let mut tab = StateTables::new(cfg, z);
    let mut p = lam0.full_probs();
    let mut p_new = vec![0.0; kk];
    let mut acc_eta = 0.0;
    let mut acc = vec![0.0; n];
    let mut step_rates = vec![0.0; n];
    let mut pi = vec![0.0; n];
    let mut mu_hat = vec![0.0; n];
    let mut h_hat = vec![0.0; n];
    let mut dwbuf = vec![0.0; n];

    for j in 0..n_steps {
        let t = j as f64 * dt;

        strategy.allocate(t, &p[..kk - 1], z, &mut pi);
        for i in 0..n {
            if z.is_distressed(i) {
                pi[i] = 0.0;
            }
        }

        acc_eta += dt * tab.eta_tilde(&pi, &p);

        for i in 0..n {
            mu_hat[i] = tab.tilde_log_drift(i, &p);
            h_hat[i] = tab.tilde_intensity(i, &p);
            let g: f64 = rng.sample(StandardNormal);
            dwbuf[i] = sqrt_dt * g;
        }

        for k in 0..kk - 1 {
            let mut mixing = 0.0;
            for l in 0..kk {
                mixing += tab.gen_t[k * kk + l] * p[l];
            }
            let mut control = 0.0;
            let mut noise = 0.0;
            for i in 0..n {
                let spread = tab.log_drift[k * n + i] - mu_hat[i];
                control += spread * pi[i];
                noise += spread / tab.vol[i] * dwbuf[i];
            }
            let mut survival = 0.0;
            for i in z.live() {
                survival += tab.intensity[k * n + i] - h_hat[i];
            }
            p_new[k] =
                p[k] + dt * (mixing + cfg.gamma * p[k] * control - p[k] * survival) + p[k] * noise;
        }
        p_new[kk - 1] = (1.0 - p_new[..kk - 1].iter().sum::<f64>()).max(0.0);

        for i in z.live() {
            step_rates[i] = h_hat[i] * dt;
            acc[i] += step_rates[i];
        }
        let mut mask_next = z.index() as u32;
        if let Some((i, _)) = select_distress(z, &acc, &thresholds, &step_rates) {
            mask_next |= 1 << i;
        }

        finish_filter_step(cfg, (j + 1) as f64 * dt, z, mask_next, &mut p_new)?;
        std::mem::swap(&mut p, &mut p_new);
        if mask_next != z.index() as u32 {
            z = DistressState::from_index(n, mask_next as usize);
            tab.refresh(cfg, z);
        }
    }
    Ok(acc_eta)
}
