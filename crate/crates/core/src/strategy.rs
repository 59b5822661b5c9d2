//! Trading strategies as feedback functions of the filter state.
//!
//! A strategy maps `(t, lambda, z)` to the fractions of wealth held in each
//! stock; the remainder sits in the money market account. The optimal
//! feedback strategy reads the gradient of a solved value surface; the simple
//! strategies here exist for simulation tests and for the suboptimality
//! audit, which perturbs the optimal control and checks the value drops.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hjb::ValueSurface;
use crate::model::{DistressState, MarketConfig, SimplexPoint};

/// A feedback allocation rule.
///
/// Implementations must be pure functions of the arguments so that paths can
/// be evaluated concurrently. Entries for distressed stocks must be zero; the
/// simulators force them to zero regardless, so a violation cannot leak into
/// wealth dynamics.
pub trait Strategy: Sync {
    /// Writes the allocation into `out`, one entry per stock.
    /// `lambda` holds the first `K-1` coordinates of the filter state.
    fn allocate(&self, t: f64, lambda: &[f64], z: DistressState, out: &mut [f64]);
}

/// Invests everything in the money market account.
pub struct ZeroStrategy;

impl Strategy for ZeroStrategy {
    fn allocate(&self, _t: f64, _lambda: &[f64], _z: DistressState, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Fixed weights regardless of the filter state, masked by distress.
pub struct ConstantStrategy {
    pub weights: Vec<f64>,
}

impl Strategy for ConstantStrategy {
    fn allocate(&self, _t: f64, _lambda: &[f64], z: DistressState, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = if z.is_distressed(i) { 0.0 } else { self.weights[i] };
        }
    }
}

/// Another strategy scaled by a constant factor. A factor of 1 reproduces the
/// inner strategy; any other factor is suboptimal when the inner strategy is
/// optimal, which is what the audit exploits.
pub struct ScaledStrategy<'a> {
    pub inner: &'a dyn Strategy,
    pub factor: f64,
}

impl Strategy for ScaledStrategy<'_> {
    fn allocate(&self, t: f64, lambda: &[f64], z: DistressState, out: &mut [f64]) {
        self.inner.allocate(t, lambda, z, out);
        for o in out.iter_mut() {
            *o *= self.factor;
        }
    }
}

// ============================================================================
// Optimal feedback control
// ============================================================================

/// The candidate optimal allocation read off a family of solved value
/// surfaces, one surface per distress state. For a live stock `i`,
///
/// ```text
///     pi_i = [ grad_w . (sigma Sigma^T)_i  -  Gamma_i ] / ((1-gamma) vol_i^2)
/// ```
///
/// where `sigma` is the filter volatility, `Gamma_i` the filtered excess
/// return shortfall, and `vol_i` the stock volatility; distressed entries are
/// zero. The gradient tracks the surface's own interpolation rule exactly, so
/// the control is piecewise constant in `lambda` between grid nodes.
pub fn feedback(
    cfg: &MarketConfig,
    surfaces: &BTreeMap<DistressState, ValueSurface>,
    t: f64,
    lam: &SimplexPoint,
    z: DistressState,
) -> Result<Vec<f64>> {
    if cfg.n_regimes != 2 {
        return Err(Error::UnsupportedDimension(format!(
            "feedback control supports 2 regimes, got {}",
            cfg.n_regimes
        )));
    }
    let surface = surfaces
        .get(&z)
        .ok_or_else(|| Error::MissingChild(z.to_string()))?;
    let g = surface.grad_lambda_at(t, lam.scalar());
    let mut pi = vec![0.0; cfg.n_stocks];
    feedback_into(cfg, g, lam.scalar(), z, &mut pi);
    Ok(pi)
}

/// Allocation-free core of [`feedback`] for two regimes: the filtered
/// coefficients collapse to closed forms in the scalar filter coordinate, so
/// the per-stock weight needs no scratch buffers. Simulation loops call this
/// millions of times per path batch.
fn feedback_into(cfg: &MarketConfig, g: f64, lam_scalar: f64, z: DistressState, out: &mut [f64]) {
    let p0 = lam_scalar;
    let p1 = 1.0 - lam_scalar;
    out.fill(0.0);
    for i in z.live() {
        let vol = cfg.vol_of(i, z);
        let mu0 = cfg.drift_of(i, 0, z) + cfg.intensity_of(i, 0, z);
        let mu1 = cfg.drift_of(i, 1, z) + cfg.intensity_of(i, 1, z);
        let tilde = p0 * mu0 + p1 * mu1;
        let sigma_i = p0 * (mu0 - tilde) / vol;
        let gamma_i = cfg.rate - tilde;
        out[i] = (g * vol * sigma_i - gamma_i) / ((1.0 - cfg.gamma) * vol * vol);
    }
}

/// [`feedback`] packaged as a [`Strategy`], with the per-state surface
/// lookups resolved once at construction.
///
/// Lookup failures panic: a simulation driven by a state with no solved
/// surface is a wiring bug, not a data condition.
pub struct FeedbackStrategy<'a> {
    cfg: &'a MarketConfig,
    by_state: Vec<Option<&'a ValueSurface>>,
}

impl<'a> FeedbackStrategy<'a> {
    /// Caches one surface reference per distress state index. States absent
    /// from `surfaces` are tolerated until a simulation actually visits one.
    pub fn new(cfg: &'a MarketConfig, surfaces: &'a BTreeMap<DistressState, ValueSurface>) -> Self {
        assert_eq!(cfg.n_regimes, 2, "feedback control supports 2 regimes");
        let by_state = (0..cfg.n_states())
            .map(|zi| surfaces.get(&DistressState::from_index(cfg.n_stocks, zi)))
            .collect();
        Self { cfg, by_state }
    }
}

impl Strategy for FeedbackStrategy<'_> {
    fn allocate(&self, t: f64, lambda: &[f64], z: DistressState, out: &mut [f64]) {
        let surface = self.by_state[z.index()].expect("solved surface for state");
        let g = surface.grad_lambda_at(t, lambda[0]);
        feedback_into(self.cfg, g, lambda[0], z, out);
    }
}

/// The control Hamiltonian at one point and its optimized value:
///
/// ```text
///     Phi(pi) = grad_w . beta(pi) - gamma eta(pi)
/// ```
///
/// with `beta(pi)` the control-tilted filter drift and `eta` the running
/// cost of the exponential criterion. The first component evaluates the
/// supplied allocation (distressed entries ignored), the second evaluates
/// the feedback maximizer, so `phi <= phi_star` up to rounding for every
/// allocation and equality holds exactly at the feedback control.
pub fn phi_and_phistar(
    cfg: &MarketConfig,
    grad_w: f64,
    _t: f64,
    lam: &SimplexPoint,
    z: DistressState,
    pi: &[f64],
) -> Result<(f64, f64)> {
    if cfg.n_regimes != 2 {
        return Err(Error::UnsupportedDimension(format!(
            "hamiltonian audit supports 2 regimes, got {}",
            cfg.n_regimes
        )));
    }
    if pi.len() != cfg.n_stocks {
        return Err(Error::LengthMismatch {
            expected: cfg.n_stocks,
            got: pi.len(),
            context: "allocation vector",
        });
    }
    let probs = lam.full_probs();
    let mut sigma = vec![0.0; cfg.n_stocks];
    cfg.sigma_into(z, &probs, &mut sigma);
    let mut gamma_v = vec![0.0; cfg.n_stocks];
    cfg.gamma_into(z, &probs, &mut gamma_v);
    let mut beta = vec![0.0; lam.dim()];
    cfg.beta_varpi_into(&probs, &mut beta);

    let eval = |pi_masked: &[f64]| -> f64 {
        let tilt: f64 = z
            .live()
            .map(|i| sigma[i] * cfg.vol_of(i, z) * pi_masked[i])
            .sum();
        let drift = beta[0] + cfg.gamma * tilt;
        grad_w * drift - cfg.gamma * cfg.eta_tilde_probs(z, pi_masked, &probs)
    };

    let mut masked = pi.to_vec();
    for (i, m) in masked.iter_mut().enumerate() {
        if z.is_distressed(i) {
            *m = 0.0;
        }
    }
    let phi = eval(&masked);

    let mut best = vec![0.0; cfg.n_stocks];
    for i in z.live() {
        let vol = cfg.vol_of(i, z);
        best[i] = (grad_w * vol * sigma[i] - gamma_v[i]) / ((1.0 - cfg.gamma) * vol * vol);
    }
    let phi_star = eval(&best);
    Ok((phi, phi_star))
}

/// The certainty-equivalent readout of a solved system at time zero:
/// expected terminal utility `v^gamma / gamma * exp(w(0, lambda, z))` for
/// initial wealth `v` from the configuration.
pub fn value_terminal_utility(
    cfg: &MarketConfig,
    surfaces: &BTreeMap<DistressState, ValueSurface>,
    lam: &SimplexPoint,
    z: DistressState,
) -> Result<f64> {
    let surface = surfaces
        .get(&z)
        .ok_or_else(|| Error::MissingChild(z.to_string()))?;
    let v = cfg.initial_wealth;
    Ok(v.powf(cfg.gamma) / cfg.gamma * surface.value_at(0.0, lam.scalar()).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjb::{recursive_solve, solve_terminal_state, Grid, SolveOptions};
    use crate::model::{uniform_state_table, uniform_vol_table};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bench() -> MarketConfig {
        MarketConfig::benchmark()
    }

    fn solved(cfg: &MarketConfig) -> BTreeMap<DistressState, ValueSurface> {
        recursive_solve(cfg, &Grid::new(101, 601), &SolveOptions::default()).unwrap()
    }

    fn z(bits: &[bool]) -> DistressState {
        DistressState::from_bits(bits)
    }

    #[test]
    fn constant_strategy_masks_distressed_entries() {
        let s = ConstantStrategy {
            weights: vec![0.5, 0.8],
        };
        let mut out = vec![0.0; 2];
        s.allocate(0.0, &[0.5], z(&[false, true]), &mut out);
        assert_eq!(out, vec![0.5, 0.0]);
        let scaled = ScaledStrategy {
            inner: &s,
            factor: 2.0,
        };
        scaled.allocate(0.0, &[0.5], z(&[false, true]), &mut out);
        assert_eq!(out, vec![1.0, 0.0]);
        ZeroStrategy.allocate(0.0, &[0.5], z(&[false, false]), &mut out);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn feedback_at_known_regime_is_the_merton_ratio() {
        // At lambda = 0 the filter volatility vanishes, so the hedging term
        // drops and the allocation is the myopic ratio -Gamma_i / ((1-gamma)
        // vol_i^2) with regime-2 coefficients, independent of the surfaces:
        // stock 1: (0.5 + 0.1) / (0.7 * 0.16), stock 2: (0.4 + 0.1) / (0.7 *
        // 0.36).
        let cfg = bench();
        let surfaces = solved(&cfg);
        let lam = SimplexPoint::from_scalar(0.0).unwrap();
        let pi = feedback(&cfg, &surfaces, 0.0, &lam, DistressState::all_live(2)).unwrap();
        assert!((pi[0] - 5.357142857142857).abs() < 1e-12, "pi_1 = {}", pi[0]);
        assert!((pi[1] - 1.984126984126984).abs() < 1e-12, "pi_2 = {}", pi[1]);

        // Same at lambda = 1 with regime-1 coefficients.
        let lam = SimplexPoint::from_scalar(1.0).unwrap();
        let pi = feedback(&cfg, &surfaces, 0.0, &lam, DistressState::all_live(2)).unwrap();
        assert!((pi[0] - 2.0 / (0.7 * 0.16)).abs() < 1e-12);
        assert!((pi[1] - 2.2 / (0.7 * 0.36)).abs() < 1e-12);
    }

    #[test]
    fn feedback_masks_and_reports_missing_surfaces() {
        let cfg = bench();
        let surfaces = solved(&cfg);
        let lam = SimplexPoint::from_scalar(0.0).unwrap();

        let pi = feedback(&cfg, &surfaces, 1.0, &lam, z(&[false, true])).unwrap();
        assert!((pi[0] - 5.357142857142857).abs() < 1e-12);
        assert_eq!(pi[1], 0.0);

        let all = DistressState::all_distressed(2);
        let pi = feedback(&cfg, &surfaces, 1.0, &lam, all).unwrap();
        assert!(pi.iter().all(|&x| x == 0.0));

        let empty = BTreeMap::new();
        assert!(matches!(
            feedback(&cfg, &empty, 0.0, &lam, all),
            Err(Error::MissingChild(_))
        ));
    }

    #[test]
    fn feedback_strategy_wraps_the_free_function() {
        let cfg = bench();
        let surfaces = solved(&cfg);
        let strat = FeedbackStrategy::new(&cfg, &surfaces);
        let lam = SimplexPoint::from_scalar(0.37).unwrap();
        let zz = DistressState::all_live(2);
        let mut out = vec![0.0; 2];
        strat.allocate(1.25, &[0.37], zz, &mut out);
        let direct = feedback(&cfg, &surfaces, 1.25, &lam, zz).unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn exchangeable_stocks_get_exchangeable_allocations() {
        let mut cfg = bench();
        cfg.drift = uniform_state_table(&[vec![1.0, 0.5], vec![1.0, 0.5]], 4);
        cfg.volatility = uniform_vol_table(&[0.4, 0.4], 4);
        cfg.validate().unwrap();
        let surfaces = solved(&cfg);
        for &lam_v in &[0.1, 0.5, 0.9] {
            let lam = SimplexPoint::from_scalar(lam_v).unwrap();
            let a = feedback(&cfg, &surfaces, 0.5, &lam, z(&[false, true])).unwrap();
            let b = feedback(&cfg, &surfaces, 0.5, &lam, z(&[true, false])).unwrap();
            assert!((a[0] - b[1]).abs() < 1e-12);
            assert_eq!(a[1], 0.0);
            assert_eq!(b[0], 0.0);
        }
    }

    #[test]
    fn hamiltonian_peaks_at_the_feedback_control() {
        let cfg = bench();
        let surfaces = solved(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let states = [
            DistressState::all_live(2),
            z(&[false, true]),
            z(&[true, false]),
        ];
        for _ in 0..1000 {
            let zz = states[rng.random_range(0..states.len())];
            let t: f64 = rng.random_range(0.0..3.0);
            let lam_v: f64 = rng.random_range(0.0..1.0);
            let lam = SimplexPoint::from_scalar(lam_v).unwrap();
            let g = surfaces[&zz].grad_lambda_at(t, lam_v);
            let pi_opt = feedback(&cfg, &surfaces, t, &lam, zz).unwrap();

            let (phi_at_opt, phi_star) =
                phi_and_phistar(&cfg, g, t, &lam, zz, &pi_opt).unwrap();
            assert!((phi_at_opt - phi_star).abs() < 1e-12);

            let random_pi: Vec<f64> =
                (0..2).map(|_| rng.random_range(-10.0..10.0)).collect();
            let (phi, phi_star) = phi_and_phistar(&cfg, g, t, &lam, zz, &random_pi).unwrap();
            assert!(
                phi <= phi_star + 1e-10,
                "phi {phi} exceeds phi_star {phi_star}"
            );
        }
    }

    #[test]
    fn hamiltonian_with_no_live_stock_is_the_mixing_drift_term() {
        // Every control term vanishes, leaving grad_w beta_varpi (the rate
        // term is zero in the benchmark).
        let cfg = bench();
        let lam = SimplexPoint::from_scalar(0.3).unwrap();
        let all = DistressState::all_distressed(2);
        let (phi, phi_star) =
            phi_and_phistar(&cfg, 0.7, 1.0, &lam, all, &[3.0, -4.0]).unwrap();
        // beta_varpi at 0.3: -0.5 * 0.3 + 0.4 * 0.7 = 0.13.
        assert!((phi_star - 0.7 * 0.13).abs() < 1e-12);
        assert!((phi - phi_star).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_rejects_malformed_input() {
        let cfg = bench();
        let lam = SimplexPoint::from_scalar(0.3).unwrap();
        assert!(matches!(
            phi_and_phistar(&cfg, 0.0, 0.0, &lam, DistressState::all_live(2), &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn terminal_utility_readout() {
        // All stocks distressed: w(0) = gamma r T exactly, so the readout is
        // v^gamma / gamma times exp(gamma r T).
        let grid = Grid::new(11, 7);
        let lam = SimplexPoint::from_scalar(0.42).unwrap();
        let all = DistressState::all_distressed(2);

        let cfg = bench();
        let mut surfaces = BTreeMap::new();
        surfaces.insert(all, solve_terminal_state(&cfg, &grid));
        let v = value_terminal_utility(&cfg, &surfaces, &lam, all).unwrap();
        assert!((v - 1.0 / 0.3).abs() < 1e-12);

        let mut cfg = bench();
        cfg.rate = 0.05;
        cfg.initial_wealth = 2.0;
        let mut surfaces = BTreeMap::new();
        surfaces.insert(all, solve_terminal_state(&cfg, &grid));
        let v = value_terminal_utility(&cfg, &surfaces, &lam, all).unwrap();
        let expected = 2.0f64.powf(0.3) / 0.3 * (0.045f64).exp();
        assert!((v - expected).abs() < 1e-12);

        assert!(matches!(
            value_terminal_utility(&cfg, &BTreeMap::new(), &lam, all),
            Err(Error::MissingChild(_))
        ));
    }
}
