//! Market model primitives.
//!
//! The market consists of a money market account paying rate `r` and `N` stocks
//! whose drifts and distress intensities are modulated by a hidden `K`-state
//! Markov chain and by the vector of distress indicators `z`:
//!
//! ```text
//!     dP_i/P_i = (b_i(X, z) + h_i(X, z)) dt + vol_i(z) dW_i      while stock i is live
//!     log-price drift   mu_i(e_k, z) = b_i(e_k, z) + h_i(e_k, z) - vol_i(z)^2 / 2
//! ```
//!
//! Stock `i` enters distress at the first time the integrated intensity
//! `h_i(X(t), H(t))` crosses an independent unit exponential. Every coefficient
//! used by the filter, the PDE solver, and the strategy is a function of the
//! conditional regime probabilities, obtained by linear interpolation over the
//! regimes ("tilde" quantities). This module owns those functions; everything
//! downstream evaluates them through [`MarketConfig`].
//!
//! Conventions:
//! - Stocks and regimes are indexed from 0.
//! - A distress state is a bitmask; bit `i` set means stock `i` is distressed.
//! - A filter point is the first `K-1` coordinates of a probability vector;
//!   the last coordinate is recovered as one minus their sum.
//! - Coefficient tables are constant in time, but operations keep a time
//!   argument so time-dependent tables can be added without breaking callers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for simplex membership checks and generator row sums.
pub const SIMPLEX_TOL: f64 = 1e-9;

// ============================================================================
// Distress state
// ============================================================================

/// Which stocks are in distress, packed as a bitmask (bit i = stock i).
///
/// The mask doubles as the index into per-state coefficient tables, so the
/// state written `(z_1, z_2) = (0, 1)` has index `0b10 = 2`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct DistressState {
    n_stocks: u8,
    mask: u32,
}

impl DistressState {
    pub fn all_live(n_stocks: usize) -> Self {
        assert!(n_stocks >= 1 && n_stocks <= 32, "n_stocks must be in 1..=32");
        Self {
            n_stocks: n_stocks as u8,
            mask: 0,
        }
    }

    pub fn all_distressed(n_stocks: usize) -> Self {
        let live = Self::all_live(n_stocks);
        Self {
            mask: (1u64 << n_stocks) as u32 - 1,
            ..live
        }
    }

    /// Builds a state from explicit indicator bits, `bits[i]` = stock i distressed.
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut s = Self::all_live(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                s.mask |= 1 << i;
            }
        }
        s
    }

    /// Builds a state from a table index. Panics if the mask has bits beyond
    /// `n_stocks`.
    pub fn from_index(n_stocks: usize, index: usize) -> Self {
        assert!(
            index < (1usize << n_stocks),
            "state index {index} out of range for {n_stocks} stocks"
        );
        let mut s = Self::all_live(n_stocks);
        s.mask = index as u32;
        s
    }

    pub fn n_stocks(&self) -> usize {
        self.n_stocks as usize
    }

    pub fn is_distressed(&self, i: usize) -> bool {
        debug_assert!(i < self.n_stocks());
        self.mask & (1 << i) != 0
    }

    /// Number of distressed stocks.
    pub fn popcount(&self) -> u32 {
        self.mask.count_ones()
    }

    /// Index into per-state coefficient tables.
    pub fn index(&self) -> usize {
        self.mask as usize
    }

    /// The state with stock `i` additionally distressed. Only a live stock can
    /// flip.
    pub fn flip(&self, i: usize) -> Result<Self> {
        if i >= self.n_stocks() {
            return Err(Error::IndexOutOfRange(format!(
                "stock {i} of {}",
                self.n_stocks()
            )));
        }
        if self.is_distressed(i) {
            return Err(Error::AlreadyDistressed(i));
        }
        Ok(Self {
            n_stocks: self.n_stocks,
            mask: self.mask | (1 << i),
        })
    }

    /// Indices of live stocks, in increasing order.
    pub fn live(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_stocks()).filter(move |&i| !self.is_distressed(i))
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.n_stocks()).map(|i| self.is_distressed(i)).collect()
    }
}

impl std::fmt::Display for DistressState {
    /// Prints indicator bits in stock order, e.g. `(0,1)` prints as "01".
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in 0..self.n_stocks() {
            write!(f, "{}", if self.is_distressed(i) { '1' } else { '0' })?;
        }
        Ok(())
    }
}

// ============================================================================
// Simplex point
// ============================================================================

/// A point of the closed probability simplex, stored as the first `K-1`
/// coordinates. The PDE grid includes the boundary, so membership is checked
/// against the closure rather than the interior.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SimplexPoint {
    coords: Vec<f64>,
}

impl SimplexPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        let mut sum = 0.0;
        for &c in &coords {
            if !c.is_finite() || c < -SIMPLEX_TOL || c > 1.0 + SIMPLEX_TOL {
                return Err(Error::InvalidConfig(format!(
                    "simplex coordinate {c} outside [0, 1]"
                )));
            }
            sum += c;
        }
        if sum > 1.0 + SIMPLEX_TOL {
            return Err(Error::InvalidConfig(format!(
                "simplex coordinates sum to {sum} > 1"
            )));
        }
        let coords = coords.into_iter().map(|c| c.clamp(0.0, 1.0)).collect();
        Ok(Self { coords })
    }

    /// Convenience for the two-regime case.
    pub fn from_scalar(x: f64) -> Result<Self> {
        Self::new(vec![x])
    }

    /// Dimension of the simplex, i.e. `K - 1`.
    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// The single coordinate of a two-regime point.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.coords.len(), 1, "scalar() requires K = 2");
        self.coords[0]
    }

    /// Full probability vector of length `K`; the last entry absorbs rounding.
    pub fn full_probs(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.coords.len() + 1);
        p.extend_from_slice(&self.coords);
        p.push((1.0 - self.coords.iter().sum::<f64>()).max(0.0));
        p
    }

    pub fn is_interior(&self) -> bool {
        let sum: f64 = self.coords.iter().sum();
        self.coords.iter().all(|&c| c > 0.0 && c < 1.0) && sum < 1.0
    }
}

// ============================================================================
// Market configuration
// ============================================================================

/// All model primitives. Immutable after construction; every operation on it
/// is a pure function, so concurrent reads are unrestricted.
///
/// Table layout: `drift[i][k][z]` is the drift of stock `i` in regime `k` when
/// the distress state has index `z` (see [`DistressState::index`]); likewise
/// for `intensity`. `volatility[i][z]` may depend on the distress state but
/// not on the regime, which is what keeps the chain hidden.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarketConfig {
    pub n_stocks: usize,
    pub n_regimes: usize,
    /// Risk-free rate r >= 0, per unit time.
    pub rate: f64,
    /// Risk-aversion exponent of the power utility, strictly between 0 and 1.
    pub gamma: f64,
    /// Investment horizon T > 0 in years.
    pub horizon: f64,
    /// Standard generator of the hidden chain: off-diagonal entries are
    /// nonnegative jump rates, each row sums to zero.
    pub generator: Vec<Vec<f64>>,
    pub drift: Vec<Vec<Vec<f64>>>,
    pub intensity: Vec<Vec<Vec<f64>>>,
    pub volatility: Vec<Vec<f64>>,
    pub initial_filter: SimplexPoint,
    pub initial_wealth: f64,
}

/// Builds a standard generator from a table of physical jump rates:
/// `rates[l][k]` is the rate of jumping from regime `l` to regime `k`
/// (diagonal entries are ignored). The diagonal is set so each row sums to 0.
pub fn generator_from_rates(rates: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = rates.len();
    let mut gen = vec![vec![0.0; k]; k];
    for l in 0..k {
        let mut row_sum = 0.0;
        for j in 0..k {
            if j != l {
                gen[l][j] = rates[l][j];
                row_sum += rates[l][j];
            }
        }
        gen[l][l] = -row_sum;
    }
    gen
}

/// Expands a per-stock, per-regime table that does not depend on the distress
/// state into the full `[i][k][z]` layout.
pub fn uniform_state_table(per_stock_regime: &[Vec<f64>], n_states: usize) -> Vec<Vec<Vec<f64>>> {
    per_stock_regime
        .iter()
        .map(|row| row.iter().map(|&v| vec![v; n_states]).collect())
        .collect()
}

/// Expands per-stock volatilities that do not depend on the distress state.
pub fn uniform_vol_table(per_stock: &[f64], n_states: usize) -> Vec<Vec<f64>> {
    per_stock.iter().map(|&v| vec![v; n_states]).collect()
}

impl MarketConfig {
    /// The two-stock, two-regime setup used throughout the numerical study:
    /// drifts (1.0, 0.5) and (1.2, 0.4), distress intensities (1.0, 0.1) for
    /// both stocks, volatilities 0.4 and 0.6, gamma 0.3, r = 0, T = 3, jump
    /// rates 0.5 (regime 1 to 2) and 0.4 (regime 2 to 1).
    pub fn benchmark() -> Self {
        let cfg = Self {
            n_stocks: 2,
            n_regimes: 2,
            rate: 0.0,
            gamma: 0.3,
            horizon: 3.0,
            generator: generator_from_rates(&[vec![0.0, 0.5], vec![0.4, 0.0]]),
            drift: uniform_state_table(&[vec![1.0, 0.5], vec![1.2, 0.4]], 4),
            intensity: uniform_state_table(&[vec![1.0, 0.1], vec![1.0, 0.1]], 4),
            volatility: uniform_vol_table(&[0.4, 0.6], 4),
            initial_filter: SimplexPoint::from_scalar(0.5).unwrap(),
            initial_wealth: 1.0,
        };
        cfg.validate().expect("benchmark config is valid");
        cfg
    }

    /// Checks every structural invariant. Call once after building a config;
    /// the coefficient functions assume a validated instance.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_stocks;
        let k = self.n_regimes;
        if n == 0 || n > 20 {
            return Err(Error::InvalidConfig(format!(
                "n_stocks = {n} outside supported range 1..=20"
            )));
        }
        if k < 2 {
            return Err(Error::InvalidConfig("n_regimes must be at least 2".into()));
        }
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("rate = {} < 0", self.rate)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma = {} outside (0, 1)",
                self.gamma
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "horizon = {} must be positive",
                self.horizon
            )));
        }
        if !(self.initial_wealth > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "initial_wealth = {} must be positive",
                self.initial_wealth
            )));
        }
        if self.generator.len() != k || self.generator.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidConfig(format!("generator must be {k}x{k}")));
        }
        for (l, row) in self.generator.iter().enumerate() {
            let mut sum = 0.0;
            for (j, &q) in row.iter().enumerate() {
                if j != l && q < 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "generator[{l}][{j}] = {q} < 0"
                    )));
                }
                sum += q;
            }
            if sum.abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!(
                    "generator row {l} sums to {sum}, expected 0"
                )));
            }
        }
        let n_states = 1usize << n;
        let table_shape_ok = |t: &Vec<Vec<Vec<f64>>>| {
            t.len() == n && t.iter().all(|s| s.len() == k && s.iter().all(|r| r.len() == n_states))
        };
        if !table_shape_ok(&self.drift) {
            return Err(Error::InvalidConfig(format!(
                "drift table must be {n} x {k} x {n_states}"
            )));
        }
        if !table_shape_ok(&self.intensity) {
            return Err(Error::InvalidConfig(format!(
                "intensity table must be {n} x {k} x {n_states}"
            )));
        }
        if self.intensity.iter().flatten().flatten().any(|&h| !(h > 0.0)) {
            return Err(Error::InvalidConfig(
                "every intensity entry must be strictly positive".into(),
            ));
        }
        if self.volatility.len() != n || self.volatility.iter().any(|r| r.len() != n_states) {
            return Err(Error::InvalidConfig(format!(
                "volatility table must be {n} x {n_states}"
            )));
        }
        if self.volatility.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidConfig(
                "every volatility entry must be strictly positive".into(),
            ));
        }
        if self.initial_filter.dim() != k - 1 {
            return Err(Error::LengthMismatch {
                expected: k - 1,
                got: self.initial_filter.dim(),
                context: "initial_filter",
            });
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        1usize << self.n_stocks
    }

    // ------------------------------------------------------------------
    // Table accessors
    // ------------------------------------------------------------------

    pub fn drift_of(&self, i: usize, k: usize, z: DistressState) -> f64 {
        self.drift[i][k][z.index()]
    }

    pub fn intensity_of(&self, i: usize, k: usize, z: DistressState) -> f64 {
        self.intensity[i][k][z.index()]
    }

    pub fn vol_of(&self, i: usize, z: DistressState) -> f64 {
        self.volatility[i][z.index()]
    }

    /// Log-price drift `mu_i(e_k, z) = b + h - vol^2 / 2`.
    ///
    /// # Panics
    /// Panics if an index is out of range.
    pub fn log_drift(&self, i: usize, k: usize, z: DistressState) -> f64 {
        let vol = self.vol_of(i, z);
        self.drift_of(i, k, z) + self.intensity_of(i, k, z) - 0.5 * vol * vol
    }

    // ------------------------------------------------------------------
    // Regime-interpolated ("tilde") coefficients
    // ------------------------------------------------------------------

    /// Expected drift of stock `i` under the probability vector `probs`.
    pub fn tilde_drift_probs(&self, i: usize, z: DistressState, probs: &[f64]) -> f64 {
        let table = &self.drift[i];
        let zi = z.index();
        probs.iter().zip(table).map(|(&p, row)| p * row[zi]).sum()
    }

    /// Expected distress intensity of stock `i` under `probs`. Strictly
    /// positive because every table entry is.
    pub fn tilde_intensity_probs(&self, i: usize, z: DistressState, probs: &[f64]) -> f64 {
        let table = &self.intensity[i];
        let zi = z.index();
        probs.iter().zip(table).map(|(&p, row)| p * row[zi]).sum()
    }

    /// Expected log-price drift of stock `i` under `probs`.
    pub fn tilde_log_drift_probs(&self, i: usize, z: DistressState, probs: &[f64]) -> f64 {
        let vol = self.vol_of(i, z);
        self.tilde_drift_probs(i, z, probs) + self.tilde_intensity_probs(i, z, probs)
            - 0.5 * vol * vol
    }

    pub fn tilde_drift(&self, _t: f64, lam: &SimplexPoint, i: usize, z: DistressState) -> f64 {
        self.tilde_drift_probs(i, z, &lam.full_probs())
    }

    pub fn tilde_intensity(&self, _t: f64, lam: &SimplexPoint, i: usize, z: DistressState) -> f64 {
        self.tilde_intensity_probs(i, z, &lam.full_probs())
    }

    // ------------------------------------------------------------------
    // Filter-state diffusion coefficients
    // ------------------------------------------------------------------

    /// Diffusion matrix of the filter, `(K-1) x N`, written row-major into
    /// `out`. Entry `(k, i)` is `lam_k (mu_i(e_k, z) - tilde_mu_i) / vol_i`.
    pub fn sigma_into(&self, z: DistressState, probs: &[f64], out: &mut [f64]) {
        let n = self.n_stocks;
        let kk = self.n_regimes;
        debug_assert_eq!(out.len(), (kk - 1) * n);
        for i in 0..n {
            let vol = self.vol_of(i, z);
            let zi = z.index();
            let table = &self.drift[i];
            let htable = &self.intensity[i];
            let mut tilde_mu = -0.5 * vol * vol;
            for k in 0..kk {
                tilde_mu += probs[k] * (table[k][zi] + htable[k][zi]);
            }
            for k in 0..kk - 1 {
                let mu_ki = table[k][zi] + htable[k][zi] - 0.5 * vol * vol;
                out[k * n + i] = probs[k] * (mu_ki - tilde_mu) / vol;
            }
        }
    }

    /// Diffusion matrix of the filter as nested rows.
    pub fn sigma_matrix(&self, _t: f64, lam: &SimplexPoint, z: DistressState) -> Vec<Vec<f64>> {
        let n = self.n_stocks;
        let kk = self.n_regimes;
        let mut flat = vec![0.0; (kk - 1) * n];
        self.sigma_into(z, &lam.full_probs(), &mut flat);
        flat.chunks(n).map(|c| c.to_vec()).collect()
    }

    /// `sigma sigma^T`, the `(K-1) x (K-1)` diffusion of the filter state.
    pub fn sigma_sigma_t(&self, t: f64, lam: &SimplexPoint, z: DistressState) -> Vec<Vec<f64>> {
        let sigma = self.sigma_matrix(t, lam, z);
        let d = self.n_regimes - 1;
        let mut out = vec![vec![0.0; d]; d];
        for a in 0..d {
            for b in 0..d {
                out[a][b] = sigma[a]
                    .iter()
                    .zip(&sigma[b])
                    .map(|(&x, &y)| x * y)
                    .sum();
            }
        }
        out
    }

    /// Market-price-of-risk style vector: `Gamma_i = r - tilde_b_i - tilde_h_i`.
    pub fn gamma_into(&self, z: DistressState, probs: &[f64], out: &mut [f64]) {
        for i in 0..self.n_stocks {
            out[i] = self.rate
                - self.tilde_drift_probs(i, z, probs)
                - self.tilde_intensity_probs(i, z, probs);
        }
    }

    pub fn gamma_vec(&self, _t: f64, lam: &SimplexPoint, z: DistressState) -> Vec<f64> {
        let mut out = vec![0.0; self.n_stocks];
        self.gamma_into(z, &lam.full_probs(), &mut out);
        out
    }

    /// Mixing drift of the filter: component `k` is `sum_l generator[l][k] p_l`.
    pub fn beta_varpi_into(&self, probs: &[f64], out: &mut [f64]) {
        let kk = self.n_regimes;
        for k in 0..kk - 1 {
            let mut s = 0.0;
            for l in 0..kk {
                s += self.generator[l][k] * probs[l];
            }
            out[k] = s;
        }
    }

    pub fn beta_varpi(&self, _t: f64, lam: &SimplexPoint) -> Vec<f64> {
        let mut out = vec![0.0; self.n_regimes - 1];
        self.beta_varpi_into(&lam.full_probs(), &mut out);
        out
    }

    /// Drift and potential of the reduced HJB equation:
    ///
    /// ```text
    ///     theta_k = beta_varpi_k - gamma/(1-gamma) (sigma_z Sigma^{-1} Gamma)_k
    ///               - lam_k sum_{i live} (h_i(e_k) - tilde_h_i)
    ///     rho     = gamma r - sum_{i live} tilde_h_i
    ///               + gamma/(2(1-gamma)) sum_{i live} Gamma_i^2 / vol_i^2
    /// ```
    ///
    /// where `sigma_z` masks the columns of distressed stocks. The equation's
    /// exponential coupling books the distress-time Bayes revisions at full
    /// size, so the advection must be the filter's between-event drift, which
    /// subtracts the revision mean `lam_k (h_i(e_k) - tilde_h_i)` per live
    /// stock; dropping that term leaves a value function inflated toward the
    /// high-intensity regime, which the Monte Carlo verification rejects.
    /// With all stocks distressed the pair collapses to `(beta_varpi,
    /// gamma r)` exactly, and the compensation vanishes at both simplex
    /// vertices where the filter is certain.
    pub fn theta_rho(&self, _t: f64, lam: &SimplexPoint, z: DistressState) -> (Vec<f64>, f64) {
        let probs = lam.full_probs();
        let n = self.n_stocks;
        let kk = self.n_regimes;
        let g = self.gamma;
        let pre = g / (1.0 - g);
        let zi = z.index();

        let mut gamma_v = vec![0.0; n];
        self.gamma_into(z, &probs, &mut gamma_v);
        let mut sigma = vec![0.0; (kk - 1) * n];
        self.sigma_into(z, &probs, &mut sigma);

        let mut theta = vec![0.0; kk - 1];
        self.beta_varpi_into(&probs, &mut theta);
        for k in 0..kk - 1 {
            let mut v = 0.0;
            let mut revision_mean = 0.0;
            for i in z.live() {
                v += sigma[k * n + i] * gamma_v[i] / self.vol_of(i, z);
                revision_mean += self.intensity[i][k][zi] - self.tilde_intensity_probs(i, z, &probs);
            }
            theta[k] -= pre * v + probs[k] * revision_mean;
        }

        let mut rho = g * self.rate;
        for i in z.live() {
            let vol = self.vol_of(i, z);
            rho -= self.tilde_intensity_probs(i, z, &probs);
            rho += 0.5 * pre * gamma_v[i] * gamma_v[i] / (vol * vol);
        }
        (theta, rho)
    }

    // ------------------------------------------------------------------
    // Jump revision of the filter at a distress event
    // ------------------------------------------------------------------

    /// Applies the Bayesian revision of the full probability vector at a
    /// distress of stock `i`: `p_k <- p_k h_i(e_k, z) / tilde_h_i`. The result
    /// sums to one by construction. Fails if stock `i` is already distressed.
    pub fn jump_revision_probs(
        &self,
        i: usize,
        z: DistressState,
        probs: &mut [f64],
    ) -> Result<()> {
        if i >= self.n_stocks {
            return Err(Error::IndexOutOfRange(format!("stock {i}")));
        }
        if z.is_distressed(i) {
            return Err(Error::AlreadyDistressed(i));
        }
        let htilde = self.tilde_intensity_probs(i, z, probs);
        let zi = z.index();
        for (k, p) in probs.iter_mut().enumerate() {
            *p *= self.intensity[i][k][zi] / htilde;
        }
        Ok(())
    }

    /// Jump revision expressed on simplex coordinates.
    pub fn jump_revision(
        &self,
        _t: f64,
        lam: &SimplexPoint,
        i: usize,
        z: DistressState,
    ) -> Result<SimplexPoint> {
        let mut probs = lam.full_probs();
        self.jump_revision_probs(i, z, &mut probs)?;
        probs.pop();
        SimplexPoint::new(probs)
    }

    // ------------------------------------------------------------------
    // Running reward of the risk-sensitive problem
    // ------------------------------------------------------------------

    /// Per-regime running cost of the exponential criterion:
    ///
    /// ```text
    ///     eta(e_k) = -r + sum_i pi_i (r - b_i(e_k,z) - h_i(e_k,z))
    ///                + (1-gamma)/2 sum_i pi_i^2 vol_i^2
    /// ```
    pub fn eta(&self, _t: f64, k: usize, z: DistressState, pi: &[f64]) -> f64 {
        let mut s = -self.rate;
        for i in 0..self.n_stocks {
            let vol = self.vol_of(i, z);
            s += pi[i] * (self.rate - self.drift_of(i, k, z) - self.intensity_of(i, k, z));
            s += 0.5 * (1.0 - self.gamma) * pi[i] * pi[i] * vol * vol;
        }
        s
    }

    /// Regime-interpolated running cost; linear in the tables, so it equals
    /// `eta` with tilde coefficients substituted.
    pub fn eta_tilde_probs(&self, z: DistressState, pi: &[f64], probs: &[f64]) -> f64 {
        let mut s = -self.rate;
        for i in 0..self.n_stocks {
            let vol = self.vol_of(i, z);
            s += pi[i]
                * (self.rate
                    - self.tilde_drift_probs(i, z, probs)
                    - self.tilde_intensity_probs(i, z, probs));
            s += 0.5 * (1.0 - self.gamma) * pi[i] * pi[i] * vol * vol;
        }
        s
    }
}

/// Linear interpolation of per-regime values over the simplex:
/// `g(e_K) + sum_{k < K} (g(e_k) - g(e_K)) lam_k`. Exact at vertices.
pub fn tilde_interp(values_per_regime: &[f64], lam: &SimplexPoint) -> Result<f64> {
    if values_per_regime.len() != lam.dim() + 1 {
        return Err(Error::LengthMismatch {
            expected: lam.dim() + 1,
            got: values_per_regime.len(),
            context: "tilde_interp values",
        });
    }
    let last = values_per_regime[lam.dim()];
    let mut s = last;
    for (k, &c) in lam.coords().iter().enumerate() {
        s += (values_per_regime[k] - last) * c;
    }
    Ok(s)
}
