//! Recursive solver for the system of semilinear HJB equations.
//!
//! The exponential transform of the value function, `w(t, lambda, z)`,
//! satisfies one backward parabolic equation per distress state `z`, coupled
//! to the states with one more distressed stock through an exponential
//! zero-order term. With all stocks distressed the equation is a pure
//! quadrature with closed form `gamma r (T - t)`, so the system is solved by
//! walking the distress lattice in order of decreasing distress count.
//!
//! For a two-regime chain the spatial variable is the scalar filter
//! coordinate `lambda` on [0, 1] and the equation reads
//!
//! ```text
//!     dw/dt + a(lam) w_ll + 1/2 (ss)(lam) w_l^2
//!           + c_g (ss_z)(lam) w_l^2 + theta(lam) w_l + xi(t, lam, w) = 0,
//!     w(T, .) = 0,
//! ```
//!
//! with `a = (ss)/2` the degenerate diffusion (`ss` is the squared filter
//! volatility, vanishing at both endpoints), `c_g = gamma / (2(1-gamma))`,
//! `ss_z` its restriction to live stocks, `theta` the risk-adjusted mixing
//! drift, and `xi` the distress coupling
//! `sum_{i live} tilde_h_i(lam) exp(w_child_i(t, lam_i') - w) + rho(lam)`
//! evaluated at the Bayes-revised point `lam_i'`.
//!
//! Discretization: uniform grid in `t` and `lambda`; diffusion implicit
//! (tridiagonal solve, factored once per state); gradient, quadratic,
//! exponential, and source terms explicit at the previous time level, with an
//! optional fixed-point correction loop that re-evaluates them at the current
//! level until successive iterates agree to `newton_tol`. Gradients are
//! centered in the interior and one-sided second-order at the endpoints,
//! where the leading piece of the inward drift joins the implicit matrix so
//! the correction loop contracts there despite the vanished diffusion. The
//! explicit interior terms still want `dt` no larger than about
//! `dlam / (|theta| + sigma^2 |w_lambda|)`; the default grid sits well
//! inside that, and a violated budget surfaces as a `NonFinite` error, never
//! as silently wrong values.
//!
//! The optional `stampacchia` mode replaces each quadratic gradient term `q`
//! by the bounded surrogate `q / (1 + q/m)`; as the truncation level `m`
//! grows the solutions converge to the direct ones, which
//! [`stampacchia_convergence`] measures in the grid L2 norm.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DistressState, MarketConfig, SimplexPoint};

// ============================================================================
// Grid and solver options
// ============================================================================

/// Uniform space-time grid: `n_space` lambda nodes on [0, 1] including the
/// endpoints, `n_time` time levels on [0, T].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub n_space: usize,
    pub n_time: usize,
}

impl Grid {
    pub fn new(n_space: usize, n_time: usize) -> Self {
        Self { n_space, n_time }
    }

    /// Benchmark resolution: resolves the lambda(1-lambda) degeneracy and
    /// keeps the explicit terms stable at horizon 3.
    pub fn benchmark() -> Self {
        Self::new(201, 3000)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_space < 3 {
            return Err(Error::InvalidConfig(format!(
                "n_space = {} must be at least 3",
                self.n_space
            )));
        }
        if self.n_time < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_time = {} must be at least 2",
                self.n_time
            )));
        }
        Ok(())
    }

    pub fn dlam(&self) -> f64 {
        1.0 / (self.n_space - 1) as f64
    }

    pub fn dt(&self, horizon: f64) -> f64 {
        horizon / (self.n_time - 1) as f64
    }

    pub fn lambda(&self, m: usize) -> f64 {
        m as f64 * self.dlam()
    }

    pub fn time(&self, horizon: f64, j: usize) -> f64 {
        j as f64 * self.dt(horizon)
    }
}

impl Default for Grid {
    fn default() -> Self {
        Self::benchmark()
    }
}

/// How the quadratic gradient terms enter the scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    /// The equation as stated.
    Direct,
    /// Quadratic terms bounded by `q -> q / (1 + q/m)`.
    Stampacchia { m: u32 },
}

impl Default for SolveMode {
    fn default() -> Self {
        Self::Direct
    }
}

/// Treatment of the endpoints, where the diffusion degenerates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Solve the restricted first-order equation at the endpoints (the
    /// diffusion vanishes there exactly and the drift points inward). This
    /// gives the financially meaningful full-information boundary values.
    Degenerate,
    /// Pin the endpoint values to zero. Useful for comparing against weak
    /// formulations that fix the boundary for convenience. Pinning fights
    /// the inward drift, so on coefficients with strong quadratic gradient
    /// terms the induced layer can defeat the centered scheme; such solves
    /// fail the containment check and are rejected rather than returned.
    DirichletZero,
}

impl Default for BoundaryMode {
    fn default() -> Self {
        Self::Degenerate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    #[serde(default)]
    pub mode: SolveMode,
    #[serde(default)]
    pub boundary: BoundaryMode,
    /// Stop the inner correction loop when successive iterates agree to this
    /// sup-norm tolerance.
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    /// Cap on inner corrections per time step; 0 disables the loop and the
    /// explicit terms stay frozen at the previous level.
    #[serde(default = "default_max_inner_iters")]
    pub max_inner_iters: usize,
}

fn default_newton_tol() -> f64 {
    1e-10
}

fn default_max_inner_iters() -> usize {
    50
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            mode: SolveMode::Direct,
            boundary: BoundaryMode::Degenerate,
            newton_tol: default_newton_tol(),
            max_inner_iters: default_max_inner_iters(),
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if let SolveMode::Stampacchia { m } = self.mode {
            if m < 1 {
                return Err(Error::InvalidConfig(
                    "stampacchia truncation level must be at least 1".into(),
                ));
            }
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "newton_tol = {} must be positive",
                self.newton_tol
            )));
        }
        Ok(())
    }
}

/// The bounded surrogate for a nonnegative quadratic term: increasing in `q`,
/// capped at `m`, and converging to `q` pointwise as `m` grows.
pub fn truncate_quadratic(q: f64, m: f64) -> f64 {
    q / (1.0 + q / m)
}

// ============================================================================
// Value surface
// ============================================================================

/// The solved transform `w` for one distress state on one grid, together
/// with its a-priori enclosure. Immutable once built.
#[derive(Clone, Debug)]
pub struct ValueSurface {
    pub state: DistressState,
    /// `values[j][m]` at time `t_j = j T/(n_time-1)`, node
    /// `lambda_m = m/(n_space-1)`.
    pub values: Vec<Vec<f64>>,
    pub grid: Grid,
    pub options: SolveOptions,
    pub horizon: f64,
    /// Lower enclosure bound; every node satisfies
    /// `lower_bound <= w <= upper_bound` (checked at solve time).
    pub lower_bound: f64,
    pub upper_bound: f64,
    /// True when the surface was produced by a closed form rather than the
    /// stepper.
    pub analytic: bool,
}

impl ValueSurface {
    /// Bilinear interpolation; arguments are clamped to the domain.
    pub fn value_at(&self, t: f64, lam: f64) -> f64 {
        let (j, tau) = self.time_cell(t);
        let (m, alpha) = self.space_cell(lam);
        let lo = self.values[j][m] * (1.0 - alpha) + self.values[j][m + 1] * alpha;
        let hi = self.values[j + 1][m] * (1.0 - alpha) + self.values[j + 1][m + 1] * alpha;
        lo * (1.0 - tau) + hi * tau
    }

    /// Lambda-gradient of the interpolant. At grid nodes this is the
    /// second-order difference (centered inside, one-sided at the endpoints)
    /// of the time-interpolated values; strictly between nodes it is the cell
    /// slope of the bilinear interpolant, constant across the cell.
    pub fn grad_lambda_at(&self, t: f64, lam: f64) -> f64 {
        let (j, tau) = self.time_cell(t);
        let at = |m: usize| -> f64 {
            self.values[j][m] * (1.0 - tau) + self.values[j + 1][m] * tau
        };
        let dlam = self.grid.dlam();
        let n = self.grid.n_space;
        let pos = (lam.clamp(0.0, 1.0)) / dlam;
        let m = (pos.round() as usize).min(n - 1);
        if (pos - m as f64).abs() < 1e-9 {
            // On a node: second-order differences.
            if m == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * dlam)
            } else if m == n - 1 {
                (3.0 * at(n - 1) - 4.0 * at(n - 2) + at(n - 3)) / (2.0 * dlam)
            } else {
                (at(m + 1) - at(m - 1)) / (2.0 * dlam)
            }
        } else {
            let (m, _) = self.space_cell(lam);
            (at(m + 1) - at(m)) / dlam
        }
    }

    fn time_cell(&self, t: f64) -> (usize, f64) {
        let dt = self.grid.dt(self.horizon);
        let pos = (t.clamp(0.0, self.horizon)) / dt;
        let j = (pos.floor() as usize).min(self.grid.n_time - 2);
        (j, (pos - j as f64).clamp(0.0, 1.0))
    }

    fn space_cell(&self, lam: f64) -> (usize, f64) {
        let dlam = self.grid.dlam();
        let pos = (lam.clamp(0.0, 1.0)) / dlam;
        let m = (pos.floor() as usize).min(self.grid.n_space - 2);
        (m, (pos - m as f64).clamp(0.0, 1.0))
    }

    /// CSV rendering with columns `t,lambda,w`, row-major by time then
    /// lambda, shortest decimal form that round-trips to the same f64.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * self.grid.n_space * 32);
        out.push_str("t,lambda,w\n");
        for (j, row) in self.values.iter().enumerate() {
            let t = self.grid.time(self.horizon, j);
            for (m, w) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", t, self.grid.lambda(m), w));
            }
        }
        out
    }
}

// ============================================================================
// Closed-form base case
// ============================================================================

/// With every stock distressed only the money market remains and the
/// transform is the deterministic quadrature `w = gamma r (T - t)`,
/// independent of the filter.
pub fn solve_terminal_state(cfg: &MarketConfig, grid: &Grid) -> ValueSurface {
    let t_horizon = cfg.horizon;
    let values: Vec<Vec<f64>> = (0..grid.n_time)
        .map(|j| {
            let w = cfg.gamma * cfg.rate * (t_horizon - grid.time(t_horizon, j));
            vec![w; grid.n_space]
        })
        .collect();
    let gr = cfg.gamma * cfg.rate;
    ValueSurface {
        state: DistressState::all_distressed(cfg.n_stocks),
        values,
        grid: *grid,
        options: SolveOptions::default(),
        horizon: t_horizon,
        lower_bound: (t_horizon + 1.0) * gr.min(0.0),
        upper_bound: (t_horizon + 1.0) * gr.max(0.0),
        analytic: true,
    }
}

// ============================================================================
// Distress coupling
// ============================================================================

/// The zero-order coupling term at one point:
/// `sum_{i live} tilde_h_i(t, lam, z) exp(w_child_i(t, lam_i') - v) + rho(t, lam, z)`
/// where `lam_i'` is the Bayes revision of `lam` at a distress of stock `i`
/// and the child value is interpolated bilinearly.
pub fn xi_coupling(
    cfg: &MarketConfig,
    z: DistressState,
    t: f64,
    lam: &SimplexPoint,
    v: f64,
    child_surfaces: &BTreeMap<DistressState, ValueSurface>,
) -> Result<f64> {
    let probs = lam.full_probs();
    let (_, rho) = cfg.theta_rho(t, lam, z);
    let mut xi = rho;
    for i in z.live() {
        let child_state = z.flip(i)?;
        let child = child_surfaces
            .get(&child_state)
            .ok_or_else(|| Error::MissingChild(child_state.to_string()))?;
        let revised = cfg.jump_revision(t, lam, i, z)?;
        let h_tilde = cfg.tilde_intensity_probs(i, z, &probs);
        xi += h_tilde * (child.value_at(t, revised.scalar()) - v).exp();
    }
    Ok(xi)
}

// ============================================================================
// Tridiagonal solver
// ============================================================================

/// Prefactored constant-coefficient tridiagonal system (Thomas algorithm).
/// The matrix `I - dt A` is strictly diagonally dominant, so elimination
/// without pivoting is stable.
struct Tridiag {
    /// Subdiagonal entries of the original matrix (length n-1).
    sub: Vec<f64>,
    /// Eliminated superdiagonal coefficients (length n-1).
    sup_p: Vec<f64>,
    /// Reciprocal pivots after elimination (length n).
    inv_d: Vec<f64>,
}

impl Tridiag {
    fn factor(sub: &[f64], diag: &[f64], sup: &[f64]) -> Self {
        let n = diag.len();
        let mut sup_p = vec![0.0; n - 1];
        let mut inv_d = vec![0.0; n];
        inv_d[0] = 1.0 / diag[0];
        sup_p[0] = sup[0] * inv_d[0];
        for m in 1..n {
            let denom = diag[m] - sub[m - 1] * sup_p[m - 1];
            inv_d[m] = 1.0 / denom;
            if m < n - 1 {
                sup_p[m] = sup[m] * inv_d[m];
            }
        }
        Self {
            sub: sub.to_vec(),
            sup_p,
            inv_d,
        }
    }

    fn solve(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        rhs[0] *= self.inv_d[0];
        for m in 1..n {
            rhs[m] = (rhs[m] - self.sub[m - 1] * rhs[m - 1]) * self.inv_d[m];
        }
        for m in (0..n - 1).rev() {
            rhs[m] -= self.sup_p[m] * rhs[m + 1];
        }
    }
}

// ============================================================================
// Per-state stepper
// ============================================================================

/// Child-surface access for one coupling term, with the lambda interpolation
/// at the revised points frozen per node (the revision map is
/// time-independent).
struct Coupling<'a> {
    h_tilde: Vec<f64>,
    child: &'a ValueSurface,
    node: Vec<usize>,
    frac: Vec<f64>,
}

impl Coupling<'_> {
    #[inline]
    fn child_value(&self, level: usize, m: usize) -> f64 {
        let row = &self.child.values[level];
        let n = self.node[m];
        row[n] * (1.0 - self.frac[m]) + row[n + 1] * self.frac[m]
    }
}

/// One distress state's spatial stepper: all lambda-dependent coefficients
/// and the factored implicit operator, built once, then applied per time
/// level. Children must live on the same grid, which the recursion
/// guarantees.
pub struct StateStepper<'a> {
    z: DistressState,
    grid: Grid,
    opts: SolveOptions,
    dt: f64,
    dlam: f64,
    gamma_factor: f64,
    /// Full and live-restricted squared filter volatility per node.
    sig2: Vec<f64>,
    sigz2: Vec<f64>,
    theta: Vec<f64>,
    rho: Vec<f64>,
    /// Inward drift speeds handled implicitly at the endpoint rows, where
    /// the diffusion cannot damp the fixed-point loop.
    bdrift_lo: f64,
    bdrift_hi: f64,
    couplings: Vec<Coupling<'a>>,
    solver: Tridiag,
}

impl<'a> StateStepper<'a> {
    pub fn new(
        cfg: &MarketConfig,
        grid: &Grid,
        opts: &SolveOptions,
        z: DistressState,
        children: &BTreeMap<DistressState, &'a ValueSurface>,
    ) -> Result<Self> {
        grid.validate()?;
        opts.validate()?;
        if cfg.n_regimes != 2 {
            return Err(Error::UnsupportedDimension(format!(
                "spatial stepper supports 2 regimes, got {}",
                cfg.n_regimes
            )));
        }
        let n = grid.n_space;
        let dlam = grid.dlam();
        let dt = grid.dt(cfg.horizon);

        let mut sig2 = vec![0.0; n];
        let mut sigz2 = vec![0.0; n];
        let mut theta = vec![0.0; n];
        let mut rho = vec![0.0; n];
        let mut sigma_flat = vec![0.0; cfg.n_stocks];
        for m in 0..n {
            let lam = SimplexPoint::from_scalar(grid.lambda(m))?;
            let probs = lam.full_probs();
            cfg.sigma_into(z, &probs, &mut sigma_flat);
            sig2[m] = sigma_flat.iter().map(|s| s * s).sum();
            sigz2[m] = z.live().map(|i| sigma_flat[i] * sigma_flat[i]).sum();
            let (th, rh) = cfg.theta_rho(0.0, &lam, z);
            theta[m] = th[0];
            rho[m] = rh;
        }

        let mut couplings = Vec::new();
        for i in z.live() {
            let child_state = z.flip(i)?;
            let child = *children
                .get(&child_state)
                .ok_or_else(|| Error::MissingChild(child_state.to_string()))?;
            if child.grid != *grid {
                return Err(Error::InvalidConfig(format!(
                    "child surface for {child_state} solved on a different grid"
                )));
            }
            let mut h_tilde = vec![0.0; n];
            let mut node = vec![0usize; n];
            let mut frac = vec![0.0; n];
            for m in 0..n {
                let lam = SimplexPoint::from_scalar(grid.lambda(m))?;
                h_tilde[m] = cfg.tilde_intensity_probs(i, z, &lam.full_probs());
                let revised = cfg.jump_revision(0.0, &lam, i, z)?.scalar();
                let pos = revised / dlam;
                let cell = (pos.floor() as usize).min(n - 2);
                node[m] = cell;
                frac[m] = (pos - cell as f64).clamp(0.0, 1.0);
            }
            couplings.push(Coupling {
                h_tilde,
                child,
                node,
                frac,
            });
        }

        // Implicit operator I - dt a(lam) D2. The diffusion vanishes at the
        // endpoints exactly, so in degenerate mode the boundary rows carry
        // the leading piece of the inward one-sided drift instead: writing
        // the second-order gradient at lambda = 0 as
        //     [3(w1 - w0) + (w1 - w2)] / (2 dlam),
        // the 3(w1 - w0) part enters the matrix and only the (w1 - w2)
        // remainder stays in the explicit loop, which keeps the endpoint
        // fixed-point iteration contracting for any step size while leaving
        // the converged solution (and its second-order accuracy) unchanged.
        // Only the inward-pointing part of theta is treated this way; the
        // split is skipped entirely in dirichlet mode, whose endpoint rows
        // stay pinned.
        let mut sub = vec![0.0; n - 1];
        let mut diag = vec![1.0; n];
        let mut sup = vec![0.0; n - 1];
        for m in 1..n - 1 {
            let c = dt * 0.5 * sig2[m] / (dlam * dlam);
            sub[m - 1] = -c;
            diag[m] = 1.0 + 2.0 * c;
            sup[m] = -c;
        }
        let (bdrift_lo, bdrift_hi) = match opts.boundary {
            BoundaryMode::Degenerate => (theta[0].max(0.0), (-theta[n - 1]).max(0.0)),
            BoundaryMode::DirichletZero => (0.0, 0.0),
        };
        let p_lo = 3.0 * dt * bdrift_lo / (2.0 * dlam);
        let p_hi = 3.0 * dt * bdrift_hi / (2.0 * dlam);
        diag[0] = 1.0 + p_lo;
        sup[0] = -p_lo;
        diag[n - 1] = 1.0 + p_hi;
        sub[n - 2] = -p_hi;
        let solver = Tridiag::factor(&sub, &diag, &sup);

        Ok(Self {
            z,
            grid: *grid,
            opts: *opts,
            dt,
            dlam,
            gamma_factor: cfg.gamma / (2.0 * (1.0 - cfg.gamma)),
            sig2,
            sigz2,
            theta,
            rho,
            bdrift_lo,
            bdrift_hi,
            couplings,
            solver,
        })
    }

    pub fn state(&self) -> DistressState {
        self.z
    }

    /// Gradient of `w` at node `m`: centered inside, one-sided second-order
    /// at the endpoints.
    #[inline]
    fn gradient(&self, w: &[f64], m: usize) -> f64 {
        let n = w.len();
        if m == 0 {
            (-3.0 * w[0] + 4.0 * w[1] - w[2]) / (2.0 * self.dlam)
        } else if m == n - 1 {
            (3.0 * w[n - 1] - 4.0 * w[n - 2] + w[n - 3]) / (2.0 * self.dlam)
        } else {
            (w[m + 1] - w[m - 1]) / (2.0 * self.dlam)
        }
    }

    /// All explicit terms at node `m`, evaluated on the iterate `w` with the
    /// child surfaces read at time level `level`.
    #[inline]
    fn explicit_terms(&self, w: &[f64], level: usize, m: usize) -> f64 {
        let g = self.gradient(w, m);
        let g2 = g * g;
        let (q_full, q_live) = match self.opts.mode {
            SolveMode::Direct => (self.sig2[m] * g2, self.sigz2[m] * g2),
            SolveMode::Stampacchia { m: trunc } => (
                truncate_quadratic(self.sig2[m] * g2, trunc as f64),
                truncate_quadratic(self.sigz2[m] * g2, trunc as f64),
            ),
        };
        let mut e = 0.5 * q_full + self.gamma_factor * q_live + self.theta[m] * g + self.rho[m];
        for c in &self.couplings {
            e += c.h_tilde[m] * (c.child_value(level, m) - w[m]).exp();
        }
        e
    }

    /// One backward step: given the values at level `j+1`, produces level
    /// `j`. The predictor freezes the explicit terms at level `j+1`; the
    /// correction loop re-evaluates them at the current iterate (children at
    /// level `j`) until successive iterates agree to `newton_tol` or the
    /// iteration cap is hit.
    pub fn step(&self, j: usize, next: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.n_space;
        debug_assert_eq!(next.len(), n);
        let dirichlet = self.opts.boundary == BoundaryMode::DirichletZero;

        let assemble = |w_eval: &[f64], level: usize| -> Vec<f64> {
            let mut rhs: Vec<f64> = (0..n)
                .map(|m| next[m] + self.dt * self.explicit_terms(w_eval, level, m))
                .collect();
            if dirichlet {
                rhs[0] = 0.0;
                rhs[n - 1] = 0.0;
            } else {
                // Remove the boundary-drift pieces the matrix supplies.
                rhs[0] -= self.dt * self.bdrift_lo * 3.0 * (w_eval[1] - w_eval[0])
                    / (2.0 * self.dlam);
                rhs[n - 1] -= self.dt * self.bdrift_hi * 3.0 * (w_eval[n - 2] - w_eval[n - 1])
                    / (2.0 * self.dlam);
            }
            rhs
        };

        let mut w = assemble(next, j + 1);
        self.solver.solve(&mut w);

        for _ in 0..self.opts.max_inner_iters {
            let mut w_new = assemble(&w, j);
            self.solver.solve(&mut w_new);
            let delta = w
                .iter()
                .zip(&w_new)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            w = w_new;
            if delta < self.opts.newton_tol {
                break;
            }
        }

        for (m, &v) in w.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    state: self.z.to_string(),
                    time_level: j,
                    node: m,
                });
            }
        }
        Ok(w)
    }

    /// Runs the full backward sweep from the zero terminal condition.
    fn solve_all(&self) -> Result<Vec<Vec<f64>>> {
        let mut values = vec![vec![0.0; self.grid.n_space]; self.grid.n_time];
        for j in (0..self.grid.n_time - 1).rev() {
            let (head, tail) = values.split_at_mut(j + 1);
            head[j] = self.step(j, &tail[0])?;
        }
        Ok(values)
    }
}

/// One backward time step for state `z` as a free function: builds the
/// stepper, steps once. For repeated stepping construct a [`StateStepper`]
/// and reuse it; the coefficient tables and the factorization are the
/// expensive part.
pub fn step_semilinear(
    cfg: &MarketConfig,
    grid: &Grid,
    opts: &SolveOptions,
    z: DistressState,
    children: &BTreeMap<DistressState, ValueSurface>,
    j: usize,
    next: &[f64],
) -> Result<Vec<f64>> {
    let view: BTreeMap<DistressState, &ValueSurface> =
        children.iter().map(|(k, v)| (*k, v)).collect();
    StateStepper::new(cfg, grid, opts, z, &view)?.step(j, next)
}

// ============================================================================
// A-priori bounds
// ============================================================================

fn bounds_impl<'s>(
    cfg: &MarketConfig,
    z: DistressState,
    child_for: &dyn Fn(DistressState) -> Option<&'s ValueSurface>,
) -> Result<(f64, f64)> {
    let t_plus = cfg.horizon + 1.0;

    // Lambda grid for the extrema of rho and the intensity sum: the childrens'
    // grid, or a token grid when no stock is live (rho is then constant).
    let n_nodes = z
        .live()
        .next()
        .and_then(|i| z.flip(i).ok().and_then(|c| child_for(c).map(|s| s.grid.n_space)))
        .unwrap_or(2);

    let mut rho_min = f64::INFINITY;
    let mut rho_max = f64::NEG_INFINITY;
    let mut intensity_sup = 0.0f64;
    for m in 0..n_nodes {
        let lam = SimplexPoint::from_scalar(m as f64 / (n_nodes - 1) as f64)?;
        let probs = lam.full_probs();
        let (_, rho) = cfg.theta_rho(0.0, &lam, z);
        rho_min = rho_min.min(rho);
        rho_max = rho_max.max(rho);
        let h_sum: f64 = z
            .live()
            .map(|i| cfg.tilde_intensity_probs(i, z, &probs))
            .sum();
        intensity_sup = intensity_sup.max(h_sum);
    }

    let lower = t_plus * rho_min.min(0.0);

    let mut child_sup = 0.0f64;
    for i in z.live() {
        let child_state = z.flip(i)?;
        let child = child_for(child_state)
            .ok_or_else(|| Error::MissingChild(child_state.to_string()))?;
        let sup = child
            .values
            .iter()
            .flatten()
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        child_sup = child_sup.max(sup);
    }

    let upper_raw = intensity_sup * (child_sup - lower).exp() + rho_max;
    let upper = t_plus * upper_raw.max(0.0);
    Ok((lower, upper))
}

/// A-priori enclosure `[L, U]` for the state's solution, from the extrema of
/// the source term, the children's sup norms, and the filtered intensity
/// sum, all taken over the numerical grid. By construction `L <= 0 <= U`.
pub fn bounds(
    cfg: &MarketConfig,
    z: DistressState,
    child_surfaces: &BTreeMap<DistressState, ValueSurface>,
) -> Result<(f64, f64)> {
    bounds_impl(cfg, z, &|s| child_surfaces.get(&s))
}

fn check_containment(surface: &ValueSurface) -> Result<()> {
    for row in &surface.values {
        for &v in row {
            if v < surface.lower_bound - 1e-9 || v > surface.upper_bound + 1e-9 {
                return Err(Error::BoundViolation {
                    state: surface.state.to_string(),
                    value: v,
                    lower: surface.lower_bound,
                    upper: surface.upper_bound,
                });
            }
        }
    }
    Ok(())
}

// ============================================================================
// Full-system recursion
// ============================================================================

fn solve_state<'a>(
    cfg: &MarketConfig,
    grid: &Grid,
    opts: &SolveOptions,
    z: DistressState,
    children: &BTreeMap<DistressState, &'a ValueSurface>,
) -> Result<ValueSurface> {
    let stepper = StateStepper::new(cfg, grid, opts, z, children)?;
    let values = stepper.solve_all()?;
    let (lower, upper) = bounds_impl(cfg, z, &|s| children.get(&s).copied())?;
    let surface = ValueSurface {
        state: z,
        values,
        grid: *grid,
        options: *opts,
        horizon: cfg.horizon,
        lower_bound: lower,
        upper_bound: upper,
        analytic: false,
    };
    check_containment(&surface)?;
    Ok(surface)
}

/// Solves the whole coupled system: distress states in order of decreasing
/// distress count, the all-distressed state by its closed form, every other
/// state by time stepping against its already-solved children. Every
/// returned surface satisfies its a-priori enclosure; a violation aborts the
/// solve because it signals a defective step, not a legitimate parameter
/// set.
pub fn recursive_solve(
    cfg: &MarketConfig,
    grid: &Grid,
    opts: &SolveOptions,
) -> Result<BTreeMap<DistressState, ValueSurface>> {
    cfg.validate()?;
    grid.validate()?;
    opts.validate()?;
    let n = cfg.n_stocks;
    let mut surfaces: BTreeMap<DistressState, ValueSurface> = BTreeMap::new();

    let full = solve_terminal_state(cfg, grid);
    check_containment(&full)?;
    surfaces.insert(full.state, full);

    for count in (0..n as u32).rev() {
        let states: Vec<DistressState> = (0..cfg.n_states())
            .map(|idx| DistressState::from_index(n, idx))
            .filter(|z| z.popcount() == count)
            .collect();
        for z in states {
            let children: BTreeMap<DistressState, &ValueSurface> = z
                .live()
                .map(|i| {
                    let c = z.flip(i).expect("live stock flips");
                    (c, surfaces.get(&c).expect("children solved first"))
                })
                .collect();
            let surface = solve_state(cfg, grid, opts, z, &children)?;
            surfaces.insert(z, surface);
        }
    }
    Ok(surfaces)
}

// ============================================================================
// Homogeneous-group reduction
// ============================================================================

/// Result of collapsing distress states by group symmetry: states whose
/// per-group distress counts agree share one PDE solve.
#[derive(Clone, Debug)]
pub struct StateReduction {
    /// Group id per stock.
    pub groups: Vec<usize>,
    /// Canonical state index for every state index.
    pub canonical: Vec<usize>,
    /// Number of distinct canonical states, i.e. PDE solves.
    pub solve_count: usize,
}

impl StateReduction {
    pub fn canonical_state(&self, z: DistressState) -> DistressState {
        DistressState::from_index(self.groups.len(), self.canonical[z.index()])
    }
}

/// Verifies the declared group structure and builds the canonical-state map.
///
/// Stocks in one group must be exchangeable: swapping any two of them (and
/// the corresponding distress bits) must leave every coefficient table
/// unchanged. The canonical representative of a state distresses the first
/// `c_g` members of each group, where `c_g` is the group's distress count;
/// with group sizes `s_g` this leaves `prod_g (s_g + 1)` distinct solves
/// instead of `2^N`.
pub fn reduce_states(cfg: &MarketConfig, groups: &[usize]) -> Result<StateReduction> {
    let n = cfg.n_stocks;
    if groups.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: groups.len(),
            context: "group assignment",
        });
    }
    let n_states = cfg.n_states();

    // Exchangeability check via adjacent same-group transpositions, which
    // generate the whole per-group symmetric group.
    let swap_state = |idx: usize, a: usize, b: usize| -> usize {
        let bit_a = (idx >> a) & 1;
        let bit_b = (idx >> b) & 1;
        (idx & !(1 << a) & !(1 << b)) | (bit_a << b) | (bit_b << a)
    };
    let members_of = |g: usize| -> Vec<usize> {
        (0..n).filter(|&i| groups[i] == g).collect()
    };
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    for g in 0..n_groups {
        let members = members_of(g);
        for pair in members.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            for idx in 0..n_states {
                let sidx = swap_state(idx, a, b);
                for l in 0..n {
                    let sl = if l == a {
                        b
                    } else if l == b {
                        a
                    } else {
                        l
                    };
                    for k in 0..cfg.n_regimes {
                        if cfg.drift[l][k][idx] != cfg.drift[sl][k][sidx]
                            || cfg.intensity[l][k][idx] != cfg.intensity[sl][k][sidx]
                        {
                            return Err(Error::InhomogeneousGroup {
                                group: g,
                                detail: format!(
                                    "stocks {a} and {b} are not exchangeable (state {idx})"
                                ),
                            });
                        }
                    }
                    if cfg.volatility[l][idx] != cfg.volatility[sl][sidx] {
                        return Err(Error::InhomogeneousGroup {
                            group: g,
                            detail: format!(
                                "stocks {a} and {b} differ in volatility (state {idx})"
                            ),
                        });
                    }
                }
            }
        }
    }

    let mut canonical = vec![0usize; n_states];
    let mut distinct = std::collections::BTreeSet::new();
    for idx in 0..n_states {
        let z = DistressState::from_index(n, idx);
        let mut canon = 0usize;
        for g in 0..n_groups {
            let members = members_of(g);
            let count = members.iter().filter(|&&i| z.is_distressed(i)).count();
            for &i in members.iter().take(count) {
                canon |= 1 << i;
            }
        }
        canonical[idx] = canon;
        distinct.insert(canon);
    }
    Ok(StateReduction {
        groups: groups.to_vec(),
        canonical,
        solve_count: distinct.len(),
    })
}

/// Surfaces solved once per canonical state, readable for any state.
#[derive(Clone, Debug)]
pub struct ReducedSurfaces {
    pub reduction: StateReduction,
    pub surfaces: BTreeMap<DistressState, ValueSurface>,
}

impl ReducedSurfaces {
    pub fn surface_for(&self, z: DistressState) -> &ValueSurface {
        &self.surfaces[&self.reduction.canonical_state(z)]
    }
}

/// [`recursive_solve`] with the group symmetry exploited: only canonical
/// states are stepped, and couplings resolve children through the canonical
/// map. Values agree with the unreduced solve because exchangeable children
/// have identical surfaces.
pub fn recursive_solve_reduced(
    cfg: &MarketConfig,
    grid: &Grid,
    opts: &SolveOptions,
    groups: &[usize],
) -> Result<ReducedSurfaces> {
    cfg.validate()?;
    let reduction = reduce_states(cfg, groups)?;
    let n = cfg.n_stocks;
    let mut surfaces: BTreeMap<DistressState, ValueSurface> = BTreeMap::new();

    let full = solve_terminal_state(cfg, grid);
    surfaces.insert(full.state, full);

    for count in (0..n as u32).rev() {
        let states: Vec<DistressState> = (0..cfg.n_states())
            .map(|idx| DistressState::from_index(n, idx))
            .filter(|z| {
                z.popcount() == count && reduction.canonical[z.index()] == z.index()
            })
            .collect();
        for z in states {
            let children: BTreeMap<DistressState, &ValueSurface> = z
                .live()
                .map(|i| {
                    let c = z.flip(i).expect("live stock flips");
                    let canon = reduction.canonical_state(c);
                    (c, surfaces.get(&canon).expect("children solved first"))
                })
                .collect();
            let surface = solve_state(cfg, grid, opts, z, &children)?;
            surfaces.insert(z, surface);
        }
    }
    Ok(ReducedSurfaces {
        reduction,
        surfaces,
    })
}

// ============================================================================
// Truncation convergence study
// ============================================================================

/// Grid L2 distance between two full solves, summed over all states:
/// `sqrt( sum_z sum_{j,m} (u_a - u_b)^2 dlam dt )`.
fn system_l2_distance(
    a: &BTreeMap<DistressState, ValueSurface>,
    b: &BTreeMap<DistressState, ValueSurface>,
    horizon: f64,
) -> f64 {
    let mut total = 0.0;
    for (z, sa) in a {
        let sb = &b[z];
        let cell = sa.grid.dlam() * sa.grid.dt(horizon);
        let mut acc = 0.0;
        for (ra, rb) in sa.values.iter().zip(&sb.values) {
            for (va, vb) in ra.iter().zip(rb) {
                acc += (va - vb) * (va - vb);
            }
        }
        total += acc * cell;
    }
    total.sqrt()
}

/// Solves the system in truncated mode for each level in `m_sequence` and
/// once directly; returns the grid-L2 distances to the direct solution.
/// The distances decrease toward the discretization floor as `m` grows.
pub fn stampacchia_convergence(
    cfg: &MarketConfig,
    grid: &Grid,
    opts: &SolveOptions,
    m_sequence: &[u32],
) -> Result<Vec<f64>> {
    let direct_opts = SolveOptions {
        mode: SolveMode::Direct,
        ..*opts
    };
    let direct = recursive_solve(cfg, grid, &direct_opts)?;
    let mut distances = Vec::with_capacity(m_sequence.len());
    for &m in m_sequence {
        let trunc_opts = SolveOptions {
            mode: SolveMode::Stampacchia { m },
            ..*opts
        };
        let truncated = recursive_solve(cfg, grid, &trunc_opts)?;
        distances.push(system_l2_distance(&truncated, &direct, cfg.horizon));
    }
    Ok(distances)
}
