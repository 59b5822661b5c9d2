//! Experiment configuration: one JSON document naming the market, the PDE
//! grid, the solver options, and the simulation plan, plus an optional
//! parameter sweep and the output directory.
//!
//! Coefficient tables take two shapes. The short form gives one value per
//! stock and regime and applies it across every distress state; the long
//! form spells out the full per-state layout. Both expand into the same
//! dense tables, so nothing downstream sees the distinction.

use distress_portfolio::filter::SimConfig;
use distress_portfolio::hjb::{Grid, SolveOptions};
use distress_portfolio::model::{
    generator_from_rates, uniform_state_table, uniform_vol_table, DistressState, MarketConfig,
    SimplexPoint,
};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Complete description of one experiment run. Serialization is the inverse
/// of parsing: writing a parsed configuration back out reproduces the same
/// document, which keeps configs diffable across runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub market: MarketBlock,
    pub grid: Grid,
    #[serde(default)]
    pub solver: SolveOptions,
    pub simulation: SimBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepBlock>,
    pub output_dir: String,
}

/// A per-stock, per-regime coefficient table, optionally resolved further by
/// distress state.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TableSpec {
    /// `[stock][regime]`, constant across distress states.
    PerRegime(Vec<Vec<f64>>),
    /// `[stock][regime][distress state]`.
    PerState(Vec<Vec<Vec<f64>>>),
}

impl TableSpec {
    fn expand(&self, n_states: usize) -> Vec<Vec<Vec<f64>>> {
        match self {
            TableSpec::PerRegime(t) => uniform_state_table(t, n_states),
            TableSpec::PerState(t) => t.clone(),
        }
    }
}

/// Per-stock volatilities, optionally resolved by distress state. Regime
/// dependence is deliberately impossible: volatility reveals nothing about
/// the hidden chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VolSpec {
    /// `[stock]`, constant across distress states.
    PerStock(Vec<f64>),
    /// `[stock][distress state]`.
    PerState(Vec<Vec<f64>>),
}

impl VolSpec {
    fn expand(&self, n_states: usize) -> Vec<Vec<f64>> {
        match self {
            VolSpec::PerStock(v) => uniform_vol_table(v, n_states),
            VolSpec::PerState(v) => v.clone(),
        }
    }
}

/// The market primitives in configuration form.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketBlock {
    pub stocks: usize,
    pub regimes: usize,
    pub rate: f64,
    pub gamma: f64,
    pub horizon: f64,
    /// Off-diagonal regime switching rates; `switching_rates[l][k]` is the
    /// jump rate from regime `l+1` to regime `k+1`, diagonal entries ignored.
    pub switching_rates: Vec<Vec<f64>>,
    pub drift: TableSpec,
    pub intensity: TableSpec,
    pub volatility: VolSpec,
    /// Prior regime probabilities in charted coordinates (first `regimes - 1`
    /// entries of the full vector).
    pub initial_filter: Vec<f64>,
    #[serde(default = "default_wealth")]
    pub initial_wealth: f64,
}

fn default_wealth() -> f64 {
    1.0
}

impl MarketBlock {
    /// Expands the table sugar and hands the result to the model layer, whose
    /// validation is the single authority on market invariants.
    pub fn to_market(&self) -> Result<MarketConfig, Failure> {
        if self.stocks == 0 || self.stocks > 20 {
            return Err(Failure::Config(format!(
                "market.stocks = {} outside supported range 1..=20",
                self.stocks
            )));
        }
        if self.switching_rates.len() != self.regimes
            || self.switching_rates.iter().any(|r| r.len() != self.regimes)
        {
            return Err(Failure::Config(format!(
                "market.switching_rates must be {k} x {k}",
                k = self.regimes
            )));
        }
        let n_states = 1usize << self.stocks;
        let cfg = MarketConfig {
            n_stocks: self.stocks,
            n_regimes: self.regimes,
            rate: self.rate,
            gamma: self.gamma,
            horizon: self.horizon,
            generator: generator_from_rates(&self.switching_rates),
            drift: self.drift.expand(n_states),
            intensity: self.intensity.expand(n_states),
            volatility: self.volatility.expand(n_states),
            initial_filter: SimplexPoint::new(self.initial_filter.clone())?,
            initial_wealth: self.initial_wealth,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The Monte Carlo plan shared by the verify and filter-demo commands.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Stocks already distressed at time zero, as a bit string like "010";
    /// absent means every stock starts live.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_distress: Option<String>,
    /// First-order discretization allowance per unit step for the
    /// verification band; measured by step-halving when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowance_per_dt: Option<f64>,
}

impl SimBlock {
    pub fn to_sim(&self, horizon: f64) -> SimConfig {
        SimConfig::new(self.dt, horizon, self.seed, self.n_paths)
    }

    pub fn initial_state(&self, n_stocks: usize) -> Result<DistressState, Failure> {
        let Some(text) = &self.initial_distress else {
            return Ok(DistressState::all_live(n_stocks));
        };
        if text.len() != n_stocks || text.bytes().any(|b| b != b'0' && b != b'1') {
            return Err(Failure::Config(format!(
                "simulation.initial_distress = {text:?} must be {n_stocks} characters of 0/1"
            )));
        }
        let bits: Vec<bool> = text.bytes().map(|b| b == b'1').collect();
        Ok(DistressState::from_bits(&bits))
    }
}

/// A one-parameter study: re-solve the system at each value and compare the
/// resulting controls.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    /// One of `gamma`, `rate`, `horizon`, `drift[i][k]`, `intensity[i][k]`,
    /// `volatility[i]`, with 1-based stock index `i` and regime index `k`.
    pub parameter: String,
    pub values: Vec<f64>,
}

/// A resolved sweep parameter. Table targets write through every distress
/// state, matching the short table form of the configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepTarget {
    Gamma,
    Rate,
    Horizon,
    Drift { stock: usize, regime: usize },
    Intensity { stock: usize, regime: usize },
    Volatility { stock: usize },
}

impl SweepTarget {
    pub fn parse(text: &str, n_stocks: usize, n_regimes: usize) -> Result<Self, Failure> {
        let unknown = || {
            Failure::Config(format!(
                "unknown sweep parameter {text:?}; expected gamma, rate, horizon, \
                 drift[i][k], intensity[i][k], or volatility[i]"
            ))
        };
        match text {
            "gamma" => return Ok(SweepTarget::Gamma),
            "rate" => return Ok(SweepTarget::Rate),
            "horizon" => return Ok(SweepTarget::Horizon),
            _ => {}
        }
        let (name, indices) = split_indices(text).ok_or_else(unknown)?;
        let stock = *indices.first().ok_or_else(unknown)?;
        if stock == 0 || stock > n_stocks {
            return Err(Failure::Config(format!(
                "sweep parameter {text:?}: stock index {stock} outside 1..={n_stocks}"
            )));
        }
        let regime_of = |idx: usize| -> Result<usize, Failure> {
            if idx == 0 || idx > n_regimes {
                return Err(Failure::Config(format!(
                    "sweep parameter {text:?}: regime index {idx} outside 1..={n_regimes}"
                )));
            }
            Ok(idx - 1)
        };
        match (name, indices.len()) {
            ("drift", 2) => Ok(SweepTarget::Drift {
                stock: stock - 1,
                regime: regime_of(indices[1])?,
            }),
            ("intensity", 2) => Ok(SweepTarget::Intensity {
                stock: stock - 1,
                regime: regime_of(indices[1])?,
            }),
            ("volatility", 1) => Ok(SweepTarget::Volatility { stock: stock - 1 }),
            _ => Err(unknown()),
        }
    }

    /// Writes one swept value into a dense market configuration.
    pub fn apply(&self, cfg: &mut MarketConfig, value: f64) {
        let n_states = cfg.n_states();
        match *self {
            SweepTarget::Gamma => cfg.gamma = value,
            SweepTarget::Rate => cfg.rate = value,
            SweepTarget::Horizon => cfg.horizon = value,
            SweepTarget::Drift { stock, regime } => {
                for zi in 0..n_states {
                    cfg.drift[stock][regime][zi] = value;
                }
            }
            SweepTarget::Intensity { stock, regime } => {
                for zi in 0..n_states {
                    cfg.intensity[stock][regime][zi] = value;
                }
            }
            SweepTarget::Volatility { stock } => {
                for zi in 0..n_states {
                    cfg.volatility[stock][zi] = value;
                }
            }
        }
    }

    /// Filesystem-safe rendering used in output names: brackets become
    /// underscores, so `intensity[1][1]` reads `intensity_1_1`.
    pub fn slug(&self) -> String {
        match *self {
            SweepTarget::Gamma => "gamma".into(),
            SweepTarget::Rate => "rate".into(),
            SweepTarget::Horizon => "horizon".into(),
            SweepTarget::Drift { stock, regime } => format!("drift_{}_{}", stock + 1, regime + 1),
            SweepTarget::Intensity { stock, regime } => {
                format!("intensity_{}_{}", stock + 1, regime + 1)
            }
            SweepTarget::Volatility { stock } => format!("volatility_{}", stock + 1),
        }
    }
}

/// Splits `name[3][1]` into `("name", [3, 1])`; `None` on any malformation.
fn split_indices(text: &str) -> Option<(&str, Vec<usize>)> {
    let open = text.find('[')?;
    let (name, mut rest) = text.split_at(open);
    let mut indices = Vec::new();
    while !rest.is_empty() {
        let inner = rest.strip_prefix('[')?;
        let close = inner.find(']')?;
        indices.push(inner[..close].parse().ok()?);
        rest = &inner[close + 1..];
    }
    Some((name, indices))
}

impl ExperimentConfig {
    /// [`MarketConfig::benchmark`] in configuration form. The repository
    /// ships the same document at `configs/benchmark.json`; the tests hold
    /// the file and this constructor to identical values.
    #[cfg(test)]
    pub(crate) fn benchmark() -> Self {
        Self {
            market: MarketBlock {
                stocks: 2,
                regimes: 2,
                rate: 0.0,
                gamma: 0.3,
                horizon: 3.0,
                switching_rates: vec![vec![0.0, 0.5], vec![0.4, 0.0]],
                drift: TableSpec::PerRegime(vec![vec![1.0, 0.5], vec![1.2, 0.4]]),
                intensity: TableSpec::PerRegime(vec![vec![1.0, 0.1], vec![1.0, 0.1]]),
                volatility: VolSpec::PerStock(vec![0.4, 0.6]),
                initial_filter: vec![0.5],
                initial_wealth: 1.0,
            },
            grid: Grid::benchmark(),
            solver: SolveOptions::default(),
            simulation: SimBlock {
                dt: 1e-3,
                n_paths: 100_000,
                seed: 7,
                initial_distress: None,
                allowance_per_dt: None,
            },
            sweep: None,
            output_dir: "out".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_shipped() {
        println!(
            "{}",
            serde_json::to_string_pretty(&ExperimentConfig::benchmark()).unwrap()
        );
    }

    #[test]
    fn benchmark_block_expands_to_the_model_benchmark() {
        let built = ExperimentConfig::benchmark().market.to_market().unwrap();
        let reference = MarketConfig::benchmark();
        assert_eq!(built.drift, reference.drift);
        assert_eq!(built.intensity, reference.intensity);
        assert_eq!(built.volatility, reference.volatility);
        assert_eq!(built.generator, reference.generator);
        assert_eq!(built.gamma, reference.gamma);
        assert_eq!(built.horizon, reference.horizon);
    }

    #[test]
    fn sweep_targets_parse_and_apply() {
        let mut cfg = MarketConfig::benchmark();
        let t = SweepTarget::parse("intensity[1][1]", 2, 2).unwrap();
        assert_eq!(
            t,
            SweepTarget::Intensity {
                stock: 0,
                regime: 0
            }
        );
        t.apply(&mut cfg, 1.4);
        assert!(cfg.intensity[0][0].iter().all(|&h| h == 1.4));
        assert!(cfg.intensity[1][0].iter().all(|&h| h == 1.0));

        let t = SweepTarget::parse("volatility[2]", 2, 2).unwrap();
        t.apply(&mut cfg, 0.8);
        assert!(cfg.volatility[1].iter().all(|&v| v == 0.8));
        assert_eq!(SweepTarget::parse("gamma", 2, 2).unwrap(), SweepTarget::Gamma);
    }

    #[test]
    fn sweep_target_rejections_name_the_parameter() {
        for bad in [
            "momentum",
            "drift[1]",
            "intensity[0][1]",
            "intensity[1][3]",
            "volatility[3]",
            "volatility[1][1]",
            "drift[1][2][3]",
            "drift[1][",
        ] {
            let err = SweepTarget::parse(bad, 2, 2).unwrap_err();
            assert!(matches!(err, Failure::Config(_)), "{bad} should be rejected");
        }
    }

    #[test]
    fn initial_distress_parses_and_validates() {
        let mut sim = ExperimentConfig::benchmark().simulation;
        assert_eq!(sim.initial_state(2).unwrap(), DistressState::all_live(2));
        sim.initial_distress = Some("10".into());
        assert_eq!(
            sim.initial_state(2).unwrap(),
            DistressState::from_bits(&[true, false])
        );
        sim.initial_distress = Some("1".into());
        assert!(sim.initial_state(2).is_err());
        sim.initial_distress = Some("12".into());
        assert!(sim.initial_state(2).is_err());
    }
}
