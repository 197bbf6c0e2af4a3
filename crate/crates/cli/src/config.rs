//! Effective settings: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use dsbad::filter::DEFAULT_AREA_EPSILON;
use dsbad::gate::{DEFAULT_ALPHA, DEFAULT_WARMUP};
use dsbad::pipeline::{RewarmPolicy, RoundConfig, SweepConfig, DEFAULT_BUDGET, DEFAULT_GAMMA};
use dsbad::{DensityMetric, FilterConfig, GateConfig, Strategy};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Settings {
    pub gate: GateSettings,
    pub filter: FilterSettings,
    pub round: RoundSettings,
    pub sweep: SweepSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GateSettings {
    pub alpha: f64,
    pub warmup: usize,
    pub rewarm: RewarmPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct FilterSettings {
    pub strategy: Strategy,
    pub density_metric: DensityMetric,
    pub area_epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct RoundSettings {
    pub gamma: usize,
    pub budget: usize,
    pub rounds: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SweepSettings {
    pub gammas: Vec<usize>,
    pub budgets: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub jobs: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        Settings {
            gate: GateSettings {
                alpha: DEFAULT_ALPHA,
                warmup: DEFAULT_WARMUP,
                rewarm: RewarmPolicy::PerRound,
            },
            filter: FilterSettings {
                strategy: Strategy::FarthestFirst,
                density_metric: DensityMetric::Inner,
                area_epsilon: DEFAULT_AREA_EPSILON,
            },
            round: RoundSettings {
                gamma: DEFAULT_GAMMA,
                budget: DEFAULT_BUDGET,
                rounds: 1,
                seed: 0,
            },
            sweep: SweepSettings {
                gammas: sweep.gammas,
                budgets: sweep.budgets,
                strategies: sweep.strategies,
                jobs: 1,
            },
        }
    }
}

/// Partial settings, as read from a file or collected from flags.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Overlay {
    pub gate: GateOverlay,
    pub filter: FilterOverlay,
    pub round: RoundOverlay,
    pub sweep: SweepOverlay,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GateOverlay {
    pub alpha: Option<f64>,
    pub warmup: Option<usize>,
    pub rewarm: Option<RewarmPolicy>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct FilterOverlay {
    pub strategy: Option<Strategy>,
    pub density_metric: Option<DensityMetric>,
    pub area_epsilon: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RoundOverlay {
    pub gamma: Option<usize>,
    pub budget: Option<usize>,
    pub rounds: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SweepOverlay {
    pub gammas: Option<Vec<usize>>,
    pub budgets: Option<Vec<usize>>,
    pub strategies: Option<Vec<Strategy>>,
    pub jobs: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Settings {
    pub fn apply(&mut self, o: Overlay) {
        set(&mut self.gate.alpha, o.gate.alpha);
        set(&mut self.gate.warmup, o.gate.warmup);
        set(&mut self.gate.rewarm, o.gate.rewarm);
        set(&mut self.filter.strategy, o.filter.strategy);
        set(&mut self.filter.density_metric, o.filter.density_metric);
        set(&mut self.filter.area_epsilon, o.filter.area_epsilon);
        set(&mut self.round.gamma, o.round.gamma);
        set(&mut self.round.budget, o.round.budget);
        set(&mut self.round.rounds, o.round.rounds);
        set(&mut self.round.seed, o.round.seed);
        set(&mut self.sweep.gammas, o.sweep.gammas);
        set(&mut self.sweep.budgets, o.sweep.budgets);
        set(&mut self.sweep.strategies, o.sweep.strategies);
        set(&mut self.sweep.jobs, o.sweep.jobs);
    }

    /// Defaults, then `file` if given, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: Overlay) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let overlay: Overlay = toml::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            s.apply(overlay);
        }
        s.apply(flags);
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn gate(&self) -> Result<GateConfig> {
        Ok(GateConfig::new(self.gate.alpha, self.gate.warmup)?)
    }

    pub fn round_config(&self) -> Result<RoundConfig> {
        let f = &self.filter;
        let mut filter =
            FilterConfig::new(f.strategy, self.round.budget).with_density_metric(f.density_metric);
        filter.area_epsilon = f.area_epsilon;
        // The seed only feeds strategies that consume randomness.
        if f.strategy == Strategy::Random {
            filter = filter.with_seed(self.round.seed);
        }
        let cfg = RoundConfig {
            budget: self.round.budget,
            gamma: self.round.gamma,
            gate: self.gate()?,
            filter,
            rounds: self.round.rounds,
            rewarm: self.gate.rewarm,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        Ok(SweepConfig {
            gammas: self.sweep.gammas.clone(),
            budgets: self.sweep.budgets.clone(),
            strategies: self.sweep.strategies.clone(),
            gate: self.gate()?,
            seed: self.round.seed,
            density_metric: self.filter.density_metric,
            area_epsilon: self.filter.area_epsilon,
            jobs: self.sweep.jobs,
        })
    }
}
