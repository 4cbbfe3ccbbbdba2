//! Declarative run configuration: one TOML file with a section per stage,
//! overridable from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FsvError, Result};
use crate::gibbs::{ChainConfig, LoadingsPrior, StoreMode};
use crate::sim::{fixture_two_factor, LoadingsSpec, SimSpec, SvRanges, FIXTURE_SEED};
use crate::sv::SvPriors;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub factors: usize,
    pub draws: usize,
    pub burnin: usize,
    pub thin: usize,
    pub restricted: bool,
    pub seed: u64,
    pub store: StoreMode,
    pub workers: usize,
    pub interweave: bool,
}

impl Default for ChainSection {
    fn default() -> Self {
        let c = ChainConfig::default();
        ChainSection {
            factors: c.r,
            draws: c.n_draws,
            burnin: c.burn_in,
            thin: c.thin,
            restricted: c.restricted_loadings,
            seed: c.seed,
            store: c.store,
            workers: 1,
            interweave: c.interweave,
        }
    }
}

/// A named preset, optionally with individual hyperparameters replaced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub preset: String,
    pub a: Option<f64>,
    pub c: Option<f64>,
    pub d: Option<f64>,
    pub tau2: Option<f64>,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            preset: "ng-row".into(),
            a: None,
            c: None,
            d: None,
            tau2: None,
        }
    }
}

impl PriorSection {
    pub fn resolve(&self) -> Result<LoadingsPrior> {
        let mut p = LoadingsPrior::preset(&self.preset)?;
        match &mut p {
            LoadingsPrior::FixedGaussian { tau2 } => {
                if self.a.is_some() || self.c.is_some() || self.d.is_some() {
                    return Err(FsvError::Config(
                        "a, c, d do not apply to the gaussian prior".into(),
                    ));
                }
                *tau2 = self.tau2.unwrap_or(*tau2);
            }
            LoadingsPrior::NormalGammaRowwise { a, c, d }
            | LoadingsPrior::NormalGammaColumnwise { a, c, d } => {
                if self.tau2.is_some() {
                    return Err(FsvError::Config(
                        "tau2 only applies to the gaussian prior".into(),
                    ));
                }
                *a = self.a.unwrap_or(*a);
                *c = self.c.unwrap_or(*c);
                *d = self.d.unwrap_or(*d);
            }
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Use the built-in ten-series two-factor fixture; other shape fields are ignored.
    pub fixture: bool,
    pub m: usize,
    pub dates: usize,
    pub factors: usize,
    pub restricted: bool,
    pub zero_fraction: f64,
    pub loading_magnitude: (f64, f64),
    pub idio: SvRanges,
    pub factor: SvRanges,
    pub seed: u64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            fixture: true,
            m: 10,
            dates: 1000,
            factors: 2,
            restricted: true,
            zero_fraction: 0.0,
            loading_magnitude: (0.3, 1.2),
            idio: SvRanges::idiosyncratic_default(),
            factor: SvRanges::factor_default(),
            seed: FIXTURE_SEED,
        }
    }
}

impl SimulateSection {
    pub fn spec(&self) -> SimSpec {
        if self.fixture {
            return fixture_two_factor(self.seed);
        }
        SimSpec {
            m: self.m,
            t_len: self.dates,
            r_true: self.factors,
            restricted: self.restricted,
            loadings: LoadingsSpec::Random {
                zero_fraction: self.zero_fraction,
                magnitude: self.loading_magnitude,
            },
            idio_ranges: self.idio.clone(),
            factor_ranges: self.factor.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    /// Competing factor counts for rolling evaluation.
    pub models: Vec<usize>,
    pub horizons: Vec<usize>,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub warm_block: Option<usize>,
    pub warm_burnin: usize,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            models: vec![0, 1, 2],
            horizons: vec![1],
            start: None,
            end: None,
            warm_block: None,
            warm_burnin: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSection {
    pub window: usize,
    pub alphas: Vec<f64>,
    pub trading_days: f64,
    pub start: Option<usize>,
    pub end: Option<usize>,
}

impl Default for BacktestSection {
    fn default() -> Self {
        BacktestSection {
            window: crate::baselines::DEFAULT_MA_WINDOW,
            alphas: crate::baselines::DEFAULT_EWMA_ALPHAS.to_vec(),
            trading_days: crate::baselines::TRADING_DAYS_PER_YEAR,
            start: None,
            end: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub chain: ChainSection,
    pub prior: PriorSection,
    pub sv_idio: SvPriors,
    pub sv_factor: SvPriors,
    pub simulate: SimulateSection,
    pub predict: PredictSection,
    pub backtest: BacktestSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            chain: ChainSection::default(),
            prior: PriorSection::default(),
            sv_idio: SvPriors::idiosyncratic_default(),
            sv_factor: SvPriors::factor_default(),
            simulate: SimulateSection::default(),
            predict: PredictSection::default(),
            backtest: BacktestSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FsvError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FsvError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.with_context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always serialisable")
    }

    /// Sampler configuration with factor count `r`.
    pub fn chain_config(&self, r: usize) -> Result<ChainConfig> {
        let c = &self.chain;
        let cfg = ChainConfig {
            r,
            n_draws: c.draws,
            burn_in: c.burnin,
            thin: c.thin,
            restricted_loadings: c.restricted,
            fixed_factors: None,
            sv_priors_idio: self.sv_idio,
            sv_priors_factor: self.sv_factor,
            loadings_prior: self.prior.resolve()?,
            seed: c.seed,
            store: c.store,
            parallel: c.workers > 1,
            interweave: c.interweave,
        };
        cfg.sv_priors_idio.validate()?;
        cfg.sv_priors_factor.validate()?;
        Ok(cfg)
    }
}
