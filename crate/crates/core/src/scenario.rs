//! Flat scenario file: every knob of a run in one TOML document.
//!
//! Relative paths are resolved against the file's directory. After
//! [`Scenario::resolve`], every optional field is filled in, so the
//! resolved document alone reproduces a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::{AlteringParams, ConvergenceConfig, DayConfig, FleetSource, SweepMode};
use crate::fleet::{load_fleet_path, BatteryPolicy, Distribution, FleetConfig, FleetError, DEFAULT_BASELINE};
use crate::prices::{hourly_std, HourlyStd, MarketKind, PriceError, PriceMatrix, ThresholdConfig};
use crate::solver::BScope;
use crate::synth::{synthesize_prices, PriceSynthConfig};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Price(#[from] PriceError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Base seed; the fleet, clearing and price seeds default to
    /// `seed`, `seed + 1` and `seed + 2`.
    pub seed: u64,
    pub fleet_seed: Option<u64>,
    pub clearing_seed: Option<u64>,
    pub price_seed: Option<u64>,

    /// Fixed fleet CSV; when absent the fleet is synthesised.
    pub fleet_file: Option<PathBuf>,
    pub n_users: usize,
    pub with_pevs: bool,
    /// Horizon runs draw a fresh synthetic fleet each day.
    pub resample_fleet_daily: bool,
    pub arrival_mean: f64,
    pub arrival_sd: f64,
    pub arrival_min: f64,
    pub arrival_max: f64,
    pub departure_mean: f64,
    pub departure_sd: f64,
    pub departure_min: f64,
    pub departure_max: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    pub charger_kw: f64,
    pub battery_kwh: f64,
    pub baseline_noise_low: f64,
    pub baseline_noise_high: f64,

    /// Price files; when both are absent prices are synthesised.
    pub da_prices: Option<PathBuf>,
    pub rt_prices: Option<PathBuf>,
    /// RT matrix whose hourly sigma weights the threshold; defaults to
    /// `rt_prices` (or the synthetic RT matrix).
    pub sigma_prices: Option<PathBuf>,
    pub price_days: usize,
    pub price_base_level: f64,
    pub price_seasonal_amplitude: f64,
    pub price_day_noise: f64,
    pub price_hour_noise: f64,
    pub price_rt_noise: f64,
    pub price_rt_tail_df: f64,
    pub price_spike_probability: f64,
    pub price_spike_factor_low: f64,
    pub price_spike_factor_high: f64,

    pub lambda: f64,
    pub window_k: usize,
    pub deadband: f64,
    pub b_scope: BScope,
    pub sellback: bool,
    pub v2g_enabled: bool,
    pub soc_floor_fraction: f64,
    pub max_sweeps: usize,
    pub mse_tolerance: f64,
    pub sweep_mode: SweepMode,

    /// Day simulated by `run-day` (1-based).
    pub day: usize,
    /// Days simulated by `run-year`, from day 1; all available when absent.
    pub horizon_days: Option<usize>,
}

impl Default for Scenario {
    fn default() -> Self {
        let fleet = FleetConfig::default();
        let prices = PriceSynthConfig::default();
        let (arrival_mean, arrival_sd, arrival_min, arrival_max) = normal_parts(&fleet.arrival);
        let (departure_mean, departure_sd, departure_min, departure_max) = normal_parts(&fleet.departure);
        let (energy_min, energy_max) = match fleet.energy {
            Distribution::Uniform { low, high } => (low, high),
            _ => unreachable!("default energy draw is uniform"),
        };
        let altering = AlteringParams::default();
        let conv = ConvergenceConfig::default();
        Self {
            seed: 2014,
            fleet_seed: None,
            clearing_seed: None,
            price_seed: None,
            fleet_file: None,
            n_users: fleet.n_users,
            with_pevs: fleet.with_pevs,
            resample_fleet_daily: true,
            arrival_mean,
            arrival_sd,
            arrival_min,
            arrival_max,
            departure_mean,
            departure_sd,
            departure_min,
            departure_max,
            energy_min,
            energy_max,
            charger_kw: fleet.charger_kw,
            battery_kwh: fleet.battery_kwh,
            baseline_noise_low: fleet.baseline_noise.0,
            baseline_noise_high: fleet.baseline_noise.1,
            da_prices: None,
            rt_prices: None,
            sigma_prices: None,
            price_days: prices.days,
            price_base_level: prices.base_level,
            price_seasonal_amplitude: prices.seasonal_amplitude,
            price_day_noise: prices.day_noise,
            price_hour_noise: prices.hour_noise,
            price_rt_noise: prices.rt_noise,
            price_rt_tail_df: prices.rt_tail_df,
            price_spike_probability: prices.spike_probability,
            price_spike_factor_low: prices.spike_factor.0,
            price_spike_factor_high: prices.spike_factor.1,
            lambda: altering.lambda,
            window_k: altering.threshold.window_k,
            deadband: altering.threshold.deadband,
            b_scope: altering.b_scope,
            sellback: true,
            v2g_enabled: fleet.v2g_enabled,
            soc_floor_fraction: fleet.soc_floor_fraction,
            max_sweeps: conv.max_sweeps,
            mse_tolerance: conv.mse_tolerance,
            sweep_mode: SweepMode::default(),
            day: 1,
            horizon_days: None,
        }
    }
}

fn normal_parts(d: &Distribution) -> (f64, f64, f64, f64) {
    match *d {
        Distribution::Normal { mean, sd, min, max } => (mean, sd, min, max),
        _ => unreachable!("default time draws are truncated normals"),
    }
}

/// Prices and statistics a run works from.
#[derive(Clone, Debug)]
pub struct MarketData {
    pub da: PriceMatrix,
    pub rt: PriceMatrix,
    pub sigma: HourlyStd,
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut s: Scenario = toml::from_str(&text).map_err(|source| ScenarioError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut s.fleet_file,
            &mut s.da_prices,
            &mut s.rt_prices,
            &mut s.sigma_prices,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(s)
    }

    /// Fills every derived default and checks ranges.
    pub fn resolve(mut self) -> Result<Self, ScenarioError> {
        self.fleet_seed.get_or_insert(self.seed);
        self.clearing_seed.get_or_insert(self.seed.wrapping_add(1));
        self.price_seed.get_or_insert(self.seed.wrapping_add(2));
        if self.da_prices.is_some() != self.rt_prices.is_some() {
            return Err(ScenarioError::Invalid(
                "da_prices and rt_prices must be given together".into(),
            ));
        }
        if self.sigma_prices.is_none() {
            self.sigma_prices = self.rt_prices.clone();
        }
        if self.day == 0 {
            return Err(ScenarioError::Invalid("day is 1-based".into()));
        }
        if self.horizon_days == Some(0) {
            return Err(ScenarioError::Invalid("horizon_days must be at least 1".into()));
        }
        self.fleet_config().validate()?;
        self.price_synth_config().validate().map_err(ScenarioError::Invalid)?;
        self.day_config()
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn fleet_config(&self) -> FleetConfig {
        FleetConfig {
            n_users: self.n_users,
            arrival: Distribution::Normal {
                mean: self.arrival_mean,
                sd: self.arrival_sd,
                min: self.arrival_min,
                max: self.arrival_max,
            },
            departure: Distribution::Normal {
                mean: self.departure_mean,
                sd: self.departure_sd,
                min: self.departure_min,
                max: self.departure_max,
            },
            energy: Distribution::Uniform {
                low: self.energy_min,
                high: self.energy_max,
            },
            charger_kw: self.charger_kw,
            battery_kwh: self.battery_kwh,
            v2g_enabled: self.v2g_enabled,
            soc_floor_fraction: self.soc_floor_fraction,
            baseline_template: DEFAULT_BASELINE,
            baseline_noise: (self.baseline_noise_low, self.baseline_noise_high),
            with_pevs: self.with_pevs,
        }
    }

    pub fn price_synth_config(&self) -> PriceSynthConfig {
        PriceSynthConfig {
            days: self.price_days,
            base_level: self.price_base_level,
            seasonal_amplitude: self.price_seasonal_amplitude,
            day_noise: self.price_day_noise,
            hour_noise: self.price_hour_noise,
            rt_noise: self.price_rt_noise,
            rt_tail_df: self.price_rt_tail_df,
            spike_probability: self.price_spike_probability,
            spike_factor: (self.price_spike_factor_low, self.price_spike_factor_high),
        }
    }

    pub fn day_config(&self) -> DayConfig {
        DayConfig {
            policy: BatteryPolicy {
                v2g_enabled: self.v2g_enabled,
                soc_floor_fraction: self.soc_floor_fraction,
            },
            altering: AlteringParams {
                lambda: self.lambda,
                b_scope: self.b_scope,
                threshold: ThresholdConfig {
                    window_k: self.window_k,
                    deadband: self.deadband,
                },
            },
            convergence: ConvergenceConfig {
                max_sweeps: self.max_sweeps,
                mse_tolerance: self.mse_tolerance,
            },
            sweep_mode: self.sweep_mode,
            sellback: self.sellback,
            clearing_seed: self.clearing_seed.unwrap_or(self.seed.wrapping_add(1)),
        }
    }

    /// Fleet used for every day, or a per-day synthetic draw.
    pub fn fleet_source(&self) -> Result<FleetSource, ScenarioError> {
        let seed = self.fleet_seed.unwrap_or(self.seed);
        let cfg = self.fleet_config();
        if let Some(path) = &self.fleet_file {
            return Ok(FleetSource::Fixed(load_fleet_path(path)?));
        }
        if self.resample_fleet_daily {
            Ok(FleetSource::Synthesized { config: cfg, seed })
        } else {
            Ok(FleetSource::Fixed(crate::fleet::synthesize_fleet(&cfg, seed)?))
        }
    }

    pub fn market_data(&self) -> Result<MarketData, ScenarioError> {
        let (da, rt) = match (&self.da_prices, &self.rt_prices) {
            (Some(d), Some(r)) => (
                PriceMatrix::from_path(d, MarketKind::DayAhead)?,
                PriceMatrix::from_path(r, MarketKind::RealTime)?,
            ),
            _ => synthesize_prices(
                &self.price_synth_config(),
                self.price_seed.unwrap_or(self.seed.wrapping_add(2)),
            )?,
        };
        if da.days() != rt.days() {
            return Err(ScenarioError::Invalid(format!(
                "DA prices have {} days but RT prices have {}",
                da.days(),
                rt.days()
            )));
        }
        let sigma = match &self.sigma_prices {
            Some(p) if Some(p) != self.rt_prices.as_ref() => {
                hourly_std(&PriceMatrix::from_path(p, MarketKind::RealTime)?)
            }
            _ => hourly_std(&rt),
        };
        Ok(MarketData { da, rt, sigma })
    }
}
