//! Synthetic market data in the same shapes as real DA/RT price files.
//!
//! DA follows a smooth double-peak curve with a seasonal swing and
//! day-level noise. RT is DA plus heavier-tailed noise and occasional
//! spikes. Prices are rounded to cents and never negative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};

use crate::prices::{Hourly, MarketKind, PriceError, PriceMatrix, HOURS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceSynthConfig {
    pub days: usize,
    /// Off-peak DA level, $/MWh.
    pub base_level: f64,
    /// Relative amplitude of the annual swing (winter/summer highs).
    pub seasonal_amplitude: f64,
    /// Relative sd of the day-level DA multiplier.
    pub day_noise: f64,
    /// Relative sd of independent hour-level DA noise.
    pub hour_noise: f64,
    /// Scale of RT deviations from DA, $/MWh.
    pub rt_noise: f64,
    /// Degrees of freedom of the RT deviation (lower is heavier-tailed).
    pub rt_tail_df: f64,
    /// Chance that any given RT hour spikes.
    pub spike_probability: f64,
    /// Spikes multiply DA by a factor drawn from this range.
    pub spike_factor: (f64, f64),
}

impl Default for PriceSynthConfig {
    fn default() -> Self {
        Self {
            days: 365,
            base_level: 32.0,
            seasonal_amplitude: 0.25,
            day_noise: 0.10,
            hour_noise: 0.03,
            rt_noise: 6.0,
            rt_tail_df: 3.0,
            spike_probability: 0.004,
            spike_factor: (1.5, 3.0),
        }
    }
}

impl PriceSynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        let nonneg = [
            ("base_level", self.base_level),
            ("seasonal_amplitude", self.seasonal_amplitude),
            ("day_noise", self.day_noise),
            ("hour_noise", self.hour_noise),
            ("rt_noise", self.rt_noise),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(format!("{name} must be finite and non-negative, got {v}"));
        }
        if self.days == 0 {
            return Err("days must be at least 1".into());
        }
        if !(self.rt_tail_df.is_finite() && self.rt_tail_df > 2.0) {
            return Err(format!("rt_tail_df must exceed 2, got {}", self.rt_tail_df));
        }
        if !(0.0..=1.0).contains(&self.spike_probability) {
            return Err(format!("spike_probability {} outside [0, 1]", self.spike_probability));
        }
        let (lo, hi) = self.spike_factor;
        if !(lo.is_finite() && hi.is_finite() && 1.0 <= lo && lo <= hi) {
            return Err(format!("spike_factor ({lo}, {hi}) must satisfy 1 <= low <= high"));
        }
        Ok(())
    }
}

/// Relative DA price shape over the day: a morning and a larger evening
/// peak over a night trough.
pub fn daily_shape(hour: usize) -> f64 {
    let h = hour as f64;
    let bump = |centre: f64, width: f64| (-(h - centre).powi(2) / (2.0 * width * width)).exp();
    0.8 + 0.35 * bump(8.5, 1.8) + 0.6 * bump(18.5, 2.2)
}

fn cents(v: f64) -> f64 {
    (v.max(0.0) * 100.0).round() / 100.0
}

fn da_row(cfg: &PriceSynthConfig, day: usize, rng: &mut ChaCha8Rng) -> Hourly {
    let phase = 2.0 * std::f64::consts::PI * (day as f64 - 1.0) / 365.0;
    // Highs in mid-winter and mid-summer.
    let season = 1.0 + cfg.seasonal_amplitude * (2.0 * phase).cos();
    let day_noise = Normal::new(0.0, cfg.day_noise).expect("validated");
    let hour_noise = Normal::new(0.0, cfg.hour_noise).expect("validated");
    let level = cfg.base_level * season * (1.0 + day_noise.sample(rng)).max(0.2);
    std::array::from_fn(|h| cents(level * daily_shape(h + 1) * (1.0 + hour_noise.sample(rng))))
}

fn rt_row(cfg: &PriceSynthConfig, da: &Hourly, rng: &mut ChaCha8Rng) -> Hourly {
    let tail = StudentT::new(cfg.rt_tail_df).expect("validated");
    // Unit variance for the t draw.
    let unit = ((cfg.rt_tail_df - 2.0) / cfg.rt_tail_df).sqrt();
    std::array::from_fn(|h| {
        let mut p = da[h] + cfg.rt_noise * daily_shape(h + 1) * unit * tail.sample(rng);
        if rng.random::<f64>() < cfg.spike_probability {
            let (lo, hi) = cfg.spike_factor;
            p = da[h] * rng.random_range(lo..=hi);
        }
        cents(p)
    })
}

/// DA and RT matrices of `cfg.days` rows, deterministic in `seed`.
pub fn synthesize_prices(cfg: &PriceSynthConfig, seed: u64) -> Result<(PriceMatrix, PriceMatrix), PriceError> {
    cfg.validate().map_err(PriceError::Synthesis)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut da = Vec::with_capacity(cfg.days);
    let mut rt = Vec::with_capacity(cfg.days);
    for day in 1..=cfg.days {
        let d = da_row(cfg, day, &mut rng);
        rt.push(rt_row(cfg, &d, &mut rng));
        da.push(d);
    }
    Ok((
        PriceMatrix::new(MarketKind::DayAhead, da)?,
        PriceMatrix::new(MarketKind::RealTime, rt)?,
    ))
}

/// Hour of the injected spike on the spike day.
pub const SPIKE_HOUR: usize = 9;
/// Hour of the injected trough on the spike day.
pub const TROUGH_HOUR: usize = 4;
/// RT at or above this multiple of DA counts as a spike.
pub const SPIKE_RATIO: f64 = 5.0;

/// A two-day DA/RT pair: an ordinary day followed by a day whose RT price
/// spikes to 8x DA at [`SPIKE_HOUR`], stays elevated for the hours around
/// it, and collapses to a tenth of DA at [`TROUGH_HOUR`].
pub fn spike_day(cfg: &PriceSynthConfig, seed: u64) -> Result<(PriceMatrix, PriceMatrix), PriceError> {
    cfg.validate().map_err(PriceError::Synthesis)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A late-winter weekday, away from the seasonal extremes.
    let calm = PriceSynthConfig {
        spike_probability: 0.0,
        ..cfg.clone()
    };
    let da1 = da_row(&calm, 67, &mut rng);
    let rt1 = rt_row(&calm, &da1, &mut rng);
    let da2 = da_row(&calm, 68, &mut rng);
    let mut rt2: Hourly = std::array::from_fn(|h| cents(da2[h] * rng.random_range(0.9..1.1)));
    for (hour, factor) in [(7, 1.6), (8, 2.2), (SPIKE_HOUR, 8.0), (10, 2.5), (11, 1.8)] {
        rt2[hour - 1] = cents(da2[hour - 1] * factor);
    }
    rt2[TROUGH_HOUR - 1] = cents(da2[TROUGH_HOUR - 1] * 0.1);
    Ok((
        PriceMatrix::new(MarketKind::DayAhead, vec![da1, da2])?,
        PriceMatrix::new(MarketKind::RealTime, vec![rt1, rt2])?,
    ))
}

/// Hours of a DA/RT row pair where RT is at least [`SPIKE_RATIO`] times DA.
pub fn spike_hours(da: &Hourly, rt: &Hourly) -> Vec<usize> {
    (1..=HOURS)
        .filter(|&h| da[h - 1] > 0.0 && rt[h - 1] >= SPIKE_RATIO * da[h - 1])
        .collect()
}
