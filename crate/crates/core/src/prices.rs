//! Hourly market prices: ingestion, per-hour volatility, the online altering
//! threshold, and the day-ahead clearing model.
//!
//! Hours are 1-based (`1..=24`) everywhere a value crosses a public
//! boundary; arrays are indexed by `hour - 1`.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HOURS: usize = 24;

pub type Hourly = [f64; HOURS];

#[derive(Debug, Error)]
pub enum PriceError {
    #[error("price data is empty")]
    Empty,
    #[error("row {row}: expected {HOURS} fields, found {found}")]
    FieldCount { row: usize, found: usize },
    #[error("row {row}, field {field}: `{value}` is not a finite number")]
    NotNumeric { row: usize, field: usize, value: String },
    #[error("hour {0} is outside 1..=24")]
    HourOutOfRange(usize),
    #[error("threshold window must satisfy 1 <= K <= 23, got {0}")]
    BadWindow(usize),
    #[error("dead-band must be a finite non-negative price, got {0}")]
    BadDeadband(f64),
    #[error("observed real-time prices cover {have} hours, need {need}")]
    MissingObservation { have: usize, need: usize },
    #[error("hourly sigma at anchor hour {hour} is zero; threshold weights cannot be normalised")]
    DegenerateWeights { hour: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("price synthesis: {0}")]
    Synthesis(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarketKind {
    #[serde(rename = "DA")]
    DayAhead,
    #[serde(rename = "RT")]
    RealTime,
}

impl fmt::Display for MarketKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MarketKind::DayAhead => write!(f, "DA"),
            MarketKind::RealTime => write!(f, "RT"),
        }
    }
}

/// Day-major grid of hourly prices in $/MWh.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceMatrix {
    market: MarketKind,
    rows: Vec<Hourly>,
}

impl PriceMatrix {
    pub fn new(market: MarketKind, rows: Vec<Hourly>) -> Result<Self, PriceError> {
        if rows.is_empty() {
            return Err(PriceError::Empty);
        }
        for (d, row) in rows.iter().enumerate() {
            if let Some(h) = row.iter().position(|v| !v.is_finite()) {
                return Err(PriceError::NotNumeric {
                    row: d + 1,
                    field: h + 1,
                    value: row[h].to_string(),
                });
            }
        }
        Ok(Self { market, rows })
    }

    pub fn market(&self) -> MarketKind {
        self.market
    }

    pub fn days(&self) -> usize {
        self.rows.len()
    }

    /// Prices for a 1-based day.
    pub fn day(&self, day: usize) -> Option<&Hourly> {
        day.checked_sub(1).and_then(|d| self.rows.get(d))
    }

    pub fn rows(&self) -> &[Hourly] {
        &self.rows
    }

    /// Price at a 1-based (day, hour).
    pub fn get(&self, day: usize, hour: usize) -> Option<f64> {
        if !(1..=HOURS).contains(&hour) {
            return None;
        }
        self.day(day).map(|r| r[hour - 1])
    }

    pub fn from_path(path: &Path, market: MarketKind) -> Result<Self, PriceError> {
        let file = std::fs::File::open(path).map_err(|source| PriceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        load_price_matrix(std::io::BufReader::new(file), market)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PriceError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record((1..=HOURS).map(|h| format!("h{h}")))?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|source| PriceError::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Reads one day per row, 24 comma-separated prices. A single leading row
/// whose first field is not numeric is treated as a header.
pub fn load_price_matrix<R: BufRead>(source: R, market: MarketKind) -> Result<PriceMatrix, PriceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = idx + 1;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if idx == 0 && record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if record.len() != HOURS {
            return Err(PriceError::FieldCount {
                row: row_no,
                found: record.len(),
            });
        }
        let mut row = [0.0; HOURS];
        for (h, field) in record.iter().enumerate() {
            row[h] = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| PriceError::NotNumeric {
                    row: row_no,
                    field: h + 1,
                    value: field.to_string(),
                })?;
        }
        rows.push(row);
    }
    PriceMatrix::new(market, rows)
}

/// Population standard deviation of each hour-of-day column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HourlyStd {
    pub sigma: Hourly,
}

impl HourlyStd {
    pub fn at(&self, hour: usize) -> f64 {
        self.sigma[hour - 1]
    }
}

/// Welford's single-pass update, divided by D rather than D - 1.
pub fn hourly_std(matrix: &PriceMatrix) -> HourlyStd {
    let mut mean = [0.0; HOURS];
    let mut m2 = [0.0; HOURS];
    for (k, row) in matrix.rows().iter().enumerate() {
        let n = (k + 1) as f64;
        for h in 0..HOURS {
            let delta = row[h] - mean[h];
            mean[h] += delta / n;
            m2[h] += delta * (row[h] - mean[h]);
        }
    }
    let d = matrix.days() as f64;
    let mut sigma = [0.0; HOURS];
    for h in 0..HOURS {
        sigma[h] = (m2[h] / d).max(0.0).sqrt();
    }
    HourlyStd { sigma }
}

/// Maps any signed slot index onto `1..=24` (so 0 → 24, -2 → 22).
pub fn wrap_hour(i: i64) -> usize {
    ((i - 1).rem_euclid(HOURS as i64) + 1) as usize
}

/// Prices for the day being simulated plus the previous day's realised RT
/// prices, which feed the threshold window at early hours.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayPrices {
    pub da: Hourly,
    pub rt: Hourly,
    pub rt_prev_day: Hourly,
}

impl DayPrices {
    /// Day `day` (1-based) of a DA/RT matrix pair. The previous day's RT row
    /// is used when it exists; on the first day the day's own DA prices stand
    /// in for it.
    pub fn from_matrices(da: &PriceMatrix, rt: &PriceMatrix, day: usize) -> Option<Self> {
        let da_row = *da.day(day)?;
        let rt_row = *rt.day(day)?;
        let prev = if day > 1 { *rt.day(day - 1)? } else { da_row };
        Some(Self {
            da: da_row,
            rt: rt_row,
            rt_prev_day: prev,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub window_k: usize,
    pub deadband: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            window_k: 3,
            deadband: 0.0,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<(), PriceError> {
        if !(1..=23).contains(&self.window_k) {
            return Err(PriceError::BadWindow(self.window_k));
        }
        if !(self.deadband.is_finite() && self.deadband >= 0.0) {
            return Err(PriceError::BadDeadband(self.deadband));
        }
        Ok(())
    }
}

/// Weighted moving-average RT threshold over hours `t-K ..= t`.
///
/// Weights are `sigma(i) / sigma(t-K)`; the (K+1)-term sum is divided by K.
/// Indices before hour 1 read `rt_prev_day`, the rest read `observed_rt`,
/// which must hold at least the first `t` hours of the current day.
pub fn threshold_gamma(
    day: &DayPrices,
    sigma: &HourlyStd,
    cfg: &ThresholdConfig,
    t: usize,
    observed_rt: &[f64],
) -> Result<f64, PriceError> {
    cfg.validate()?;
    if !(1..=HOURS).contains(&t) {
        return Err(PriceError::HourOutOfRange(t));
    }
    if observed_rt.len() < t {
        return Err(PriceError::MissingObservation {
            have: observed_rt.len(),
            need: t,
        });
    }
    let k = cfg.window_k as i64;
    let t = t as i64;
    let anchor = wrap_hour(t - k);
    let anchor_sigma = sigma.at(anchor);
    if anchor_sigma == 0.0 {
        return Err(PriceError::DegenerateWeights { hour: anchor });
    }
    let mut acc = 0.0;
    for i in (t - k)..=t {
        let hour = wrap_hour(i);
        let price = if i >= 1 {
            observed_rt[(i - 1) as usize]
        } else {
            day.rt_prev_day[hour - 1]
        };
        acc += sigma.at(hour) / anchor_sigma * price;
    }
    Ok(acc / k as f64)
}

/// Cleared DA quantities: `required(t) + u_t`, `u_t ~ U[-0.2 r, 0.2 r)`.
///
/// Draws come from ChaCha8 seeded with `seed`, one draw per hour in order,
/// so the same seed reproduces the same vector bit for bit.
pub fn clear_da_demand(required: &Hourly, seed: u64) -> Hourly {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = [0.0; HOURS];
    for (o, &r) in out.iter_mut().zip(required) {
        let span = 0.2 * r;
        *o = if span > 0.0 {
            r + rng.random_range(-span..span)
        } else {
            // Burn the draw so later hours see the same stream.
            let _: f64 = rng.random();
            r
        };
    }
    out
}
