//! Households and their plug-in vehicles: profiles, validation, synthesis
//! from parametric distributions, and CSV ingestion.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prices::{wrap_hour, Hourly, HOURS};

/// Pack size the arrival-SOC rule is written against (kWh).
pub const NOMINAL_PACK_KWH: f64 = 24.0;

const MAX_RESAMPLES: usize = 1000;
const FEAS_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ProfileViolation {
    #[error("{which} hour {hour} is outside 1..=24")]
    HourOutOfRange { which: &'static str, hour: usize },
    #[error("power limit must be positive, got {0}")]
    PowerLimit(f64),
    #[error("capacity must be positive, got {0}")]
    Capacity(f64),
    #[error("energy need must be finite and non-negative, got {0}")]
    EnergyNeed(f64),
    #[error("energy need {need} kWh exceeds deliverable {deliverable} kWh over the window")]
    Undeliverable { need: f64, deliverable: f64 },
    #[error("energy need {0} kWh exceeds the {NOMINAL_PACK_KWH} kWh arrival-SOC rule")]
    ArrivalSoc(f64),
    #[error("arrival SOC {soc} kWh outside [0, {capacity}]")]
    SocOutOfRange { soc: f64, capacity: f64 },
    #[error("arrival SOC {soc} + need {need} exceeds capacity {capacity}")]
    OverFill { soc: f64, need: f64, capacity: f64 },
    #[error("baseline entry at hour {hour} is negative or not finite: {value}")]
    Baseline { hour: usize, value: f64 },
}

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("fleet config: {0}")]
    Config(String),
    #[error("user {user}: no feasible profile after {MAX_RESAMPLES} draws (last: {last})")]
    ConfigInfeasible { user: usize, last: ProfileViolation },
    #[error("fleet row {row}: {violation}")]
    Row { row: usize, violation: ProfileViolation },
    #[error("fleet row {row}: expected {expected} fields, found {found}")]
    FieldCount { row: usize, expected: usize, found: usize },
    #[error("fleet row {row}, field {field}: `{value}` is not a number")]
    NotNumeric { row: usize, field: usize, value: String },
    #[error("fleet data is empty")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Arrival SOC in kWh: the percentage `100 (1 - E/24)` applied to the pack.
/// At the nominal 24 kWh pack this is exactly `capacity - energy_need`.
pub fn soc_at_arrival(energy_need: f64, capacity: f64) -> Result<f64, ProfileViolation> {
    if !(energy_need.is_finite() && energy_need >= 0.0) {
        return Err(ProfileViolation::EnergyNeed(energy_need));
    }
    if energy_need > NOMINAL_PACK_KWH {
        return Err(ProfileViolation::ArrivalSoc(energy_need));
    }
    if capacity == NOMINAL_PACK_KWH {
        Ok(capacity - energy_need)
    } else {
        Ok(capacity * (1.0 - energy_need / NOMINAL_PACK_KWH))
    }
}

/// One vehicle's daily availability and energy requirement.
///
/// The permissible window runs from `arrival` to `departure` inclusive and
/// wraps through hour 24 when `departure < arrival`. Running SOC is tracked
/// along the window in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PevProfile {
    pub arrival: usize,
    pub departure: usize,
    /// kWh to deliver within the window.
    pub energy_need: f64,
    /// kW; with one-hour slots also the per-slot energy bound.
    pub power_limit: f64,
    pub capacity: f64,
    pub soc_at_arrival: f64,
}

impl PevProfile {
    /// Builds a profile whose arrival SOC follows [`soc_at_arrival`].
    pub fn new(
        arrival: usize,
        departure: usize,
        energy_need: f64,
        power_limit: f64,
        capacity: f64,
    ) -> Result<Self, ProfileViolation> {
        let soc = soc_at_arrival(energy_need, capacity)?;
        let profile = Self {
            arrival,
            departure,
            energy_need,
            power_limit,
            capacity,
            soc_at_arrival: soc,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), ProfileViolation> {
        for (which, hour) in [("arrival", self.arrival), ("departure", self.departure)] {
            if !(1..=HOURS).contains(&hour) {
                return Err(ProfileViolation::HourOutOfRange { which, hour });
            }
        }
        if !(self.power_limit.is_finite() && self.power_limit > 0.0) {
            return Err(ProfileViolation::PowerLimit(self.power_limit));
        }
        if !(self.capacity.is_finite() && self.capacity > 0.0) {
            return Err(ProfileViolation::Capacity(self.capacity));
        }
        if !(self.energy_need.is_finite() && self.energy_need >= 0.0) {
            return Err(ProfileViolation::EnergyNeed(self.energy_need));
        }
        let deliverable = self.power_limit * self.window_len() as f64;
        if self.energy_need > deliverable + FEAS_TOL {
            return Err(ProfileViolation::Undeliverable {
                need: self.energy_need,
                deliverable,
            });
        }
        let soc = self.soc_at_arrival;
        if !(soc.is_finite() && soc >= -FEAS_TOL && soc <= self.capacity + FEAS_TOL) {
            return Err(ProfileViolation::SocOutOfRange {
                soc,
                capacity: self.capacity,
            });
        }
        if soc + self.energy_need > self.capacity + FEAS_TOL {
            return Err(ProfileViolation::OverFill {
                soc,
                need: self.energy_need,
                capacity: self.capacity,
            });
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        if self.departure >= self.arrival {
            self.departure - self.arrival + 1
        } else {
            HOURS - self.arrival + 1 + self.departure
        }
    }

    /// Hours of the permissible window in charging order.
    pub fn permissible_slots(&self) -> Vec<usize> {
        (0..self.window_len())
            .map(|k| wrap_hour((self.arrival + k) as i64))
            .collect()
    }

    /// Position of `hour` within the window, if connected.
    pub fn window_position(&self, hour: usize) -> Option<usize> {
        if !(1..=HOURS).contains(&hour) {
            return None;
        }
        let offset = (hour + HOURS - self.arrival) % HOURS;
        (offset < self.window_len()).then_some(offset)
    }

    pub fn is_connected(&self, hour: usize) -> bool {
        self.window_position(hour).is_some()
    }
}

/// Inflexible household consumption, kWh per slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Household {
    pub baseline: Hourly,
}

impl Household {
    pub fn new(baseline: Hourly) -> Result<Self, ProfileViolation> {
        if let Some(h) = baseline.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ProfileViolation::Baseline {
                hour: h + 1,
                value: baseline[h],
            });
        }
        Ok(Self { baseline })
    }
}

/// A subscriber: household load plus, optionally, a vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub household: Household,
    pub pev: Option<PevProfile>,
}

/// How a vehicle's battery may be used by the schedulers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryPolicy {
    pub v2g_enabled: bool,
    pub soc_floor_fraction: f64,
}

impl Default for BatteryPolicy {
    fn default() -> Self {
        Self {
            v2g_enabled: true,
            soc_floor_fraction: 0.2,
        }
    }
}

impl BatteryPolicy {
    /// Lowest SOC the schedule may reach. A vehicle that arrives below the
    /// floor is held at its arrival level instead of being forced above it.
    pub fn soc_floor(&self, profile: &PevProfile) -> f64 {
        (self.soc_floor_fraction * profile.capacity).min(profile.soc_at_arrival)
    }

    pub fn min_slot_energy(&self, profile: &PevProfile) -> f64 {
        if self.v2g_enabled {
            -profile.power_limit
        } else {
            0.0
        }
    }
}

/// Parametric draw, in hour-slot units for arrival/departure and kWh for
/// energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Point {
        value: f64,
    },
    /// Normal truncated to `[min, max]` by rejection.
    Normal {
        mean: f64,
        sd: f64,
        min: f64,
        max: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
}

impl Distribution {
    fn validate(&self, name: &str) -> Result<(), FleetError> {
        let ok = match *self {
            Distribution::Point { value } => value.is_finite(),
            Distribution::Normal { mean, sd, min, max } => {
                mean.is_finite() && sd.is_finite() && sd >= 0.0 && min <= max && min.is_finite() && max.is_finite()
            }
            Distribution::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
        };
        if ok {
            Ok(())
        } else {
            Err(FleetError::Config(format!(
                "{name} distribution is malformed: {self:?}"
            )))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Point { value } => value,
            Distribution::Normal { mean, sd, min, max } => {
                if sd == 0.0 {
                    return mean.clamp(min, max);
                }
                let normal = Normal::new(mean, sd).expect("validated sd");
                for _ in 0..MAX_RESAMPLES {
                    let v = normal.sample(rng);
                    if (min..=max).contains(&v) {
                        return v;
                    }
                }
                mean.clamp(min, max)
            }
            Distribution::Uniform { low, high } => {
                if low == high {
                    low
                } else {
                    rng.random_range(low..high)
                }
            }
        }
    }
}

/// Morning and evening peaked household consumption, kWh per hour slot.
pub const DEFAULT_BASELINE: Hourly = [
    0.45, 0.40, 0.38, 0.37, 0.38, 0.45, 0.70, 0.95, 0.85, 0.65, 0.55, 0.55, //
    0.55, 0.52, 0.52, 0.58, 0.75, 1.05, 1.35, 1.45, 1.30, 1.05, 0.80, 0.58,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub n_users: usize,
    pub arrival: Distribution,
    pub departure: Distribution,
    pub energy: Distribution,
    pub charger_kw: f64,
    pub battery_kwh: f64,
    pub v2g_enabled: bool,
    pub soc_floor_fraction: f64,
    pub baseline_template: Hourly,
    /// Per-user, per-slot multiplicative noise drawn from `U[low, high)`.
    pub baseline_noise: (f64, f64),
    pub with_pevs: bool,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            n_users: 50,
            arrival: Distribution::Normal {
                mean: 18.0,
                sd: 2.0,
                min: 12.0,
                max: 24.0,
            },
            departure: Distribution::Normal {
                mean: 7.5,
                sd: 1.5,
                min: 3.0,
                max: 12.0,
            },
            energy: Distribution::Uniform { low: 4.0, high: 16.0 },
            charger_kw: 1.8,
            battery_kwh: NOMINAL_PACK_KWH,
            v2g_enabled: true,
            soc_floor_fraction: 0.2,
            baseline_template: DEFAULT_BASELINE,
            baseline_noise: (0.8, 1.2),
            with_pevs: true,
        }
    }
}

impl FleetConfig {
    pub fn validate(&self) -> Result<(), FleetError> {
        if self.n_users == 0 {
            return Err(FleetError::Config("n_users must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.soc_floor_fraction) {
            return Err(FleetError::Config(format!(
                "soc_floor_fraction must lie in [0, 1), got {}",
                self.soc_floor_fraction
            )));
        }
        if !(self.charger_kw.is_finite() && self.charger_kw > 0.0) {
            return Err(FleetError::Config(format!(
                "charger_kw must be positive, got {}",
                self.charger_kw
            )));
        }
        if !(self.battery_kwh.is_finite() && self.battery_kwh > 0.0) {
            return Err(FleetError::Config(format!(
                "battery_kwh must be positive, got {}",
                self.battery_kwh
            )));
        }
        let (lo, hi) = self.baseline_noise;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(FleetError::Config(format!(
                "baseline_noise must satisfy 0 <= low <= high, got {:?}",
                self.baseline_noise
            )));
        }
        Household::new(self.baseline_template).map_err(|v| FleetError::Config(format!("baseline_template: {v}")))?;
        self.arrival.validate("arrival")?;
        self.departure.validate("departure")?;
        self.energy.validate("energy")?;
        Ok(())
    }

    pub fn battery_policy(&self) -> BatteryPolicy {
        BatteryPolicy {
            v2g_enabled: self.v2g_enabled,
            soc_floor_fraction: self.soc_floor_fraction,
        }
    }
}

fn slot_from_draw(v: f64) -> usize {
    wrap_hour(v.round() as i64)
}

/// Draws `n_users` households (and vehicles, unless disabled), resampling a
/// user's vehicle until it satisfies every profile invariant.
pub fn synthesize_fleet(cfg: &FleetConfig, seed: u64) -> Result<Vec<User>, FleetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users = Vec::with_capacity(cfg.n_users);
    for user in 0..cfg.n_users {
        let pev = if cfg.with_pevs {
            let mut last = None;
            let mut found = None;
            for _ in 0..MAX_RESAMPLES {
                let arrival = slot_from_draw(cfg.arrival.sample(&mut rng));
                let departure = slot_from_draw(cfg.departure.sample(&mut rng));
                let energy = cfg.energy.sample(&mut rng);
                match PevProfile::new(arrival, departure, energy, cfg.charger_kw, cfg.battery_kwh) {
                    Ok(p) => {
                        found = Some(p);
                        break;
                    }
                    Err(v) => last = Some(v),
                }
            }
            match found {
                Some(p) => Some(p),
                None => {
                    return Err(FleetError::ConfigInfeasible {
                        user,
                        last: last.expect("at least one draw"),
                    })
                }
            }
        } else {
            None
        };
        let (lo, hi) = cfg.baseline_noise;
        let mut baseline = cfg.baseline_template;
        for b in baseline.iter_mut() {
            let factor = if lo < hi { rng.random_range(lo..hi) } else { lo };
            *b *= factor;
        }
        users.push(User {
            household: Household { baseline },
            pev,
        });
    }
    Ok(users)
}

const FLEET_FIELDS: usize = 5 + HOURS;

/// Parses `arrival, departure, energy_kWh, power_kW, capacity_kWh` followed
/// by 24 baseline values per row. A non-numeric first row is a header.
pub fn load_fleet<R: BufRead>(source: R) -> Result<Vec<User>, FleetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut users = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = idx + 1;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if idx == 0 && record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if record.len() != FLEET_FIELDS {
            return Err(FleetError::FieldCount {
                row,
                expected: FLEET_FIELDS,
                found: record.len(),
            });
        }
        let mut values = [0.0; FLEET_FIELDS];
        for (k, field) in record.iter().enumerate() {
            values[k] = field.parse::<f64>().map_err(|_| FleetError::NotNumeric {
                row,
                field: k + 1,
                value: field.to_string(),
            })?;
        }
        let hour = |v: f64, which: &'static str| -> Result<usize, FleetError> {
            if v.fract() == 0.0 && (1.0..=HOURS as f64).contains(&v) {
                Ok(v as usize)
            } else {
                Err(FleetError::Row {
                    row,
                    violation: ProfileViolation::HourOutOfRange {
                        which,
                        hour: if v.is_finite() && v >= 0.0 { v as usize } else { 0 },
                    },
                })
            }
        };
        let arrival = hour(values[0], "arrival")?;
        let departure = hour(values[1], "departure")?;
        let pev = PevProfile::new(arrival, departure, values[2], values[3], values[4])
            .map_err(|violation| FleetError::Row { row, violation })?;
        let mut baseline = [0.0; HOURS];
        baseline.copy_from_slice(&values[5..]);
        let household = Household::new(baseline).map_err(|violation| FleetError::Row { row, violation })?;
        users.push(User {
            household,
            pev: Some(pev),
        });
    }
    if users.is_empty() {
        return Err(FleetError::Empty);
    }
    Ok(users)
}

pub fn load_fleet_path(path: &Path) -> Result<Vec<User>, FleetError> {
    let file = std::fs::File::open(path).map_err(|source| FleetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_fleet(std::io::BufReader::new(file))
}

/// Writes users that own a vehicle in the [`load_fleet`] layout.
pub fn write_fleet_csv<W: Write>(users: &[User], out: W) -> Result<(), FleetError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let mut header = vec![
        "arrival".to_string(),
        "departure".into(),
        "energy_kwh".into(),
        "power_kw".into(),
        "capacity_kwh".into(),
    ];
    header.extend((1..=HOURS).map(|h| format!("base_h{h}")));
    w.write_record(&header)?;
    for user in users {
        let Some(p) = &user.pev else { continue };
        let mut rec = vec![
            p.arrival.to_string(),
            p.departure.to_string(),
            p.energy_need.to_string(),
            p.power_limit.to_string(),
            p.capacity.to_string(),
        ];
        rec.extend(user.household.baseline.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| FleetError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}
