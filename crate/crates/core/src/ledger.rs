//! Procurement accounting: DA settlement, RT balancing of the imbalance,
//! and the four-column cost comparison.
//!
//! Quantities arrive in kWh and prices in $/MWh; the conversion happens
//! here and nowhere else. Money is held in whole cents.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Neg, Sub};

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::prices::{Hourly, HOURS};

/// A dollar amount in integer cents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
pub struct Money(i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_cents(cents: i64) -> Self {
        Money(cents)
    }

    /// Rounds a dollar value to the nearest cent, halves away from zero.
    pub fn from_dollars(dollars: f64) -> Self {
        Money((dollars * 100.0).round() as i64)
    }

    pub fn cents(self) -> i64 {
        self.0
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Display form at $0.1 precision, e.g. `$4,308.9`.
    pub fn to_tenths(self) -> String {
        let tenths = (self.0 as f64 / 10.0).round() as i64;
        let sign = if tenths < 0 { "-" } else { "" };
        let abs = tenths.unsigned_abs();
        let whole = (abs / 10).to_string();
        let mut grouped = String::new();
        for (i, ch) in whole.chars().enumerate() {
            if i > 0 && (whole.len() - i).is_multiple_of(3) {
                grouped.push(',');
            }
            grouped.push(ch);
        }
        format!("{sign}${grouped}.{}", abs % 10)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.dollars())
    }
}

impl Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl AddAssign for Money {
    fn add_assign(&mut self, rhs: Money) {
        self.0 += rhs.0;
    }
}

impl Sub for Money {
    type Output = Money;
    fn sub(self, rhs: Money) -> Money {
        Money(self.0 - rhs.0)
    }
}

impl Neg for Money {
    type Output = Money;
    fn neg(self) -> Money {
        Money(-self.0)
    }
}

impl Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum LedgerError {
    #[error("{name} has {found} entries, expected {HOURS}")]
    Length { name: &'static str, found: usize },
    #[error("{name} has a non-finite entry at hour {hour}")]
    NotFinite { name: &'static str, hour: usize },
}

fn hourly(name: &'static str, v: &[f64]) -> Result<Hourly, LedgerError> {
    let arr: Hourly = v.try_into().map_err(|_| LedgerError::Length { name, found: v.len() })?;
    if let Some(h) = arr.iter().position(|x| !x.is_finite()) {
        return Err(LedgerError::NotFinite { name, hour: h + 1 });
    }
    Ok(arr)
}

/// One day's settlement.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DayLedger {
    pub da_purchase: Hourly,
    pub da_prices: Hourly,
    pub rt_prices: Hourly,
    pub realized_demand: Hourly,
    pub imbalance: Hourly,
    pub sellback: bool,
    pub da_cost: Money,
    pub rt_cost: Money,
    pub total_cost: Money,
}

fn price_energy(prices: &Hourly, kwh: impl Fn(usize) -> f64) -> f64 {
    (0..HOURS).map(|h| prices[h] * kwh(h)).sum::<f64>() / 1000.0
}

/// Settles a day: the DA purchase at DA prices, the imbalance at RT
/// prices. Without sell-back a surplus earns nothing.
pub fn settle_day(
    da_purchase: &[f64],
    realized_demand: &[f64],
    da_prices: &[f64],
    rt_prices: &[f64],
    sellback: bool,
) -> Result<DayLedger, LedgerError> {
    let da_purchase = hourly("da_purchase", da_purchase)?;
    let realized_demand = hourly("realized_demand", realized_demand)?;
    let da_prices = hourly("da_prices", da_prices)?;
    let rt_prices = hourly("rt_prices", rt_prices)?;
    let imbalance: Hourly = std::array::from_fn(|h| realized_demand[h] - da_purchase[h]);
    let da_cost = Money::from_dollars(price_energy(&da_prices, |h| da_purchase[h]));
    let rt_cost = Money::from_dollars(price_energy(&rt_prices, |h| {
        if sellback {
            imbalance[h]
        } else {
            imbalance[h].max(0.0)
        }
    }));
    Ok(DayLedger {
        da_purchase,
        da_prices,
        rt_prices,
        realized_demand,
        imbalance,
        sellback,
        da_cost,
        rt_cost,
        total_cost: da_cost + rt_cost,
    })
}

/// Cost had the DA purchase matched `realized_demand` exactly.
pub fn ideal_cost(realized_demand: &[f64], da_prices: &[f64]) -> Result<Money, LedgerError> {
    let demand = hourly("realized_demand", realized_demand)?;
    let prices = hourly("da_prices", da_prices)?;
    Ok(Money::from_dollars(price_energy(&prices, |h| demand[h])))
}

/// The four cost columns. The coordinated columns are `None` when the
/// fleet has no flexible load.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CostReport {
    pub ideal: Money,
    pub real_uncoordinated: Money,
    pub after_p1: Option<Money>,
    pub after_p2: Option<Money>,
}

impl CostReport {
    /// Column-wise exact sum; a coordinated column is `None` if any day's is.
    pub fn total<'a>(days: impl IntoIterator<Item = &'a CostReport> + Clone) -> CostReport {
        CostReport {
            ideal: days.clone().into_iter().map(|d| d.ideal).sum(),
            real_uncoordinated: days.clone().into_iter().map(|d| d.real_uncoordinated).sum(),
            after_p1: days.clone().into_iter().map(|d| d.after_p1).sum(),
            after_p2: days.into_iter().map(|d| d.after_p2).sum(),
        }
    }

    pub fn column_text(value: Option<Money>) -> String {
        value.map(Money::to_tenths).unwrap_or_else(|| "N/A".into())
    }
}
