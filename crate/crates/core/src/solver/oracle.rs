//! Exhaustive grid search over small windows, used to cross-check the LP.
//!
//! Every free slot but the last takes values on a uniform grid between its
//! bounds (endpoints included); the last slot absorbs the energy balance.
//! Constraint checks here are written independently of the solver's.

use thiserror::Error;

use crate::fleet::{BatteryPolicy, PevProfile};
use crate::prices::{Hourly, HOURS};

use super::ScheduleVector;

/// Largest window the oracle will enumerate.
pub const MAX_WINDOW: usize = 5;
/// Smallest accepted grid step, kWh.
pub const MIN_STEP: f64 = 0.1;

const TOL: f64 = 1e-9;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("window of {0} slots exceeds the oracle limit of {MAX_WINDOW}")]
    WindowTooLarge(usize),
    #[error("grid step {0} is below {MIN_STEP}")]
    StepTooSmall(f64),
    #[error("no grid point satisfies the constraints")]
    NoFeasiblePoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSolution {
    pub schedule: ScheduleVector,
    pub objective: f64,
    pub points_checked: usize,
}

/// Worst-case objective gap between the grid optimum and the true optimum:
/// moving each free slot by at most one step changes the objective by at
/// most `step * |c_slot|`, with the last slot absorbing the same total.
pub fn grid_error_bound(coeffs: &Hourly, profile: &PevProfile, step: f64) -> f64 {
    let window: Vec<f64> = profile
        .permissible_slots()
        .iter()
        .map(|&h| coeffs[h - 1].abs())
        .collect();
    let max = window.iter().cloned().fold(0.0, f64::max);
    step * (window.iter().sum::<f64>() + max * window.len() as f64)
}

/// Minimises `coeffs . x` over grid schedules satisfying every constraint.
/// With `frozen = Some((t0, committed))`, slots before `t0` keep their
/// committed values.
pub fn brute_force_oracle(
    coeffs: &Hourly,
    profile: &PevProfile,
    policy: &BatteryPolicy,
    frozen: Option<(usize, &ScheduleVector)>,
    step: f64,
) -> Result<OracleSolution, OracleError> {
    let len = window_hours(profile).len();
    if len > MAX_WINDOW {
        return Err(OracleError::WindowTooLarge(len));
    }
    if step.is_nan() || step < MIN_STEP {
        return Err(OracleError::StepTooSmall(step));
    }
    let hours = window_hours(profile);
    let lo = if policy.v2g_enabled { -profile.power_limit } else { 0.0 };
    let hi = profile.power_limit;

    let mut base = [0.0; HOURS];
    let mut free = Vec::new();
    for &h in &hours {
        match frozen {
            Some((t0, committed)) if h < t0 => base[h - 1] = committed.0[h - 1],
            _ => free.push(h),
        }
    }
    let mut grid = Vec::new();
    let mut v = lo;
    while v < hi - 1e-12 {
        grid.push(v);
        v += step;
    }
    grid.push(hi);

    let mut best: Option<(f64, Hourly)> = None;
    let mut checked = 0usize;
    let mut idx = vec![0usize; free.len().saturating_sub(1)];
    loop {
        let mut x = base;
        for (k, &i) in idx.iter().enumerate() {
            x[free[k] - 1] = grid[i];
        }
        if let Some(&last) = free.last() {
            let fixed: f64 = hours.iter().filter(|&&h| h != last).map(|&h| x[h - 1]).sum();
            x[last - 1] = profile.energy_need - fixed;
        }
        checked += 1;
        if feasible(&x, &hours, profile, policy, lo, hi) {
            let obj: f64 = x.iter().zip(coeffs).map(|(a, b)| a * b).sum();
            if best.as_ref().is_none_or(|(b, _)| obj < *b - 1e-12) {
                best = Some((obj, x));
            }
        }
        // Odometer increment over the grid indices.
        let mut k = 0;
        loop {
            if k == idx.len() {
                return best
                    .map(|(objective, x)| OracleSolution {
                        schedule: ScheduleVector(x),
                        objective,
                        points_checked: checked,
                    })
                    .ok_or(OracleError::NoFeasiblePoint);
            }
            idx[k] += 1;
            if idx[k] < grid.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn window_hours(profile: &PevProfile) -> Vec<usize> {
    let mut out = vec![profile.arrival];
    let mut h = profile.arrival;
    while h != profile.departure {
        h = if h == HOURS { 1 } else { h + 1 };
        out.push(h);
    }
    out
}

fn feasible(x: &Hourly, hours: &[usize], p: &PevProfile, policy: &BatteryPolicy, lo: f64, hi: f64) -> bool {
    let floor = f64::min(policy.soc_floor_fraction * p.capacity, p.soc_at_arrival);
    let mut soc = p.soc_at_arrival;
    let mut sum = 0.0;
    for &h in hours {
        let v = x[h - 1];
        if v < lo - TOL || v > hi + TOL {
            return false;
        }
        soc += v;
        sum += v;
        if soc < floor - TOL || soc > p.capacity + TOL {
            return false;
        }
    }
    (sum - p.energy_need).abs() <= TOL
}
