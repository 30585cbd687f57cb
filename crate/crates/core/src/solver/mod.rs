//! Per-user schedule problems.
//!
//! Shaping picks a vehicle schedule minimising its inner product with the
//! mismatch `own baseline + others - DA purchase`. Altering re-solves the
//! same problem from slot `t0` onward with the earlier slots frozen and a
//! weighted term for the aggregate at `t0`. Both are linear programs over
//! the vehicle's permissible window; [`lp`] solves them.

pub mod lp;
pub mod oracle;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fleet::{BatteryPolicy, PevProfile, ProfileViolation};
use crate::prices::{Hourly, HOURS};
use lp::{LinearProgram, LpError, Relation};

/// Feasibility tolerance for schedule constraints, kWh.
pub const CONSTRAINT_TOL: f64 = 1e-9;

/// Signed energy per one-hour slot (kWh); negative values discharge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleVector(pub Hourly);

impl Default for ScheduleVector {
    fn default() -> Self {
        Self([0.0; HOURS])
    }
}

impl ScheduleVector {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn at(&self, hour: usize) -> f64 {
        self.0[hour - 1]
    }

    pub fn slots(&self) -> &Hourly {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Plug-and-charge: full power from arrival until the need is met.
    pub fn uncoordinated(profile: &PevProfile) -> Self {
        let mut out = [0.0; HOURS];
        let mut remaining = profile.energy_need;
        for hour in profile.permissible_slots() {
            if remaining <= 0.0 {
                break;
            }
            let e = remaining.min(profile.power_limit);
            out[hour - 1] = e;
            remaining -= e;
        }
        Self(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+1")]
    Plus,
    #[serde(rename = "-1")]
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sign::Plus => "+1",
            Sign::Minus => "-1",
        })
    }
}

/// Which part of the altering objective the sign `b` multiplies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BScope {
    /// `b` multiplies the whole bracket, tracking term included.
    #[default]
    Full,
    /// `b` flips only the instantaneous `t0` term.
    InstantaneousOnly,
}

impl std::str::FromStr for BScope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(BScope::Full),
            "instantaneous-only" => Ok(BScope::InstantaneousOnly),
            other => Err(format!("unknown b scope `{other}` (full | instantaneous-only)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapingInput {
    pub target_da: Hourly,
    pub others_aggregate: Hourly,
    pub own_baseline: Hourly,
    pub profile: PevProfile,
}

impl ShapingInput {
    /// `own_baseline + others_aggregate - target_da`.
    pub fn cost_vector(&self) -> Hourly {
        let mut c = [0.0; HOURS];
        for (h, ch) in c.iter_mut().enumerate() {
            *ch = self.own_baseline[h] + self.others_aggregate[h] - self.target_da[h];
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlteringInput {
    pub shaping: ShapingInput,
    pub t0: usize,
    /// The schedule in force; its slots before `t0` are frozen.
    pub committed: ScheduleVector,
    pub lambda: f64,
    pub b_sign: Sign,
    pub b_scope: BScope,
}

impl AlteringInput {
    fn validate(&self) -> Result<(), SolveError> {
        if !(self.lambda.is_finite() && (0.0..=1.0).contains(&self.lambda)) {
            return Err(SolveError::Contract(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(1..=HOURS).contains(&self.t0) {
            return Err(SolveError::Contract(format!("t0 {} outside 1..=24", self.t0)));
        }
        Ok(())
    }

    /// Linear coefficients of the altering objective (constant dropped).
    pub fn coefficients(&self) -> Hourly {
        let base = self.shaping.cost_vector();
        let b = self.b_sign.value();
        let tracking = match self.b_scope {
            BScope::Full => b * self.lambda,
            BScope::InstantaneousOnly => self.lambda,
        };
        let mut c = base.map(|v| tracking * v);
        c[self.t0 - 1] += b * (1.0 - self.lambda);
        c
    }

    /// The part of the objective that does not depend on the vehicle.
    pub fn objective_constant(&self) -> f64 {
        let h = self.t0 - 1;
        self.b_sign.value() * (1.0 - self.lambda) * (self.shaping.others_aggregate[h] + self.shaping.own_baseline[h])
    }

    /// Stored energy just before `t0`, following the window order, when the
    /// vehicle is connected at `t0`.
    pub fn soc_before_t0(&self) -> Option<f64> {
        let p = &self.shaping.profile;
        let pos = p.window_position(self.t0)?;
        let used: f64 = p.permissible_slots()[..pos].iter().map(|&h| self.committed.at(h)).sum();
        Some(p.soc_at_arrival + used)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    EnergyBalance,
    PowerBound,
    OutsideWindow,
    SocFloor,
    SocCeiling,
    PrefixFreeze,
}

#[derive(Clone, Debug, Error, PartialEq)]
#[error("{kind:?} violated{}: {detail}", hour.map(|h| format!(" at hour {h}")).unwrap_or_default())]
pub struct ScheduleViolation {
    pub kind: ConstraintKind,
    pub hour: Option<usize>,
    pub detail: String,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("invalid profile: {0}")]
    Profile(#[from] ProfileViolation),
    #[error("infeasible: {0}")]
    Infeasible(ScheduleViolation),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("linear program failed: {0}")]
    Lp(LpError),
    #[error("solution failed verification: {0}")]
    Verification(ScheduleViolation),
}

/// Inner product of a schedule with a coefficient vector.
pub fn dot(schedule: &ScheduleVector, coeffs: &Hourly) -> f64 {
    schedule.0.iter().zip(coeffs).map(|(a, b)| a * b).sum()
}

pub fn shaping_objective(schedule: &ScheduleVector, input: &ShapingInput) -> f64 {
    dot(schedule, &input.cost_vector())
}

pub fn altering_objective(schedule: &ScheduleVector, input: &AlteringInput) -> f64 {
    dot(schedule, &input.coefficients()) + input.objective_constant()
}

/// Checks every schedule constraint: zero outside the window, power bounds,
/// energy balance, running SOC between floor and capacity, and (when given)
/// bit-exact agreement with `frozen` on slots before its hour.
pub fn check_schedule(
    schedule: &ScheduleVector,
    profile: &PevProfile,
    policy: &BatteryPolicy,
    frozen: Option<(usize, &ScheduleVector)>,
) -> Result<(), ScheduleViolation> {
    let violation = |kind, hour, detail: String| ScheduleViolation { kind, hour, detail };
    for hour in 1..=HOURS {
        let v = schedule.at(hour);
        if !v.is_finite() {
            return Err(violation(
                ConstraintKind::PowerBound,
                Some(hour),
                format!("{v} is not finite"),
            ));
        }
        if !profile.is_connected(hour) && v != 0.0 {
            return Err(violation(
                ConstraintKind::OutsideWindow,
                Some(hour),
                format!("{v} kWh scheduled while away"),
            ));
        }
    }
    if let Some((t0, committed)) = frozen {
        for hour in 1..t0.min(HOURS + 1) {
            if schedule.at(hour).to_bits() != committed.at(hour).to_bits() {
                return Err(violation(
                    ConstraintKind::PrefixFreeze,
                    Some(hour),
                    format!("{} != committed {}", schedule.at(hour), committed.at(hour)),
                ));
            }
        }
    }
    let lo = policy.min_slot_energy(profile);
    let hi = profile.power_limit;
    let floor = policy.soc_floor(profile);
    let mut soc = profile.soc_at_arrival;
    let mut total = 0.0;
    for hour in profile.permissible_slots() {
        let v = schedule.at(hour);
        if v < lo - CONSTRAINT_TOL || v > hi + CONSTRAINT_TOL {
            return Err(violation(
                ConstraintKind::PowerBound,
                Some(hour),
                format!("{v} outside [{lo}, {hi}]"),
            ));
        }
        soc += v;
        total += v;
        if soc < floor - CONSTRAINT_TOL {
            return Err(violation(
                ConstraintKind::SocFloor,
                Some(hour),
                format!("SOC {soc} below {floor}"),
            ));
        }
        if soc > profile.capacity + CONSTRAINT_TOL {
            return Err(violation(
                ConstraintKind::SocCeiling,
                Some(hour),
                format!("SOC {soc} above {}", profile.capacity),
            ));
        }
    }
    if (total - profile.energy_need).abs() > CONSTRAINT_TOL {
        return Err(violation(
            ConstraintKind::EnergyBalance,
            None,
            format!("delivered {total} kWh, need {}", profile.energy_need),
        ));
    }
    Ok(())
}

/// Optimal shaping schedule for one user.
pub fn solve_shaping(input: &ShapingInput, policy: &BatteryPolicy) -> Result<ScheduleVector, SolveError> {
    solve_window(&input.profile, policy, &input.cost_vector(), None)
}

/// Optimal altering schedule for one user at slot `t0`.
pub fn solve_altering(input: &AlteringInput, policy: &BatteryPolicy) -> Result<ScheduleVector, SolveError> {
    input.validate()?;
    let profile = &input.shaping.profile;
    // The frozen prefix itself must respect the vehicle's bounds.
    let lo = policy.min_slot_energy(profile);
    for hour in 1..input.t0 {
        let v = input.committed.at(hour);
        let ok = if profile.is_connected(hour) {
            v >= lo - CONSTRAINT_TOL && v <= profile.power_limit + CONSTRAINT_TOL
        } else {
            v == 0.0
        };
        if !ok {
            return Err(SolveError::Contract(format!(
                "committed value {v} at hour {hour} violates slot bounds"
            )));
        }
    }
    solve_window(
        profile,
        policy,
        &input.coefficients(),
        Some((input.t0, &input.committed)),
    )
}

fn solve_window(
    profile: &PevProfile,
    policy: &BatteryPolicy,
    coeffs: &Hourly,
    frozen: Option<(usize, &ScheduleVector)>,
) -> Result<ScheduleVector, SolveError> {
    profile.validate()?;
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(SolveError::Contract("objective has non-finite coefficients".into()));
    }
    let slots = profile.permissible_slots();
    let is_frozen = |hour: usize| frozen.is_some_and(|(t0, _)| hour < t0);
    let lo = policy.min_slot_energy(profile);
    let hi = profile.power_limit;
    let floor = policy.soc_floor(profile);

    // Free positions get LP variables; frozen ones fold into constants.
    let mut var_of_pos = vec![None; slots.len()];
    let mut var_hours = Vec::new();
    let mut var_rank = Vec::new();
    let mut frozen_energy = 0.0;
    for (p, &hour) in slots.iter().enumerate() {
        if is_frozen(hour) {
            frozen_energy += frozen.map(|(_, c)| c.at(hour)).unwrap_or(0.0);
        } else {
            var_of_pos[p] = Some(var_hours.len());
            var_hours.push(hour);
            var_rank.push((p + 1) as f64);
        }
    }
    let n = var_hours.len();
    let residual = profile.energy_need - frozen_energy;

    let mut out = [0.0; HOURS];
    if let Some((_, committed)) = frozen {
        for &hour in &slots {
            if is_frozen(hour) {
                out[hour - 1] = committed.at(hour);
            }
        }
    }

    if residual < n as f64 * lo - CONSTRAINT_TOL || residual > n as f64 * hi + CONSTRAINT_TOL {
        return Err(SolveError::Infeasible(ScheduleViolation {
            kind: ConstraintKind::EnergyBalance,
            hour: None,
            detail: format!("residual need {residual} kWh not reachable with {n} free slots"),
        }));
    }

    if n > 0 {
        let objective: Vec<f64> = var_hours.iter().map(|&h| coeffs[h - 1]).collect();
        // Among optimal schedules, prefer energy early in the window.
        let mut lp = LinearProgram::new(objective, vec![lo; n], vec![hi; n]).with_secondary(var_rank);
        lp.push(vec![1.0; n], Relation::Eq, residual);

        let mut level = profile.soc_at_arrival;
        let mut row = vec![0.0; n];
        let mut free_count = 0usize;
        for (p, &hour) in slots.iter().enumerate() {
            match var_of_pos[p] {
                Some(v) => {
                    row[v] = 1.0;
                    free_count += 1;
                }
                None => level += out[hour - 1],
            }
            let reach_lo = level + free_count as f64 * lo;
            let reach_hi = level + free_count as f64 * hi;
            if free_count == 0 {
                if level < floor - CONSTRAINT_TOL || level > profile.capacity + CONSTRAINT_TOL {
                    return Err(SolveError::Infeasible(ScheduleViolation {
                        kind: if level < floor {
                            ConstraintKind::SocFloor
                        } else {
                            ConstraintKind::SocCeiling
                        },
                        hour: Some(hour),
                        detail: format!("frozen prefix leaves SOC at {level}"),
                    }));
                }
                continue;
            }
            if reach_lo < floor {
                lp.push(row.clone(), Relation::Ge, floor - level);
            }
            if reach_hi > profile.capacity {
                lp.push(row.clone(), Relation::Le, profile.capacity - level);
            }
        }

        let sol = lp.solve().map_err(|e| match e {
            LpError::Infeasible { residual } => SolveError::Infeasible(ScheduleViolation {
                kind: ConstraintKind::SocFloor,
                hour: None,
                detail: format!("SOC bounds cannot be met together with the energy need (residual {residual:.3e})"),
            }),
            other => SolveError::Lp(other),
        })?;
        for (v, &hour) in var_hours.iter().enumerate() {
            out[hour - 1] = sol.x[v].clamp(lo, hi);
        }
        rebalance(&mut out, &var_hours, residual, lo, hi);
    }

    let schedule = ScheduleVector(out);
    check_schedule(&schedule, profile, policy, frozen).map_err(SolveError::Verification)?;
    Ok(schedule)
}

/// Pushes any floating residual in the energy balance onto free slots with
/// room, so the balance closes to rounding error.
fn rebalance(out: &mut Hourly, free_hours: &[usize], target: f64, lo: f64, hi: f64) {
    for _ in 0..2 {
        let total: f64 = free_hours.iter().map(|&h| out[h - 1]).sum();
        let mut gap = target - total;
        if gap == 0.0 {
            return;
        }
        for &h in free_hours {
            let v = out[h - 1];
            let room = if gap > 0.0 { hi - v } else { lo - v };
            let step = if gap > 0.0 { gap.min(room) } else { gap.max(room) };
            if step != 0.0 {
                out[h - 1] = v + step;
                gap -= step;
            }
            if gap == 0.0 {
                break;
            }
        }
    }
}
