//! The coordination protocol between the retailer and its users.
//!
//! Offline, users take turns best-responding to the aggregate of everyone
//! else (shaping). Online, at each hour the retailer compares the RT price
//! with the moving threshold and, when it fires, asks connected users to
//! re-plan the rest of their window (altering). The retailer side only
//! ever handles 24-vectors; see [`retailer`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fleet::{synthesize_fleet, BatteryPolicy, FleetConfig, FleetError, User};
use crate::ledger::{ideal_cost, settle_day, CostReport, DayLedger, LedgerError};
use crate::prices::{
    clear_da_demand, threshold_gamma, DayPrices, Hourly, HourlyStd, PriceError, PriceMatrix, ThresholdConfig, HOURS,
};
use crate::solver::{
    solve_altering, solve_shaping, AlteringInput, BScope, ScheduleVector, ShapingInput, Sign, SolveError,
};

/// Computations the retailer performs. Inputs are aggregate or per-user
/// load vectors only; nothing here can see a vehicle profile.
pub mod retailer {
    use crate::prices::{Hourly, HOURS};
    use crate::solver::Sign;

    /// Load of everyone except the user who reported `own_load`.
    pub fn leave_one_out(aggregate: &Hourly, own_load: &Hourly) -> Hourly {
        std::array::from_fn(|h| aggregate[h] - own_load[h])
    }

    /// Mean squared per-slot change between two aggregates.
    pub fn sweep_mse(prev: &Hourly, next: &Hourly) -> f64 {
        prev.iter().zip(next).map(|(a, b)| (b - a) * (b - a)).sum::<f64>() / HOURS as f64
    }

    /// `sum_t a(t) (a(t) - 2 l^d(t))`, i.e. squared tracking error minus a
    /// constant.
    pub fn potential(aggregate: &Hourly, target: &Hourly) -> f64 {
        aggregate.iter().zip(target).map(|(a, d)| a * (a - 2.0 * d)).sum()
    }

    /// `+1` above the band, `-1` below it, nothing inside.
    pub fn decide_sign(rt_price: f64, gamma: f64, deadband: f64) -> Option<Sign> {
        if rt_price > gamma + deadband {
            Some(Sign::Plus)
        } else if rt_price < gamma - deadband {
            Some(Sign::Minus)
        } else {
            None
        }
    }
}

#[derive(Debug, Error)]
pub enum CoordError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("user {user}: {source}")]
    Infeasible {
        user: usize,
        #[source]
        source: SolveError,
    },
    #[error(transparent)]
    Price(#[from] PriceError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error("day {day}: {source}")]
    Day {
        day: usize,
        #[source]
        source: Box<CoordError>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub max_sweeps: usize,
    pub mse_tolerance: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 5,
            mse_tolerance: 1e-6,
        }
    }
}

impl ConvergenceConfig {
    pub fn validate(&self) -> Result<(), CoordError> {
        if self.max_sweeps == 0 {
            return Err(CoordError::Config("max_sweeps must be at least 1".into()));
        }
        if !(self.mse_tolerance.is_finite() && self.mse_tolerance > 0.0) {
            return Err(CoordError::Config(format!(
                "mse_tolerance must be positive, got {}",
                self.mse_tolerance
            )));
        }
        Ok(())
    }
}

/// Update order within a sweep. Jacobi solves every user against the same
/// snapshot in parallel, which changes the iterate path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    #[default]
    GaussSeidel,
    Jacobi,
}

impl std::str::FromStr for SweepMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gauss-seidel" => Ok(SweepMode::GaussSeidel),
            "jacobi" => Ok(SweepMode::Jacobi),
            other => Err(format!("unknown sweep mode `{other}` (gauss-seidel | jacobi)")),
        }
    }
}

/// Every user's baseline and current schedule, with a running aggregate.
#[derive(Clone, Debug)]
pub struct FleetState {
    users: Vec<User>,
    schedules: Vec<ScheduleVector>,
    aggregate: Hourly,
}

impl FleetState {
    /// Starts every vehicle on plug-and-charge.
    pub fn uncoordinated(users: Vec<User>) -> Self {
        let schedules = users
            .iter()
            .map(|u| u.pev.as_ref().map(ScheduleVector::uncoordinated).unwrap_or_default())
            .collect();
        let mut state = Self {
            users,
            schedules,
            aggregate: [0.0; HOURS],
        };
        state.aggregate = state.recomputed_aggregate();
        state
    }

    pub fn users(&self) -> &[User] {
        &self.users
    }

    pub fn schedules(&self) -> &[ScheduleVector] {
        &self.schedules
    }

    pub fn aggregate(&self) -> &Hourly {
        &self.aggregate
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// What user `n` reports to the retailer: baseline plus vehicle.
    pub fn own_load(&self, n: usize) -> Hourly {
        let base = &self.users[n].household.baseline;
        let s = &self.schedules[n].0;
        std::array::from_fn(|h| base[h] + s[h])
    }

    pub fn set_schedule(&mut self, n: usize, schedule: ScheduleVector) {
        let old = std::mem::replace(&mut self.schedules[n], schedule);
        for h in 0..HOURS {
            self.aggregate[h] += schedule.0[h] - old.0[h];
        }
    }

    /// Aggregate summed from scratch, in user order.
    pub fn recomputed_aggregate(&self) -> Hourly {
        let mut agg = [0.0; HOURS];
        for n in 0..self.users.len() {
            let load = self.own_load(n);
            for h in 0..HOURS {
                agg[h] += load[h];
            }
        }
        agg
    }

    /// Largest per-slot gap between the cached and recomputed aggregate.
    pub fn aggregate_drift(&self) -> f64 {
        let fresh = self.recomputed_aggregate();
        (0..HOURS)
            .map(|h| (fresh[h] - self.aggregate[h]).abs())
            .fold(0.0, f64::max)
    }

    fn has_pevs(&self) -> bool {
        self.users.iter().any(|u| u.pev.is_some())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepLog {
    pub mode: SweepMode,
    /// Per-slot MSE between the aggregates before and after each sweep.
    pub sweep_mse: Vec<f64>,
    /// Potential before any update and after each user update (after each
    /// barrier in Jacobi mode).
    #[serde(skip)]
    pub potential_trace: Vec<f64>,
    pub converged: bool,
}

/// Runs sweeps over `participants` until the aggregate settles. `solve`
/// receives the user index, the others' aggregate and the current schedule.
/// Users listed in `skipped` are left alone; with `skip_infeasible`, a user
/// whose solve fails is added there instead of aborting.
#[allow(clippy::too_many_arguments)]
fn run_sweeps<F>(
    state: &mut FleetState,
    participants: &[usize],
    target: &Hourly,
    cfg: &ConvergenceConfig,
    mode: SweepMode,
    skip_infeasible: bool,
    skipped: &mut Vec<usize>,
    solve: F,
) -> Result<SweepLog, CoordError>
where
    F: Fn(usize, &Hourly, &ScheduleVector) -> Result<ScheduleVector, SolveError> + Sync,
{
    let mut log = SweepLog {
        mode,
        potential_trace: vec![retailer::potential(state.aggregate(), target)],
        ..SweepLog::default()
    };
    for _ in 0..cfg.max_sweeps {
        let before = *state.aggregate();
        match mode {
            SweepMode::GaussSeidel => {
                for &n in participants {
                    if skipped.contains(&n) {
                        continue;
                    }
                    let others = retailer::leave_one_out(state.aggregate(), &state.own_load(n));
                    let r = solve(n, &others, &state.schedules[n]);
                    apply(state, n, r, skip_infeasible, skipped)?;
                    log.potential_trace.push(retailer::potential(state.aggregate(), target));
                }
            }
            SweepMode::Jacobi => {
                let snapshot = &*state;
                let active: Vec<usize> = participants.iter().copied().filter(|n| !skipped.contains(n)).collect();
                let results: Vec<_> = active
                    .par_iter()
                    .map(|&n| {
                        let others = retailer::leave_one_out(snapshot.aggregate(), &snapshot.own_load(n));
                        solve(n, &others, &snapshot.schedules[n])
                    })
                    .collect();
                for (&n, r) in active.iter().zip(results) {
                    apply(state, n, r, skip_infeasible, skipped)?;
                }
                log.potential_trace.push(retailer::potential(state.aggregate(), target));
            }
        }
        let mse = retailer::sweep_mse(&before, state.aggregate());
        log.sweep_mse.push(mse);
        if mse < cfg.mse_tolerance {
            log.converged = true;
            break;
        }
    }
    Ok(log)
}

fn apply(
    state: &mut FleetState,
    n: usize,
    result: Result<ScheduleVector, SolveError>,
    skip_infeasible: bool,
    skipped: &mut Vec<usize>,
) -> Result<(), CoordError> {
    match result {
        Ok(s) => {
            state.set_schedule(n, s);
            Ok(())
        }
        Err(source) if skip_infeasible => {
            log::warn!("user {n} skipped: {source}");
            skipped.push(n);
            Ok(())
        }
        Err(source) => Err(CoordError::Infeasible { user: n, source }),
    }
}

/// Offline shaping of every vehicle towards the DA purchase.
pub fn offline_shape(
    state: &mut FleetState,
    target: &Hourly,
    policy: &BatteryPolicy,
    cfg: &ConvergenceConfig,
    mode: SweepMode,
) -> Result<SweepLog, CoordError> {
    cfg.validate()?;
    let participants: Vec<usize> = (0..state.len()).filter(|&n| state.users[n].pev.is_some()).collect();
    let users = state.users.clone();
    let mut none = Vec::new();
    run_sweeps(
        state,
        &participants,
        target,
        cfg,
        mode,
        false,
        &mut none,
        |n, others, _| {
            let user = &users[n];
            let input = ShapingInput {
                target_da: *target,
                others_aggregate: *others,
                own_baseline: user.household.baseline,
                profile: user.pev.clone().expect("participants have vehicles"),
            };
            solve_shaping(&input, policy)
        },
    )
}

/// Parameters of the online phase that stay fixed over a day.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlteringParams {
    pub lambda: f64,
    pub b_scope: BScope,
    pub threshold: ThresholdConfig,
}

impl Default for AlteringParams {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            b_scope: BScope::default(),
            threshold: ThresholdConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OnlineEvent {
    pub t0: usize,
    pub rt_price: f64,
    pub gamma: f64,
    pub b_sign: Option<Sign>,
    pub sweeps_run: usize,
    pub aggregate_before: f64,
    pub aggregate_after: f64,
    pub skipped_users: Vec<usize>,
}

/// One online slot: threshold check and, if it fires, altering sweeps over
/// the users still connected at or after `t0`.
#[allow(clippy::too_many_arguments)]
pub fn online_step(
    state: &mut FleetState,
    day: &DayPrices,
    sigma: &HourlyStd,
    params: &AlteringParams,
    target: &Hourly,
    policy: &BatteryPolicy,
    cfg: &ConvergenceConfig,
    mode: SweepMode,
    t0: usize,
) -> Result<OnlineEvent, CoordError> {
    cfg.validate()?;
    let rt_price = day.rt[t0 - 1];
    let gamma = threshold_gamma(day, sigma, &params.threshold, t0, &day.rt[..t0])?;
    let b_sign = retailer::decide_sign(rt_price, gamma, params.threshold.deadband);
    let aggregate_before = state.aggregate()[t0 - 1];
    let mut event = OnlineEvent {
        t0,
        rt_price,
        gamma,
        b_sign,
        sweeps_run: 0,
        aggregate_before,
        aggregate_after: aggregate_before,
        skipped_users: Vec::new(),
    };
    let Some(sign) = b_sign else {
        return Ok(event);
    };
    let participants: Vec<usize> = (0..state.len())
        .filter(|&n| {
            state.users[n]
                .pev
                .as_ref()
                .is_some_and(|p| (t0..=HOURS).any(|h| p.is_connected(h)))
        })
        .collect();
    let users = state.users.clone();
    let mut skipped = Vec::new();
    let log = run_sweeps(
        state,
        &participants,
        target,
        cfg,
        mode,
        true,
        &mut skipped,
        |n, others, current| {
            let user = &users[n];
            let input = AlteringInput {
                shaping: ShapingInput {
                    target_da: *target,
                    others_aggregate: *others,
                    own_baseline: user.household.baseline,
                    profile: user.pev.clone().expect("participants have vehicles"),
                },
                t0,
                committed: *current,
                lambda: params.lambda,
                b_sign: sign,
                b_scope: params.b_scope,
            };
            solve_altering(&input, policy)
        },
    )?;
    event.sweeps_run = log.sweep_mse.len();
    event.aggregate_after = state.aggregate()[t0 - 1];
    event.skipped_users = skipped;
    Ok(event)
}

/// Everything that parameterises one simulated day besides fleet and prices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayConfig {
    pub policy: BatteryPolicy,
    pub altering: AlteringParams,
    pub convergence: ConvergenceConfig,
    pub sweep_mode: SweepMode,
    pub sellback: bool,
    pub clearing_seed: u64,
}

impl Default for DayConfig {
    fn default() -> Self {
        Self {
            policy: BatteryPolicy::default(),
            altering: AlteringParams::default(),
            convergence: ConvergenceConfig::default(),
            sweep_mode: SweepMode::default(),
            sellback: true,
            clearing_seed: 0,
        }
    }
}

impl DayConfig {
    pub fn validate(&self) -> Result<(), CoordError> {
        self.convergence.validate()?;
        self.altering.threshold.validate()?;
        let l = self.altering.lambda;
        if !(l.is_finite() && (0.0..=1.0).contains(&l)) {
            return Err(CoordError::Config(format!("lambda {l} outside [0, 1]")));
        }
        let f = self.policy.soc_floor_fraction;
        if !(f.is_finite() && (0.0..1.0).contains(&f)) {
            return Err(CoordError::Config(format!("soc_floor_fraction {f} outside [0, 1)")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DayLedgers {
    pub uncoordinated: DayLedger,
    pub after_p1: DayLedger,
    pub after_p2: DayLedger,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DayOutcome {
    pub da_purchase: Hourly,
    pub uncoordinated: Hourly,
    pub after_p1: Hourly,
    pub after_p2: Hourly,
    pub offline: SweepLog,
    pub events: Vec<OnlineEvent>,
    pub ledgers: DayLedgers,
    pub costs: CostReport,
    #[serde(skip)]
    pub schedules_p1: Vec<ScheduleVector>,
    #[serde(skip)]
    pub schedules_p2: Vec<ScheduleVector>,
}

/// Shaping once, then the online phase for hours 1 to 24.
///
/// The DA purchase is the cleared version of the fleet's plug-and-charge
/// aggregate. All three arms settle against that same purchase.
pub fn run_day(
    users: Vec<User>,
    day: &DayPrices,
    sigma: &HourlyStd,
    cfg: &DayConfig,
) -> Result<DayOutcome, CoordError> {
    cfg.validate()?;
    let mut state = FleetState::uncoordinated(users);
    let has_pevs = state.has_pevs();
    let uncoordinated = *state.aggregate();
    let target = clear_da_demand(&uncoordinated, cfg.clearing_seed);

    let offline = offline_shape(&mut state, &target, &cfg.policy, &cfg.convergence, cfg.sweep_mode)?;
    let after_p1 = *state.aggregate();
    let schedules_p1 = state.schedules().to_vec();

    let mut events = Vec::with_capacity(HOURS);
    for t0 in 1..=HOURS {
        events.push(online_step(
            &mut state,
            day,
            sigma,
            &cfg.altering,
            &target,
            &cfg.policy,
            &cfg.convergence,
            cfg.sweep_mode,
            t0,
        )?);
    }
    let after_p2 = *state.aggregate();

    let settle = |demand: &Hourly| settle_day(&target, demand, &day.da, &day.rt, cfg.sellback);
    let ledgers = DayLedgers {
        uncoordinated: settle(&uncoordinated)?,
        after_p1: settle(&after_p1)?,
        after_p2: settle(&after_p2)?,
    };
    let costs = CostReport {
        ideal: ideal_cost(&uncoordinated, &day.da)?,
        real_uncoordinated: ledgers.uncoordinated.total_cost,
        after_p1: has_pevs.then_some(ledgers.after_p1.total_cost),
        after_p2: has_pevs.then_some(ledgers.after_p2.total_cost),
    };
    Ok(DayOutcome {
        da_purchase: target,
        uncoordinated,
        after_p1,
        after_p2,
        offline,
        events,
        ledgers,
        costs,
        schedules_p1,
        schedules_p2: state.schedules().to_vec(),
    })
}

/// The four cost columns for one fleet and day.
pub fn four_way_report(
    users: Vec<User>,
    day: &DayPrices,
    sigma: &HourlyStd,
    cfg: &DayConfig,
) -> Result<CostReport, CoordError> {
    Ok(run_day(users, day, sigma, cfg)?.costs)
}

/// Where each simulated day's fleet comes from.
#[derive(Clone, Debug)]
pub enum FleetSource {
    /// The same users every day.
    Fixed(Vec<User>),
    /// A fresh draw per day, seeded from `seed` and the day number.
    Synthesized { config: FleetConfig, seed: u64 },
}

/// Seed for day `day` derived from a base seed.
pub fn day_seed(base: u64, day: usize) -> u64 {
    base ^ (day as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl FleetSource {
    pub fn fleet_for_day(&self, day: usize) -> Result<Vec<User>, CoordError> {
        match self {
            FleetSource::Fixed(users) => Ok(users.clone()),
            FleetSource::Synthesized { config, seed } => Ok(synthesize_fleet(config, day_seed(*seed, day))?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DaySummary {
    pub day: usize,
    pub costs: CostReport,
    pub offline_sweeps: usize,
    pub events_fired: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HorizonReport {
    pub sweep_mode: SweepMode,
    pub days: Vec<DaySummary>,
    pub totals: CostReport,
}

/// Simulates day `day` (1-based) with the per-day fleet and clearing seed.
pub fn simulate_day(
    fleets: &FleetSource,
    da: &PriceMatrix,
    rt: &PriceMatrix,
    sigma: &HourlyStd,
    cfg: &DayConfig,
    day: usize,
) -> Result<DayOutcome, CoordError> {
    let wrap = |source| CoordError::Day {
        day,
        source: Box::new(source),
    };
    let prices = DayPrices::from_matrices(da, rt, day)
        .ok_or_else(|| wrap(CoordError::Config(format!("no price row for day {day}"))))?;
    let users = fleets.fleet_for_day(day).map_err(wrap)?;
    let day_cfg = DayConfig {
        clearing_seed: day_seed(cfg.clearing_seed, day),
        ..*cfg
    };
    run_day(users, &prices, sigma, &day_cfg).map_err(wrap)
}

/// Runs `days` (1-based, inclusive range) in parallel; results are
/// gathered in day order, so output does not depend on scheduling.
pub fn run_horizon(
    fleets: &FleetSource,
    da: &PriceMatrix,
    rt: &PriceMatrix,
    sigma: &HourlyStd,
    cfg: &DayConfig,
    days: std::ops::RangeInclusive<usize>,
) -> Result<HorizonReport, CoordError> {
    if da.days() != rt.days() {
        return Err(CoordError::Config(format!(
            "DA has {} days but RT has {}",
            da.days(),
            rt.days()
        )));
    }
    let list: Vec<usize> = days.collect();
    let results: Vec<Result<DaySummary, CoordError>> = list
        .par_iter()
        .map(|&d| {
            simulate_day(fleets, da, rt, sigma, cfg, d).map(|o| DaySummary {
                day: d,
                costs: o.costs,
                offline_sweeps: o.offline.sweep_mse.len(),
                events_fired: o.events.iter().filter(|e| e.b_sign.is_some()).count(),
            })
        })
        .collect();
    let days = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let totals = CostReport::total(days.iter().map(|d| &d.costs));
    Ok(HorizonReport {
        sweep_mode: cfg.sweep_mode,
        days,
        totals,
    })
}
