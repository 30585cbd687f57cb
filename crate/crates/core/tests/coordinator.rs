mod common;

use pevshape::coordinator::{
    offline_shape, online_step, retailer, run_day, run_horizon, simulate_day, AlteringParams, ConvergenceConfig,
    DayConfig, FleetSource, FleetState, SweepMode,
};
use pevshape::fleet::{load_fleet_path, synthesize_fleet, BatteryPolicy, FleetConfig, Household, PevProfile, User};
use pevshape::ledger::{CostReport, Money};
use pevshape::prices::{clear_da_demand, hourly_std, DayPrices, Hourly, MarketKind, PriceMatrix, HOURS};
use pevshape::solver::{solve_shaping, BScope, ShapingInput};
use pevshape::synth::{synthesize_prices, PriceSynthConfig};

fn fixture_prices() -> (PriceMatrix, PriceMatrix) {
    (
        PriceMatrix::from_path(&common::fixture("da_prices.csv"), MarketKind::DayAhead).unwrap(),
        PriceMatrix::from_path(&common::fixture("rt_prices.csv"), MarketKind::RealTime).unwrap(),
    )
}

fn fixture_fleet() -> Vec<User> {
    load_fleet_path(&common::fixture("fleet.csv")).unwrap()
}

fn small_fleet(n: usize, seed: u64) -> Vec<User> {
    let cfg = FleetConfig {
        n_users: n,
        ..FleetConfig::default()
    };
    synthesize_fleet(&cfg, seed).unwrap()
}

/// `1/2 sum(a^2 - 2 a target) - 1/2 sum_n |x_n|^2`, the function every
/// single-user best response of the linear shaping problem descends.
fn exact_potential(state: &FleetState, target: &Hourly) -> f64 {
    let a = state.aggregate();
    let tracking: f64 = (0..HOURS).map(|h| a[h] * (a[h] - 2.0 * target[h])).sum();
    let own: f64 = state
        .schedules()
        .iter()
        .flat_map(|s| s.slots().iter())
        .map(|v| v * v)
        .sum();
    0.5 * tracking - 0.5 * own
}

#[test]
fn exact_potential_never_rises_under_best_responses() {
    let policy = BatteryPolicy::default();
    for seed in 1..=5u64 {
        let users = small_fleet(50, seed);
        let mut state = FleetState::uncoordinated(users.clone());
        let target = clear_da_demand(state.aggregate(), seed + 1000);
        let mut prev = exact_potential(&state, &target);
        for _sweep in 0..3 {
            for (n, user) in users.iter().enumerate() {
                let Some(profile) = &user.pev else { continue };
                let input = ShapingInput {
                    target_da: target,
                    others_aggregate: retailer::leave_one_out(state.aggregate(), &state.own_load(n)),
                    own_baseline: user.household.baseline,
                    profile: profile.clone(),
                };
                state.set_schedule(n, solve_shaping(&input, &policy).unwrap());
                assert!(state.aggregate_drift() <= 1e-9, "cached aggregate drifted");
                let next = exact_potential(&state, &target);
                assert!(
                    next <= prev + 1e-6 * (1.0 + prev.abs()),
                    "seed {seed} user {n}: {prev} -> {next}"
                );
                prev = next;
            }
        }
    }
}

#[test]
fn offline_and_online_keep_the_cache_exact() {
    let (da, rt) = fixture_prices();
    let sigma = hourly_std(&rt);
    let day = DayPrices::from_matrices(&da, &rt, 68).unwrap();
    let mut state = FleetState::uncoordinated(fixture_fleet());
    let target = clear_da_demand(state.aggregate(), 9);
    let cfg = ConvergenceConfig::default();
    let policy = BatteryPolicy::default();
    offline_shape(&mut state, &target, &policy, &cfg, SweepMode::GaussSeidel).unwrap();
    assert!(state.aggregate_drift() <= 1e-9);
    for t0 in 1..=HOURS {
        let before = state.schedules().to_vec();
        let params = AlteringParams::default();
        online_step(
            &mut state,
            &day,
            &sigma,
            &params,
            &target,
            &policy,
            &cfg,
            SweepMode::GaussSeidel,
            t0,
        )
        .unwrap();
        assert!(state.aggregate_drift() <= 1e-9);
        for (old, new) in before.iter().zip(state.schedules()) {
            for h in 1..t0 {
                assert_eq!(
                    old.at(h).to_bits(),
                    new.at(h).to_bits(),
                    "slot {h} changed at t0 = {t0}"
                );
            }
        }
    }
}

#[test]
fn run_day_is_deterministic() {
    let (da, rt) = fixture_prices();
    let sigma = hourly_std(&rt);
    let day = DayPrices::from_matrices(&da, &rt, 40).unwrap();
    let cfg = DayConfig {
        clearing_seed: 2015,
        ..DayConfig::default()
    };
    let a = run_day(fixture_fleet(), &day, &sigma, &cfg).unwrap();
    let b = run_day(fixture_fleet(), &day, &sigma, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.schedules_p2, b.schedules_p2);
}

#[test]
fn one_day_horizon_matches_the_day() {
    let (da, rt) = fixture_prices();
    let sigma = hourly_std(&rt);
    let fleets = FleetSource::Fixed(fixture_fleet());
    let cfg = DayConfig {
        clearing_seed: 2015,
        ..DayConfig::default()
    };
    let report = run_horizon(&fleets, &da, &rt, &sigma, &cfg, 12..=12).unwrap();
    let day = simulate_day(&fleets, &da, &rt, &sigma, &cfg, 12).unwrap();
    assert_eq!(report.days.len(), 1);
    assert_eq!(report.totals, day.costs);
}

#[test]
fn week_total_is_the_sum_of_days() {
    let (da, rt) = synthesize_prices(
        &PriceSynthConfig {
            days: 7,
            ..PriceSynthConfig::default()
        },
        5,
    )
    .unwrap();
    let sigma = hourly_std(&rt);
    let fleets = FleetSource::Synthesized {
        config: FleetConfig {
            n_users: 20,
            ..FleetConfig::default()
        },
        seed: 3,
    };
    let cfg = DayConfig::default();
    let report = run_horizon(&fleets, &da, &rt, &sigma, &cfg, 1..=7).unwrap();
    assert_eq!(report.days.len(), 7);
    let cents = |f: fn(&CostReport) -> Money| report.days.iter().map(|d| f(&d.costs).cents()).sum::<i64>();
    assert_eq!(report.totals.ideal.cents(), cents(|c| c.ideal));
    assert_eq!(
        report.totals.real_uncoordinated.cents(),
        cents(|c| c.real_uncoordinated)
    );
    assert_eq!(report.totals.after_p1.unwrap().cents(), cents(|c| c.after_p1.unwrap()));
    assert_eq!(report.totals.after_p2.unwrap().cents(), cents(|c| c.after_p2.unwrap()));
}

#[test]
fn jacobi_mode_is_flagged_and_reproducible() {
    let (da, rt) = fixture_prices();
    let sigma = hourly_std(&rt);
    let fleets = FleetSource::Fixed(fixture_fleet());
    let cfg = DayConfig {
        sweep_mode: SweepMode::Jacobi,
        ..DayConfig::default()
    };
    let a = run_horizon(&fleets, &da, &rt, &sigma, &cfg, 1..=2).unwrap();
    let b = run_horizon(&fleets, &da, &rt, &sigma, &cfg, 1..=2).unwrap();
    assert_eq!(a.sweep_mode, SweepMode::Jacobi);
    assert_eq!(a, b);
}

#[test]
fn lambda_one_leaves_a_converged_fleet_alone() {
    // Prices identical in both markets; triggers may still fire.
    let rows: Vec<Hourly> = (0..10)
        .map(|d| std::array::from_fn(|h| 25.0 + (h as f64 * 0.7).sin() * 8.0 + d as f64))
        .collect();
    let da = PriceMatrix::new(MarketKind::DayAhead, rows.clone()).unwrap();
    let rt = PriceMatrix::new(MarketKind::RealTime, rows).unwrap();
    let sigma = hourly_std(&rt);
    let day = DayPrices::from_matrices(&da, &rt, 5).unwrap();
    let user = |a, d, need, base| User {
        household: Household::new([base; HOURS]).unwrap(),
        pev: Some(PevProfile::new(a, d, need, 1.8, 24.0).unwrap()),
    };
    let users = vec![user(18, 6, 8.0, 0.5), user(20, 7, 10.0, 0.7), user(1, 5, 3.0, 0.4)];
    let cfg = DayConfig {
        altering: AlteringParams {
            lambda: 1.0,
            b_scope: BScope::InstantaneousOnly,
            ..AlteringParams::default()
        },
        clearing_seed: 17,
        ..DayConfig::default()
    };
    let out = run_day(users, &day, &sigma, &cfg).unwrap();
    assert!(out.offline.converged, "precondition: offline shaping converged");
    assert!(out.events.iter().any(|e| e.b_sign.is_some()));
    for h in 0..HOURS {
        assert!((out.after_p2[h] - out.after_p1[h]).abs() <= 1e-9, "hour {}", h + 1);
    }
}

#[test]
fn empty_fleet_costs_nothing() {
    let (da, rt) = fixture_prices();
    let sigma = hourly_std(&rt);
    let day = DayPrices::from_matrices(&da, &rt, 3).unwrap();
    let out = run_day(Vec::new(), &day, &sigma, &DayConfig::default()).unwrap();
    assert_eq!(out.after_p2, [0.0; HOURS]);
    assert_eq!(out.costs.ideal, Money::from_cents(0));
    assert_eq!(out.costs.real_uncoordinated, Money::from_cents(0));
}
