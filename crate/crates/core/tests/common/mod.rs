#![allow(dead_code)]

use std::path::PathBuf;

use pevshape::fleet::{BatteryPolicy, PevProfile};
use pevshape::prices::{wrap_hour, Hourly, HOURS};
use pevshape::solver::{solve_shaping, AlteringInput, BScope, ScheduleVector, ShapingInput, Sign};
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// A valid profile whose window has at most `max_window` slots.
pub fn random_profile<R: Rng>(rng: &mut R, max_window: usize) -> PevProfile {
    loop {
        let arrival = rng.random_range(1..=HOURS);
        let len = rng.random_range(1..=max_window);
        let departure = wrap_hour((arrival + len - 1) as i64);
        let power = rng.random_range(1.0..2.5);
        let capacity = rng.random_range(24.0..40.0);
        let max_need = (power * len as f64).min(24.0);
        // Needs on the whole-window bound are common in practice.
        let need = if rng.random_bool(0.1) {
            max_need
        } else {
            rng.random_range(0.0..=max_need)
        };
        if let Ok(p) = PevProfile::new(arrival, departure, need, power, capacity) {
            return p;
        }
    }
}

pub fn random_policy<R: Rng>(rng: &mut R) -> BatteryPolicy {
    BatteryPolicy {
        v2g_enabled: rng.random_bool(0.7),
        soc_floor_fraction: rng.random_range(0.0..0.5),
    }
}

pub fn random_hourly<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Hourly {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

pub fn random_shaping<R: Rng>(rng: &mut R, max_window: usize) -> ShapingInput {
    ShapingInput {
        target_da: random_hourly(rng, 0.0, 60.0),
        others_aggregate: random_hourly(rng, 0.0, 60.0),
        own_baseline: random_hourly(rng, 0.0, 2.0),
        profile: random_profile(rng, max_window),
    }
}

/// An altering instance whose committed schedule is the shaping optimum of
/// an unrelated market state, so the frozen prefix is always feasible.
pub fn random_altering<R: Rng>(rng: &mut R, max_window: usize, policy: &BatteryPolicy) -> AlteringInput {
    let shaping = random_shaping(rng, max_window);
    let earlier = ShapingInput {
        target_da: random_hourly(rng, 0.0, 60.0),
        others_aggregate: random_hourly(rng, 0.0, 60.0),
        ..shaping.clone()
    };
    let committed = solve_shaping(&earlier, policy).expect("random profiles are feasible");
    // Mostly pick a t0 inside the window, where the freeze matters.
    let t0 = if rng.random_bool(0.8) {
        let slots = shaping.profile.permissible_slots();
        slots[rng.random_range(0..slots.len())]
    } else {
        rng.random_range(1..=HOURS)
    };
    AlteringInput {
        shaping,
        t0,
        committed,
        lambda: rng.random_range(0.0..=1.0),
        b_sign: if rng.random_bool(0.5) { Sign::Plus } else { Sign::Minus },
        b_scope: if rng.random_bool(0.5) {
            BScope::Full
        } else {
            BScope::InstantaneousOnly
        },
    }
}

pub fn energy_error(schedule: &ScheduleVector, profile: &PevProfile) -> f64 {
    (schedule.total() - profile.energy_need).abs()
}
