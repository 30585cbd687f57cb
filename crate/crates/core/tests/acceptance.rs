//! Exit criteria. Each test prints one PASS/FAIL line (written straight to
//! stderr so it shows without `--nocapture`) and then asserts the verdict.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use pevshape::coordinator::{
    offline_shape, run_horizon, simulate_day, ConvergenceConfig, DayOutcome, FleetState, SweepMode,
};
use pevshape::fleet::{synthesize_fleet, FleetConfig, User};
use pevshape::ledger::{CostReport, Money};
use pevshape::prices::{
    clear_da_demand, hourly_std, threshold_gamma, wrap_hour, DayPrices, Hourly, HourlyStd, MarketKind, PriceMatrix,
    ThresholdConfig, HOURS,
};
use pevshape::scenario::Scenario;
use pevshape::solver::oracle::{brute_force_oracle, grid_error_bound};
use pevshape::solver::{check_schedule, dot, solve_altering, solve_shaping, CONSTRAINT_TOL};
use pevshape::synth::{SPIKE_HOUR, TROUGH_HOUR};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CONSTRAINT_INSTANCES: usize = 1000;
const CONSTRAINT_BUDGET: Duration = Duration::from_secs(30);
const ORACLE_INSTANCES: usize = 200;
const ORACLE_MAX_WINDOW: usize = 4;
const ORACLE_STEP: f64 = 0.1;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const STATS_TOL: f64 = 1e-9;
const DESCENT_SEEDS: std::ops::RangeInclusive<u64> = 1..=20;
/// Slack for float noise when comparing successive potentials, relative.
const DESCENT_REL_TOL: f64 = 1e-9;
const SWEEP2_MSE_BOUND: f64 = 1e-6;
const HORIZON_DAYS: usize = 30;
const HORIZON_BUDGET: Duration = Duration::from_secs(300);

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("acceptance {criterion} [{name}]: {verdict} - {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn scenario(name: &str) -> Scenario {
    Scenario::from_path(&common::fixture(name)).unwrap().resolve().unwrap()
}

#[test]
fn c1_constraint_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2014);
    let mut failures = Vec::new();
    let mut max_energy_err: f64 = 0.0;
    for i in 0..CONSTRAINT_INSTANCES {
        let policy = common::random_policy(&mut rng);
        let input = common::random_shaping(&mut rng, HOURS);
        match solve_shaping(&input, &policy) {
            Ok(s) => {
                max_energy_err = max_energy_err.max(common::energy_error(&s, &input.profile));
                if let Err(v) = check_schedule(&s, &input.profile, &policy, None) {
                    failures.push(format!("P1 #{i}: {v}"));
                }
            }
            Err(e) => failures.push(format!("P1 #{i}: {e}")),
        }

        let policy = common::random_policy(&mut rng);
        let input = common::random_altering(&mut rng, HOURS, &policy);
        match solve_altering(&input, &policy) {
            Ok(s) => {
                let p = &input.shaping.profile;
                max_energy_err = max_energy_err.max(common::energy_error(&s, p));
                if let Err(v) = check_schedule(&s, p, &policy, Some((input.t0, &input.committed))) {
                    failures.push(format!("P2 #{i}: {v}"));
                }
            }
            Err(e) => failures.push(format!("P2 #{i}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && max_energy_err <= CONSTRAINT_TOL && elapsed < CONSTRAINT_BUDGET;
    report(
        1,
        "constraint suite",
        pass,
        &format!(
            "{CONSTRAINT_INSTANCES} P1 + {CONSTRAINT_INSTANCES} P2 instances, {} violations, max energy error {max_energy_err:.1e} kWh, {:.2?} (limit {CONSTRAINT_BUDGET:?})",
            failures.len(),
            elapsed
        ),
    );
    assert!(pass, "{failures:#?}");
}

#[test]
fn c2_oracle_optimality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2015);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for i in 0..ORACLE_INSTANCES {
        let policy = common::random_policy(&mut rng);
        // Alternate between the two problems.
        let (solver_obj, coeffs, profile, oracle) = if i % 2 == 0 {
            let input = common::random_shaping(&mut rng, ORACLE_MAX_WINDOW);
            let c = input.cost_vector();
            let s = solve_shaping(&input, &policy).unwrap();
            let o = brute_force_oracle(&c, &input.profile, &policy, None, ORACLE_STEP).unwrap();
            (dot(&s, &c), c, input.profile, o)
        } else {
            let input = common::random_altering(&mut rng, ORACLE_MAX_WINDOW, &policy);
            let c = input.coefficients();
            let s = solve_altering(&input, &policy).unwrap();
            let frozen = Some((input.t0, &input.committed));
            let o = brute_force_oracle(&c, &input.shaping.profile, &policy, frozen, ORACLE_STEP).unwrap();
            (dot(&s, &c), c, input.shaping.profile, o)
        };
        let bound = grid_error_bound(&coeffs, &profile, ORACLE_STEP);
        let gap = solver_obj - oracle.objective;
        worst_gap = worst_gap.max(gap);
        if gap > bound {
            failures.push(format!(
                "#{i}: solver {solver_obj} oracle {} bound {bound}",
                oracle.objective
            ));
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < ORACLE_BUDGET;
    report(
        2,
        "oracle optimality",
        pass,
        &format!(
            "{ORACLE_INSTANCES} instances, window <= {ORACLE_MAX_WINDOW}, step {ORACLE_STEP} kWh, {} above bound, worst solver-oracle gap {worst_gap:.3e}, {elapsed:.2?} (limit {ORACLE_BUDGET:?})",
            failures.len()
        ),
    );
    assert!(pass, "{failures:#?}");
}

fn two_pass_sigma(rows: &[Hourly]) -> Hourly {
    let d = rows.len() as f64;
    std::array::from_fn(|h| {
        let mean = rows.iter().map(|r| r[h]).sum::<f64>() / d;
        (rows.iter().map(|r| (r[h] - mean).powi(2)).sum::<f64>() / d).sqrt()
    })
}

/// Threshold written out term by term from its definition.
fn gamma_by_hand(sigma: &Hourly, prev: &Hourly, today: &Hourly, k: usize, t: usize) -> f64 {
    let mut terms = Vec::new();
    for offset in (0..=k).rev() {
        let i = t as i64 - offset as i64;
        let (hour, price) = if i >= 1 {
            (i as usize, today[i as usize - 1])
        } else {
            let h = (i + 24) as usize;
            (h, prev[h - 1])
        };
        terms.push((sigma[hour - 1], price));
    }
    let anchor = terms[0].0;
    terms.iter().map(|(s, p)| s / anchor * p).sum::<f64>() / k as f64
}

#[test]
fn c3_statistics() {
    // Hand-built matrix: five days with distinct hourly patterns.
    let rows: Vec<Hourly> = (0..5)
        .map(|d| {
            std::array::from_fn(|h| 20.0 + 3.0 * h as f64 + [0.0, 7.5, -4.0, 12.25, 1.0][d] * (1.0 + (h % 5) as f64))
        })
        .collect();
    let m = PriceMatrix::new(MarketKind::RealTime, rows.clone()).unwrap();
    let sigma = hourly_std(&m);
    let expected = two_pass_sigma(&rows);
    let mut max_err: f64 = (0..HOURS)
        .map(|h| (sigma.sigma[h] - expected[h]).abs())
        .fold(0.0, f64::max);

    let fixture_rows = PriceMatrix::from_path(&common::fixture("rt_prices.csv"), MarketKind::RealTime).unwrap();
    let fs = hourly_std(&fixture_rows);
    let fe = two_pass_sigma(fixture_rows.rows());
    max_err = max_err.max((0..HOURS).map(|h| (fs.sigma[h] - fe[h]).abs()).fold(0.0, f64::max));

    // Two-point symmetric column.
    let two = hourly_std(&PriceMatrix::new(MarketKind::DayAhead, vec![[40.0; HOURS], [60.0; HOURS]]).unwrap());
    max_err = max_err.max(two.sigma.iter().map(|s| (s - 10.0).abs()).fold(0.0, f64::max));

    let day = DayPrices {
        da: rows[3],
        rt: rows[4],
        rt_prev_day: rows[2],
    };
    let mut gamma_err: f64 = 0.0;
    for k in [1, 3, 6] {
        let cfg = ThresholdConfig {
            window_k: k,
            deadband: 0.0,
        };
        for t in 1..=HOURS {
            let g = threshold_gamma(&day, &sigma, &cfg, t, &day.rt[..t]).unwrap();
            gamma_err = gamma_err.max((g - gamma_by_hand(&sigma.sigma, &day.rt_prev_day, &day.rt, k, t)).abs());
        }
    }
    // K = 2 with sigma ratios 1 : 1.5 : 2 over prices 10, 20, 30.
    let mut s = [1.0; HOURS];
    s[4] = 2.0;
    s[5] = 3.0;
    s[6] = 4.0;
    let mut rt = [0.0; HOURS];
    rt[4] = 10.0;
    rt[5] = 20.0;
    rt[6] = 30.0;
    let hand = DayPrices {
        da: rt,
        rt,
        rt_prev_day: rt,
    };
    let cfg = ThresholdConfig {
        window_k: 2,
        deadband: 0.0,
    };
    let g = threshold_gamma(&hand, &HourlyStd { sigma: s }, &cfg, 7, &rt[..7]).unwrap();
    gamma_err = gamma_err.max((g - 50.0).abs());

    let wrap_ok = wrap_hour(-2) == 22 && wrap_hour(0) == 24 && wrap_hour(5) == 5;
    let pass = max_err < STATS_TOL && gamma_err < STATS_TOL && wrap_ok;
    report(
        3,
        "statistics",
        pass,
        &format!(
            "max sigma error {max_err:.1e}, max gamma error {gamma_err:.1e} (tol {STATS_TOL:e}), wrap_hour(-2) = {}",
            wrap_hour(-2)
        ),
    );
    assert!(pass);
}

fn default_fleet(seed: u64) -> Vec<User> {
    synthesize_fleet(&FleetConfig::default(), seed).unwrap()
}

#[test]
fn c4_sweep_descent() {
    let mut rises = 0usize;
    let mut updates = 0usize;
    let mut max_rise: f64 = 0.0;
    for seed in DESCENT_SEEDS {
        let mut state = FleetState::uncoordinated(default_fleet(seed));
        let target = clear_da_demand(state.aggregate(), seed + 1000);
        let log = offline_shape(
            &mut state,
            &target,
            &Default::default(),
            &ConvergenceConfig::default(),
            SweepMode::GaussSeidel,
        )
        .unwrap();
        for w in log.potential_trace.windows(2) {
            updates += 1;
            let rise = w[1] - w[0];
            if rise > DESCENT_REL_TOL * w[0].abs().max(1.0) {
                rises += 1;
                max_rise = max_rise.max(rise);
            }
        }
    }

    let s = Scenario::default().resolve().unwrap();
    let market = s.market_data().unwrap();
    let day = simulate_day(
        &s.fleet_source().unwrap(),
        &market.da,
        &market.rt,
        &market.sigma,
        &s.day_config(),
        s.day,
    )
    .unwrap();
    let sweep2 = day.offline.sweep_mse.get(1).copied();
    let sweep2_ok = sweep2.is_some_and(|m| m < SWEEP2_MSE_BOUND);

    let pass = rises == 0 && sweep2_ok;
    report(
        4,
        "sweep descent",
        pass,
        &format!(
            "potential rose on {rises} of {updates} user updates over {} scenarios (max rise {max_rise:.3}); default scenario sweep MSEs {:?} (sweep-2 bound {SWEEP2_MSE_BOUND:e})",
            DESCENT_SEEDS.count(),
            day.offline.sweep_mse
        ),
    );
    assert!(pass);
}

fn ordered(c: &CostReport) -> (bool, String) {
    let (p1, p2) = (c.after_p1.unwrap(), c.after_p2.unwrap());
    let unc = c.real_uncoordinated;
    let floor = c.ideal <= unc.min(p1).min(p2);
    let chain = p2 <= p1 && p1 <= unc;
    let text = format!(
        "ideal {} unc {} p1 {} p2 {} [p2<=p1 {} p1<=unc {} ideal<=all {}]",
        c.ideal,
        unc,
        p1,
        p2,
        p2 <= p1,
        p1 <= unc,
        floor
    );
    (chain && floor, text)
}

fn spike_outcome() -> (Scenario, DayOutcome) {
    let s = scenario("spike_day.toml");
    let market = s.market_data().unwrap();
    let out = simulate_day(
        &s.fleet_source().unwrap(),
        &market.da,
        &market.rt,
        &market.sigma,
        &s.day_config(),
        s.day,
    )
    .unwrap();
    (s, out)
}

#[test]
fn c5_cost_ordering() {
    let (_, spike) = spike_outcome();
    let (spike_ok, spike_text) = ordered(&spike.costs);
    assert!(
        PriceMatrix::from_path(&common::fixture("spike_day_rt.csv"), MarketKind::RealTime)
            .unwrap()
            .rows()
            .iter()
            .flatten()
            .all(|&p| p >= 0.0),
        "fixture prices must be non-negative"
    );

    let mut s = scenario("year.toml");
    s.horizon_days = Some(HORIZON_DAYS);
    let market = s.market_data().unwrap();
    let start = Instant::now();
    let year = run_horizon(
        &s.fleet_source().unwrap(),
        &market.da,
        &market.rt,
        &market.sigma,
        &s.day_config(),
        1..=HORIZON_DAYS,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let (year_ok, year_text) = ordered(&year.totals);

    let pass = spike_ok && year_ok && elapsed < HORIZON_BUDGET;
    report(
        5,
        "cost ordering",
        pass,
        &format!("spike day: {spike_text}; {HORIZON_DAYS}-day horizon: {year_text}, {elapsed:.2?} (limit {HORIZON_BUDGET:?})"),
    );
    assert!(pass);
}

#[test]
fn c6_spike_response() {
    let (s, out) = spike_outcome();
    let cfg = s.day_config();
    assert!(cfg.policy.v2g_enabled && cfg.altering.lambda == 0.5 && cfg.altering.threshold.window_k == 3);

    let (spike_before, spike_after) = (out.after_p1[SPIKE_HOUR - 1], out.after_p2[SPIKE_HOUR - 1]);
    let lowered = spike_after < spike_before;

    // Headroom: some vehicle plugged in at the trough could still draw more.
    let users = s.fleet_source().unwrap().fleet_for_day(s.day).unwrap();
    let headroom = users.iter().zip(&out.schedules_p1).any(|(u, sched)| {
        u.pev
            .as_ref()
            .is_some_and(|p| p.is_connected(TROUGH_HOUR) && sched.at(TROUGH_HOUR) < p.power_limit - 1e-9)
    });
    let (trough_before, trough_after) = (out.after_p1[TROUGH_HOUR - 1], out.after_p2[TROUGH_HOUR - 1]);
    let raised = !headroom || trough_after > trough_before;

    let signs: Vec<String> = [SPIKE_HOUR, TROUGH_HOUR]
        .iter()
        .map(|&h| {
            let e = &out.events[h - 1];
            format!(
                "h{h} b={}",
                e.b_sign.map(|b| b.to_string()).unwrap_or_else(|| "none".into())
            )
        })
        .collect();
    let pass = lowered && raised;
    report(
        6,
        "spike response",
        pass,
        &format!(
            "spike hour {SPIKE_HOUR}: {spike_before:.2} -> {spike_after:.2} kWh; trough hour {TROUGH_HOUR}: {trough_before:.2} -> {trough_after:.2} kWh (headroom {headroom}); {}",
            signs.join(", ")
        ),
    );
    assert!(pass);
}

fn run_cli(args: &[&str], out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_pevshape"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    v.sort();
    v
}

#[test]
fn c7_determinism() {
    let spike = common::fixture("spike_day.toml");
    let year = common::fixture("year.toml");
    let (spike, year) = (spike.to_str().unwrap(), year.to_str().unwrap());
    let commands: Vec<Vec<&str>> = vec![
        vec!["run-day", "--config", spike],
        vec!["run-day", "--n-users", "20", "--day", "45"],
        vec!["run-year", "--config", year, "--horizon-days", "4"],
        vec![
            "run-year",
            "--config",
            year,
            "--horizon-days",
            "3",
            "--sweep-mode",
            "jacobi",
        ],
        vec!["stats", "--config", year, "--day", "68"],
        vec!["make-fixtures", "--seed", "77"],
    ];
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for (i, args) in commands.iter().enumerate() {
        let root = tempfile::tempdir().unwrap();
        let (a, b) = (root.path().join("a"), root.path().join("b"));
        run_cli(args, &a);
        run_cli(args, &b);
        let files = csv_files(&a);
        assert!(!files.is_empty(), "command {i} wrote no CSV");
        assert_eq!(files.len(), csv_files(&b).len());
        for f in files {
            compared += 1;
            let name = f.file_name().unwrap();
            if std::fs::read(&f).unwrap() != std::fs::read(b.join(name)).unwrap() {
                mismatched.push(format!("{} {:?}", args[0], name));
            }
        }
    }
    let pass = mismatched.is_empty();
    report(
        7,
        "determinism",
        pass,
        &format!(
            "{} commands, {compared} CSV files compared, {} differ",
            commands.len(),
            mismatched.len()
        ),
    );
    assert!(pass, "{mismatched:?}");
}

/// Needs real market files: `PEVSHAPE_PJM_DA` and `PEVSHAPE_PJM_RT` point
/// at 365-row CSVs in the usual layout.
#[test]
#[ignore = "needs user-supplied PJM 2014 price files"]
fn c8_replication_hook() {
    let (Ok(da_path), Ok(rt_path)) = (std::env::var("PEVSHAPE_PJM_DA"), std::env::var("PEVSHAPE_PJM_RT")) else {
        report(
            8,
            "replication hook",
            false,
            "PEVSHAPE_PJM_DA / PEVSHAPE_PJM_RT not set",
        );
        panic!("set PEVSHAPE_PJM_DA and PEVSHAPE_PJM_RT");
    };
    let da = PriceMatrix::from_path(Path::new(&da_path), MarketKind::DayAhead).unwrap();
    let rt = PriceMatrix::from_path(Path::new(&rt_path), MarketKind::RealTime).unwrap();
    let (sd, sr) = (hourly_std(&da), hourly_std(&rt));
    let hours = (1..=HOURS).filter(|&h| sr.at(h) >= sd.at(h)).count();

    let s = Scenario {
        da_prices: Some(da_path.into()),
        rt_prices: Some(rt_path.into()),
        n_users: 1000,
        ..Scenario::default()
    }
    .resolve()
    .unwrap();
    let market = s.market_data().unwrap();
    let start = Instant::now();
    let year = run_horizon(
        &s.fleet_source().unwrap(),
        &market.da,
        &market.rt,
        &market.sigma,
        &s.day_config(),
        1..=market.da.days(),
    )
    .unwrap();
    let elapsed = start.elapsed();
    let pass = hours >= 18 && elapsed < Duration::from_secs(2 * 3600);
    let totals = &year.totals;
    let cell = |m: Option<Money>| CostReport::column_text(m);
    report(
        8,
        "replication hook",
        pass,
        &format!(
            "RT sigma >= DA sigma in {hours}/24 hours; N=1000 year in {elapsed:.0?}: ideal {} real {} P1 {} P2 {}",
            totals.ideal.to_tenths(),
            totals.real_uncoordinated.to_tenths(),
            cell(totals.after_p1),
            cell(totals.after_p2)
        ),
    );
    assert!(pass);
}
