//! Command-line surface: `run-day`, `run-year`, `stats`, `make-fixtures`.
//!
//! Exit codes: 0 success, 1 usage, 2 data or parse error, 3 infeasibility.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::coordinator::{run_horizon, simulate_day, CoordError, DayOutcome, HorizonReport, SweepMode};
use crate::fleet::{synthesize_fleet, write_fleet_csv, FleetError};
use crate::ledger::{CostReport, Money};
use crate::prices::{hourly_std, threshold_gamma, DayPrices, PriceError, HOURS};
use crate::scenario::{Scenario, ScenarioError};
use crate::solver::BScope;
use crate::synth::{spike_day, synthesize_prices, PriceSynthConfig};

#[derive(Parser, Debug)]
#[command(
    name = "pevshape",
    version,
    about = "Retailer-side PEV demand shaping and altering simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate one day: shaping, then hourly altering.
    RunDay(Common),
    /// Simulate consecutive days from day 1 and total the four cost columns.
    RunYear(Common),
    /// Hourly price sigma for both markets and the threshold trace for a day.
    Stats(Common),
    /// Write synthetic price, spike-day and fleet fixtures.
    MakeFixtures {
        #[arg(long, default_value_t = 2014)]
        seed: u64,
        #[arg(long, default_value = "fixtures")]
        out_dir: PathBuf,
    },
}

/// Options shared by the simulation commands. Each overrides the
/// matching scenario key.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// Scenario TOML file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "pevshape-out")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub day: Option<usize>,
    #[arg(long)]
    pub horizon_days: Option<usize>,
    #[arg(long)]
    pub n_users: Option<usize>,
    #[arg(long)]
    pub with_pevs: Option<bool>,
    #[arg(long)]
    pub fleet_file: Option<PathBuf>,
    #[arg(long)]
    pub da_prices: Option<PathBuf>,
    #[arg(long)]
    pub rt_prices: Option<PathBuf>,
    #[arg(long)]
    pub sigma_prices: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub window_k: Option<usize>,
    #[arg(long)]
    pub deadband: Option<f64>,
    #[arg(long)]
    pub b_scope: Option<BScope>,
    #[arg(long)]
    pub sellback: Option<bool>,
    #[arg(long)]
    pub v2g: Option<bool>,
    #[arg(long)]
    pub soc_floor_fraction: Option<f64>,
    #[arg(long)]
    pub sweep_mode: Option<SweepMode>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    #[arg(long)]
    pub mse_tolerance: Option<f64>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Infeasible(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Infeasible(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Infeasible(m) => m,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Invalid(_) | ScenarioError::Fleet(FleetError::Config(_)) => CliError::Usage(e.to_string()),
            ScenarioError::Fleet(FleetError::ConfigInfeasible { .. }) => CliError::Infeasible(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CoordError> for CliError {
    fn from(e: CoordError) -> Self {
        let msg = e.to_string();
        let mut inner = &e;
        while let CoordError::Day { source, .. } = inner {
            inner = source;
        }
        match inner {
            CoordError::Infeasible { .. } | CoordError::Fleet(FleetError::ConfigInfeasible { .. }) => {
                CliError::Infeasible(msg)
            }
            CoordError::Config(_) => CliError::Usage(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<PriceError> for CliError {
    fn from(e: PriceError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::RunDay(c) => run_day_cmd(&c),
        Command::RunYear(c) => run_year_cmd(&c),
        Command::Stats(c) => stats_cmd(&c),
        Command::MakeFixtures { seed, out_dir } => make_fixtures(seed, &out_dir),
    }
}

/// Loads the scenario file (if any), applies command-line overrides and
/// resolves defaults.
pub fn build_scenario(c: &Common) -> Result<Scenario, CliError> {
    let mut s = match &c.config {
        Some(p) => Scenario::from_path(p)?,
        None => Scenario::default(),
    };
    macro_rules! set {
        ($($field:ident => $target:ident),* $(,)?) => {
            $(if let Some(v) = &c.$field { s.$target = v.clone(); })*
        };
    }
    set!(
        seed => seed, day => day, n_users => n_users, with_pevs => with_pevs,
        lambda => lambda, window_k => window_k, deadband => deadband, b_scope => b_scope,
        sellback => sellback, v2g => v2g_enabled, soc_floor_fraction => soc_floor_fraction,
        sweep_mode => sweep_mode, max_sweeps => max_sweeps, mse_tolerance => mse_tolerance,
    );
    macro_rules! set_opt {
        ($($field:ident),* $(,)?) => {
            $(if let Some(v) = &c.$field { s.$field = Some(v.clone()); })*
        };
    }
    set_opt!(horizon_days, fleet_file, da_prices, rt_prices, sigma_prices);
    Ok(s.resolve()?)
}

fn prepare_out_dir(dir: &Path, scenario: &Scenario) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    write_file(&dir.join("scenario.toml"), scenario.to_toml().as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_csv<F>(path: &Path, header: &[&str], rows: F) -> Result<(), CliError>
where
    F: FnOnce(&mut csv::Writer<fs::File>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    w.write_record(header).map_err(|e| io_error(path, e))?;
    rows(&mut w).map_err(|e| io_error(path, e))?;
    w.flush().map_err(|e| io_error(path, e))
}

#[derive(Serialize)]
struct CostText {
    ideal: String,
    real_uncoordinated: String,
    after_p1: String,
    after_p2: String,
}

impl From<&CostReport> for CostText {
    fn from(c: &CostReport) -> Self {
        Self {
            ideal: c.ideal.to_tenths(),
            real_uncoordinated: c.real_uncoordinated.to_tenths(),
            after_p1: CostReport::column_text(c.after_p1),
            after_p2: CostReport::column_text(c.after_p2),
        }
    }
}

#[derive(Serialize)]
struct DayReport<'a> {
    day: usize,
    sweep_mode: SweepMode,
    b_scope: BScope,
    costs: &'a CostReport,
    costs_display: CostText,
    outcome: &'a DayOutcome,
}

fn print_costs(out: &mut impl Write, label: &str, c: &CostReport) {
    let _ = writeln!(
        out,
        "{label:<8} ideal {:>14}  real {:>14}  after P1 {:>14}  after P2 {:>14}",
        c.ideal.to_tenths(),
        c.real_uncoordinated.to_tenths(),
        CostReport::column_text(c.after_p1),
        CostReport::column_text(c.after_p2),
    );
}

fn run_day_cmd(c: &Common) -> Result<(), CliError> {
    let scenario = build_scenario(c)?;
    let market = scenario.market_data()?;
    let fleets = scenario.fleet_source()?;
    let cfg = scenario.day_config();
    let outcome = simulate_day(&fleets, &market.da, &market.rt, &market.sigma, &cfg, scenario.day)?;

    let dir = &c.out_dir;
    prepare_out_dir(dir, &scenario)?;
    write_json(
        &dir.join("report.json"),
        &DayReport {
            day: scenario.day,
            sweep_mode: cfg.sweep_mode,
            b_scope: cfg.altering.b_scope,
            costs: &outcome.costs,
            costs_display: (&outcome.costs).into(),
            outcome: &outcome,
        },
    )?;
    write_csv(
        &dir.join("aggregates.csv"),
        &["hour", "uncoordinated", "after_p1", "after_p2", "da_purchase"],
        |w| {
            for h in 0..HOURS {
                w.write_record([
                    (h + 1).to_string(),
                    outcome.uncoordinated[h].to_string(),
                    outcome.after_p1[h].to_string(),
                    outcome.after_p2[h].to_string(),
                    outcome.da_purchase[h].to_string(),
                ])?;
            }
            Ok(())
        },
    )?;
    write_csv(
        &dir.join("events.csv"),
        &[
            "t0",
            "rt_price",
            "gamma",
            "b_sign",
            "sweeps_run",
            "aggregate_before",
            "aggregate_after",
            "skipped_users",
        ],
        |w| {
            for e in &outcome.events {
                let skipped: Vec<String> = e.skipped_users.iter().map(|u| u.to_string()).collect();
                w.write_record([
                    e.t0.to_string(),
                    e.rt_price.to_string(),
                    e.gamma.to_string(),
                    e.b_sign.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
                    e.sweeps_run.to_string(),
                    e.aggregate_before.to_string(),
                    e.aggregate_after.to_string(),
                    skipped.join(";"),
                ])?;
            }
            Ok(())
        },
    )?;
    let mut stdout = std::io::stdout();
    let _ = writeln!(
        stdout,
        "day {}: {} offline sweeps, {} altering events ({} mode)",
        scenario.day,
        outcome.offline.sweep_mse.len(),
        outcome.events.iter().filter(|e| e.b_sign.is_some()).count(),
        sweep_mode_name(cfg.sweep_mode),
    );
    print_costs(&mut stdout, "cost", &outcome.costs);
    Ok(())
}

fn sweep_mode_name(m: SweepMode) -> &'static str {
    match m {
        SweepMode::GaussSeidel => "gauss-seidel",
        SweepMode::Jacobi => "jacobi",
    }
}

#[derive(Serialize)]
struct YearReport<'a> {
    b_scope: BScope,
    totals_display: CostText,
    #[serde(flatten)]
    report: &'a HorizonReport,
}

fn money_cell(m: Option<Money>) -> String {
    m.map(|v| v.to_string()).unwrap_or_else(|| "N/A".into())
}

fn run_year_cmd(c: &Common) -> Result<(), CliError> {
    let scenario = build_scenario(c)?;
    let market = scenario.market_data()?;
    let fleets = scenario.fleet_source()?;
    let cfg = scenario.day_config();
    let days = scenario.horizon_days.unwrap_or(market.da.days());
    if days > market.da.days() {
        return Err(CliError::Usage(format!(
            "horizon_days {days} exceeds the {} days of price data",
            market.da.days()
        )));
    }
    let report = run_horizon(&fleets, &market.da, &market.rt, &market.sigma, &cfg, 1..=days)?;

    let dir = &c.out_dir;
    prepare_out_dir(dir, &scenario)?;
    write_json(
        &dir.join("report.json"),
        &YearReport {
            b_scope: cfg.altering.b_scope,
            totals_display: (&report.totals).into(),
            report: &report,
        },
    )?;
    write_csv(
        &dir.join("daily_costs.csv"),
        &[
            "day",
            "ideal",
            "real_uncoordinated",
            "after_p1",
            "after_p2",
            "offline_sweeps",
            "events_fired",
        ],
        |w| {
            for d in &report.days {
                w.write_record([
                    d.day.to_string(),
                    d.costs.ideal.to_string(),
                    d.costs.real_uncoordinated.to_string(),
                    money_cell(d.costs.after_p1),
                    money_cell(d.costs.after_p2),
                    d.offline_sweeps.to_string(),
                    d.events_fired.to_string(),
                ])?;
            }
            Ok(())
        },
    )?;
    let mut stdout = std::io::stdout();
    let _ = writeln!(
        stdout,
        "{days} days, {} users per day ({} mode)",
        scenario.n_users,
        sweep_mode_name(cfg.sweep_mode)
    );
    print_costs(&mut stdout, "total", &report.totals);
    Ok(())
}

fn stats_cmd(c: &Common) -> Result<(), CliError> {
    let scenario = build_scenario(c)?;
    let market = scenario.market_data()?;
    let da_sigma = hourly_std(&market.da);
    let rt_sigma = hourly_std(&market.rt);
    let day = DayPrices::from_matrices(&market.da, &market.rt, scenario.day).ok_or_else(|| {
        CliError::Usage(format!(
            "day {} outside the {} days of price data",
            scenario.day,
            market.da.days()
        ))
    })?;
    let cfg = scenario.day_config().altering;
    let mut trace = Vec::with_capacity(HOURS);
    let mut undefined = Vec::new();
    for t in 1..=HOURS {
        // A zero anchor sigma leaves the threshold undefined for that hour.
        let gamma = match threshold_gamma(&day, &market.sigma, &cfg.threshold, t, &day.rt[..t]) {
            Ok(g) => Some(g),
            Err(PriceError::DegenerateWeights { .. }) => {
                undefined.push(t);
                None
            }
            Err(e) => return Err(e.into()),
        };
        let sign =
            gamma.and_then(|g| crate::coordinator::retailer::decide_sign(day.rt[t - 1], g, cfg.threshold.deadband));
        trace.push((t, day.rt[t - 1], gamma, sign));
    }

    let dir = &c.out_dir;
    prepare_out_dir(dir, &scenario)?;
    write_csv(&dir.join("sigma.csv"), &["hour", "da_sigma", "rt_sigma"], |w| {
        for h in 1..=HOURS {
            w.write_record([h.to_string(), da_sigma.at(h).to_string(), rt_sigma.at(h).to_string()])?;
        }
        Ok(())
    })?;
    write_csv(&dir.join("gamma.csv"), &["hour", "rt_price", "gamma", "b_sign"], |w| {
        for (t, p, g, s) in &trace {
            w.write_record([
                t.to_string(),
                p.to_string(),
                g.map(|g| g.to_string()).unwrap_or_default(),
                s.map(|s| s.to_string()).unwrap_or_else(|| "none".into()),
            ])?;
        }
        Ok(())
    })?;
    let above = (1..=HOURS).filter(|&h| rt_sigma.at(h) >= da_sigma.at(h)).count();
    println!("RT sigma >= DA sigma in {above} of {HOURS} hours");
    if !undefined.is_empty() {
        eprintln!("threshold undefined (zero sigma) at hours {undefined:?}");
    }
    Ok(())
}

/// Scenario shipped next to the fixtures for the spike-day experiment.
const SPIKE_SCENARIO: &str = "\
# Two-day price files: an ordinary day, then the spike day.
# Threshold weights use the annual RT history.
da_prices = \"spike_day_da.csv\"
rt_prices = \"spike_day_rt.csv\"
sigma_prices = \"rt_prices.csv\"
fleet_file = \"fleet.csv\"
day = 2
";

const YEAR_SCENARIO: &str = "\
da_prices = \"da_prices.csv\"
rt_prices = \"rt_prices.csv\"
";

/// Writes the annual price pair, the spike-day pair, a fleet and two
/// scenario files into `dir`. Prices use `seed + 2`, the fleet `seed`.
pub fn make_fixtures(seed: u64, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let price_seed = seed.wrapping_add(2);
    let cfg = PriceSynthConfig::default();
    let (da, rt) = synthesize_prices(&cfg, price_seed)?;
    let (sda, srt) = spike_day(&cfg, price_seed)?;
    let scenario = Scenario::default();
    let users = synthesize_fleet(&scenario.fleet_config(), seed).map_err(|e| CliError::Data(e.to_string()))?;

    for (name, m) in [
        ("da_prices.csv", &da),
        ("rt_prices.csv", &rt),
        ("spike_day_da.csv", &sda),
        ("spike_day_rt.csv", &srt),
    ] {
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
        m.write_csv(file).map_err(|e| io_error(&path, e))?;
    }
    let path = dir.join("fleet.csv");
    let file = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
    write_fleet_csv(&users, file).map_err(|e| io_error(&path, e))?;
    write_file(&dir.join("spike_day.toml"), SPIKE_SCENARIO.as_bytes())?;
    write_file(&dir.join("year.toml"), YEAR_SCENARIO.as_bytes())?;
    println!("fixtures written to {}", dir.display());
    Ok(())
}
