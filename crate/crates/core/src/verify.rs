//! Re-checks a finished run directory against the model invariants, using
//! only what was written to disk.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::export::{self, read_csv, SolveReport, MFG_COLUMNS, PLANNER_COLUMNS};
use crate::mfg::MfgScenario;
use crate::model::{price, DriftConvention, MarketParams, PriceModel};
use crate::oracles::{capped_y, costate_lower, costate_upper, shoot_deterministic};
use crate::paths::Grid;
use crate::rollout::TrainingConfig;
use crate::stackelberg::{foc_residual, subsidy, StackelbergScenario};

/// Relative slack of the costate bounds, as a fraction of `y_u(0)`.
pub const BOUND_SLACK: f64 = 0.02;
/// Largest accepted relative first-order-condition residual.
pub const FOC_TOL: f64 = 1e-6;
/// Distance from the clamp below which a subsidy counts as interior.
pub const INTERIOR_MARGIN: f64 = 1e-6;
/// Tolerance when recomputing a stored column from other stored columns.
const RECOMPUTE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, ok: bool, detail: String) -> Self {
        Check {
            name,
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
        }
    }

    fn skip(name: &'static str, why: &str) -> Self {
        Check {
            name,
            status: Status::Skip,
            detail: why.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub solver: String,
    pub checks: Vec<Check>,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.status == Status::Fail)
    }
}

impl fmt::Display for Verification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &self.checks {
            writeln!(f, "{}  {:width$}  {}", c.status, c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Named columns of one CSV file.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn load(path: &Path, expected: &[&str]) -> Result<Self> {
        let (header, rows) = read_csv(path)?;
        if header != expected {
            return Err(Error::format(path, format!("header {header:?}, expected {expected:?}")));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != header.len()) {
            return Err(Error::format(path, format!("row with {} fields", bad.len())));
        }
        Ok(Table { header, rows })
    }

    fn col(&self, name: &str) -> usize {
        self.header.iter().position(|h| h == name).expect("column checked at load")
    }

    fn values(&self, name: &str) -> impl Iterator<Item = f64> + '_ {
        let c = self.col(name);
        self.rows.iter().map(move |r| r[c])
    }
}

/// Everything the checks need besides the tables.
struct Run {
    market: MarketParams,
    grid: Grid,
    mu0: f64,
    gain: f64,
}

fn scenario<T: serde::de::DeserializeOwned>(report: &SolveReport, path: &Path) -> Result<T> {
    serde_json::from_value(report.scenario.clone()).map_err(|e| Error::format(path, format!("scenario: {e}")))
}

/// Runs every applicable check on `dir`.
pub fn verify_run(dir: &Path) -> Result<Verification> {
    let report_path = dir.join(export::REPORT);
    let report = SolveReport::read(&report_path)?;
    let checks = match report.solver.as_str() {
        "mfg" => {
            let scn: MfgScenario = scenario(&report, &report_path)?;
            verify_mfg(dir, &scn, &report)?
        }
        "stackelberg" => {
            let scn: StackelbergScenario = scenario(&report, &report_path)?;
            verify_planner(dir, &scn, &report)?
        }
        other => return Err(Error::format(&report_path, format!("unknown solver `{other}`"))),
    };
    Ok(Verification {
        solver: report.solver,
        checks,
    })
}

fn common_checks(run: &Run, summary: &Table, samples: &Table, costate: &str) -> Vec<Check> {
    let mut out = Vec::new();
    let finite = summary.rows.iter().chain(&samples.rows).flatten().all(|v| v.is_finite());
    out.push(Check::new("finite_values", finite, "all stored numbers finite".into()));

    let times = run.grid.times();
    let summary_t: Vec<f64> = summary.values("t").collect();
    let grid_ok = summary_t.len() == times.len()
        && summary_t.iter().zip(&times).all(|(a, b)| (a - b).abs() <= 1e-12 * run.grid.horizon.max(1.0));
    out.push(Check::new(
        "time_grid",
        grid_ok,
        format!("{} summary rows for N = {}", summary_t.len(), run.grid.steps),
    ));

    let starts_ok = samples
        .rows
        .iter()
        .filter(|r| r[samples.col("t")] == 0.0)
        .all(|r| r[samples.col("muX")] == run.mu0);
    out.push(Check::new("initial_state", starts_ok, format!("muX(0) = {}", run.mu0)));

    // costate bounds on every stored sample state and on the mean path
    let horizon = run.grid.horizon;
    let eps = BOUND_SLACK * costate_upper(0.0, horizon, &run.market).abs();
    let mean_col = if costate == "muY" { "muY_mean" } else { "phi_mean" };
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0usize;
    let pairs = samples
        .rows
        .iter()
        .map(|r| (r[samples.col("t")], r[samples.col(costate)]))
        .chain(summary.rows.iter().map(|r| (r[summary.col("t")], r[summary.col(mean_col)])));
    for (t, y) in pairs {
        let lo = costate_lower(t, horizon, &run.market) - eps;
        let hi = costate_upper(t, horizon, &run.market) + eps;
        let excess = (lo - y).max(y - hi);
        worst = worst.max(excess);
        if excess > 0.0 || !y.is_finite() {
            violations += 1;
        }
    }
    out.push(Check::new(
        "costate_bounds",
        violations == 0,
        format!("{violations} states outside [y_l - eps, y_u + eps], eps = {eps:.4}, worst excess {worst:.4}"),
    ));

    let mut price_err = 0.0f64;
    for r in &samples.rows {
        let p = price(&run.market.price, r[samples.col("t")], r[samples.col("muX")]);
        price_err = price_err.max((p - r[samples.col("price")]).abs() / p.abs().max(1.0));
    }
    out.push(Check::new(
        "price_rule",
        price_err <= RECOMPUTE_TOL,
        format!("max relative deviation {price_err:.2e}"),
    ));

    let terminal: Vec<f64> = samples
        .rows
        .iter()
        .filter(|r| (r[samples.col("t")] - horizon).abs() <= 1e-12 * horizon.max(1.0))
        .map(|r| r[samples.col(costate)])
        .collect();
    let rms = (terminal.iter().map(|y| y * y).sum::<f64>() / terminal.len().max(1) as f64).sqrt();
    out.push(Check::new(
        "terminal_condition",
        !terminal.is_empty() && rms <= eps,
        format!("rms {costate}(T) = {rms:.4} over {} samples (limit {eps:.4})", terminal.len()),
    ));

    out
}

fn verify_mfg(dir: &Path, scn: &MfgScenario, report: &SolveReport) -> Result<Vec<Check>> {
    let summary = Table::load(&dir.join(export::TRAJECTORIES), &MFG_COLUMNS)?;
    let samples = Table::load(&dir.join(export::SAMPLES), &["sample", "t", "muX", "muY", "z", "alpha", "price"])?;
    let cfg = &report.config;
    let run = Run {
        market: scn.market,
        grid: scn.grid,
        mu0: scn.mu0,
        gain: cfg.drift.gain(scn.market.c_a),
    };
    let mut out = common_checks(&run, &summary, &samples, "muY");

    let mut alpha_err = 0.0f64;
    for r in &samples.rows {
        let want = run.gain * (r[samples.col("muY")] - run.market.c_i);
        alpha_err = alpha_err.max((want - r[samples.col("alpha")]).abs() / want.abs().max(1.0));
    }
    out.push(Check::new(
        "control_rule",
        alpha_err <= RECOMPUTE_TOL,
        format!("alpha = gain (muY - c_i), max relative deviation {alpha_err:.2e}"),
    ));

    let y0 = summary.rows.first().map(|r| r[summary.col("muY_mean")]).unwrap_or(f64::NAN);
    let reported = report.initial_values.get("y0").copied().unwrap_or(f64::NAN);
    out.push(Check::new(
        "report_consistency",
        (y0 - reported).abs() <= RECOMPUTE_TOL * reported.abs().max(1.0),
        format!("report y0 {reported}, CSV muY(0) {y0}"),
    ));

    out.push(capped_regime_check(&run, &samples, y0));
    out.push(deterministic_check(&run, cfg, &summary)?);
    Ok(out)
}

/// When every stored price sits at the cap the costate has a closed form.
fn capped_regime_check(run: &Run, samples: &Table, y0: f64) -> Check {
    let cap = run.market.price.cap();
    if !samples.values("price").all(|p| p == cap) {
        return Check::skip("capped_closed_form", "price leaves the cap on stored samples");
    }
    let want = capped_y(0.0, run.grid.horizon, run.market.delta, cap, run.market.c_p);
    let rel = (y0 - want).abs() / want.abs();
    Check::new(
        "capped_closed_form",
        rel <= 0.01,
        format!("muY(0) = {y0:.4}, closed form {want:.4}, relative error {rel:.2e} (limit 1e-2)"),
    )
}

/// Small common noise: the mean path should follow the deterministic oracle.
fn deterministic_check(run: &Run, cfg: &TrainingConfig, summary: &Table) -> Result<Check> {
    const NOISE_LIMIT: f64 = 1e-2;
    if run.market.sigma0.abs() > NOISE_LIMIT {
        return Ok(Check::skip("deterministic_oracle", "common noise too large for the shooting oracle"));
    }
    if cfg.drift != DriftConvention::HalfInverse {
        return Ok(Check::skip("deterministic_oracle", "oracle uses the 1/(2 c_a) drift"));
    }
    let market = MarketParams {
        sigma0: 0.0,
        ..run.market
    };
    let shot = shoot_deterministic(&market, &run.grid, run.mu0)?;
    let (mut dx, mut dy) = (0.0f64, 0.0f64);
    let (mut xr, mut yr) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
    for (k, r) in summary.rows.iter().enumerate() {
        let (x, y) = shot.at_grid(k);
        dx = dx.max((x - r[summary.col("muX_mean")]).abs());
        dy = dy.max((y - r[summary.col("muY_mean")]).abs());
        xr = (xr.0.min(x), xr.1.max(x));
        yr = (yr.0.min(y), yr.1.max(y));
    }
    let rx = dx / (xr.1 - xr.0).max(f64::MIN_POSITIVE);
    let ry = dy / (yr.1 - yr.0).max(f64::MIN_POSITIVE);
    Ok(Check::new(
        "deterministic_oracle",
        rx < 0.01 && ry < 0.01,
        format!("sup error / range: muX {rx:.2e}, muY {ry:.2e} (limit 1e-2)"),
    ))
}

fn verify_planner(dir: &Path, scn: &StackelbergScenario, report: &SolveReport) -> Result<Vec<Check>> {
    let summary = Table::load(&dir.join(export::TRAJECTORIES), &PLANNER_COLUMNS)?;
    let samples = Table::load(
        &dir.join(export::SAMPLES),
        &["sample", "t", "muX", "phi", "z_phi", "alpha", "price", "v_hat", "V", "zV", "D"],
    )?;
    let cfg = &report.config;
    let m = scn.market;
    let run = Run {
        market: m,
        grid: scn.grid,
        mu0: scn.mu0,
        gain: cfg.drift.gain(m.c_a),
    };
    let mut out = common_checks(&run, &summary, &samples, "phi");
    let bound = scn.planner.subsidy_bound;

    let outside = samples
        .values("v_hat")
        .chain(summary.values("v_hat_mean"))
        .filter(|v| !(v.abs() <= bound))
        .count();
    out.push(Check::new(
        "clamp",
        outside == 0,
        format!("{outside} subsidies outside [-{bound}, {bound}]"),
    ));

    let col = |name| samples.col(name);
    let (mut rule_err, mut alpha_err) = (0.0f64, 0.0f64);
    let (mut foc_worst, mut interior) = (0.0f64, 0usize);
    for r in &samples.rows {
        let (t, x, phi, zv, v) = (r[col("t")], r[col("muX")], r[col("phi")], r[col("zV")], r[col("v_hat")]);
        let want = subsidy(phi, zv, m.sigma0, m.c_i, bound, cfg.undivided_z);
        rule_err = rule_err.max((want - v).abs() / want.abs().max(1.0));
        let a = run.gain * (phi - m.c_i + v);
        alpha_err = alpha_err.max((a - r[col("alpha")]).abs() / a.abs().max(1.0));
        if v.abs() < bound - INTERIOR_MARGIN {
            interior += 1;
            let res = foc_residual(&m, &scn.planner, t, x, phi, zv, v, r[col("D")], cfg.undivided_z);
            foc_worst = foc_worst.max(res);
        }
    }
    out.push(Check::new(
        "subsidy_rule",
        rule_err <= RECOMPUTE_TOL,
        format!("v_hat recomputed from (phi, zV), max relative deviation {rule_err:.2e}"),
    ));
    out.push(Check::new(
        "control_rule",
        alpha_err <= RECOMPUTE_TOL,
        format!("alpha = gain (phi - c_i + v_hat), max relative deviation {alpha_err:.2e}"),
    ));
    if cfg.drift == DriftConvention::HalfInverse {
        out.push(Check::new(
            "foc_residual",
            foc_worst < FOC_TOL,
            format!("{interior} interior rows, worst relative residual {foc_worst:.2e} (limit {FOC_TOL:.0e})"),
        ));
    } else {
        out.push(Check::skip("foc_residual", "first-order condition assumes the 1/(2 c_a) drift"));
    }

    let mut demand_err = 0.0f64;
    for (r, d) in summary.rows.iter().zip(scn.demand_path()) {
        demand_err = demand_err.max((r[summary.col("D")] - d).abs());
    }
    out.push(Check::new(
        "demand_path",
        demand_err <= RECOMPUTE_TOL * scn.demand.initial().abs().max(1.0),
        format!("max deviation {demand_err:.2e}"),
    ));

    if matches!(m.price, PriceModel::Constant { .. }) && scn.planner.subsidy_bound == 0.0 {
        let phi0 = summary.rows.first().map(|r| r[summary.col("phi_mean")]).unwrap_or(f64::NAN);
        out.push(capped_regime_check(&run, &samples, phi0));
    }
    Ok(out)
}
