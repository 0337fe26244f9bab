//! Independent reference solutions used to check the trained solvers:
//! closed forms for the capped-price regime, a deterministic shooting solver
//! (RK4 on a grid ten times finer than the solver's) and an explicit
//! finite-difference solver for the decoupling-field PDE.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{price, MarketParams};
use crate::paths::Grid;

/// `int_t^T e^{-delta (s - t)} ds`, stable for small `delta`.
fn discount_integral(t: f64, horizon: f64, delta: f64) -> f64 {
    -(-delta * (horizon - t)).exp_m1() / delta
}

/// Costate when the price stays at `cap` for the rest of the horizon.
pub fn capped_y(t: f64, horizon: f64, delta: f64, cap: f64, c_p: f64) -> f64 {
    (cap - c_p) * discount_integral(t, horizon, delta)
}

/// Lower costate bound: the price never covers production cost.
pub fn costate_lower(t: f64, horizon: f64, market: &MarketParams) -> f64 {
    -market.c_p * discount_integral(t, horizon, market.delta)
}

/// Upper costate bound: the price sits at its cap.
pub fn costate_upper(t: f64, horizon: f64, market: &MarketParams) -> f64 {
    capped_y(t, horizon, market.delta, market.price.cap(), market.c_p)
}

/// Time at which the capped-regime installation rate changes sign, i.e.
/// `capped_y(t*) = c_i`.
pub fn alpha_crossing(horizon: f64, delta: f64, cap: f64, c_p: f64, c_i: f64) -> Result<f64> {
    let max = capped_y(0.0, horizon, delta, cap, c_p);
    if !(c_i > 0.0) || c_i > max * (1.0 + 1e-12) {
        return Err(Error::NoCrossing { c_i, max });
    }
    let t = horizon + (-delta * c_i / (cap - c_p)).ln_1p() / delta;
    Ok(t.max(0.0))
}

/// Deterministic equilibrium paths on the fine oracle grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootingSolution {
    pub y0: f64,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Fine steps per solver step.
    pub refinement: usize,
}

impl ShootingSolution {
    /// Values at the solver grid point `k`.
    pub fn at_grid(&self, k: usize) -> (f64, f64) {
        let i = k * self.refinement;
        (self.x[i], self.y[i])
    }
}

fn rhs(market: &MarketParams, t: f64, x: f64, y: f64) -> (f64, f64) {
    (
        -market.delta * x + (y - market.c_i) / (2.0 * market.c_a),
        market.delta * y + market.c_p - price(&market.price, t, x),
    )
}

fn integrate(market: &MarketParams, horizon: f64, steps: usize, mu0: f64, y0: f64, keep: bool)
    -> (Vec<f64>, Vec<f64>, f64) {
    let h = horizon / steps as f64;
    let (mut x, mut y) = (mu0, y0);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    if keep {
        xs.reserve(steps + 1);
        ys.reserve(steps + 1);
        xs.push(x);
        ys.push(y);
    }
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = rhs(market, t, x, y);
        let k2 = rhs(market, t + h / 2.0, x + h / 2.0 * k1.0, y + h / 2.0 * k1.1);
        let k3 = rhs(market, t + h / 2.0, x + h / 2.0 * k2.0, y + h / 2.0 * k2.1);
        let k4 = rhs(market, t + h, x + h * k3.0, y + h * k3.1);
        x += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        y += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        if keep {
            xs.push(x);
            ys.push(y);
        }
    }
    (xs, ys, y)
}

/// Solves `x' = -delta x + (y - c_i) / (2 c_a)`, `y' = delta y + c_p - P(t, x)`,
/// `x(0) = mu0`, `y(T) = 0` by shooting on `y(0)`.
pub fn shoot_deterministic(market: &MarketParams, grid: &Grid, mu0: f64) -> Result<ShootingSolution> {
    if market.sigma0 != 0.0 {
        return Err(Error::InvalidParams(format!(
            "shooting oracle needs sigma0 = 0 (deterministic limit), got {}",
            market.sigma0
        )));
    }
    market.validate()?;
    grid.validate()?;
    let refinement = 10;
    let steps = refinement * grid.steps;
    let horizon = grid.horizon;
    let upper = costate_upper(0.0, horizon, market);
    let lower = costate_lower(0.0, horizon, market);
    let tol = 1e-8 * upper.abs().max(1.0);
    let terminal = |y0: f64| integrate(market, horizon, steps, mu0, y0, false).2;

    // y(T) increases with y(0); scan a widened bound interval for a sign change
    let width = (upper - lower).max(1.0);
    let (lo_edge, hi_edge) = (lower - width, upper + width);
    let n_scan = 40;
    let mut scan = Vec::with_capacity(n_scan + 1);
    let mut bracket = None;
    for k in 0..=n_scan {
        let y0 = lo_edge + (hi_edge - lo_edge) * k as f64 / n_scan as f64;
        let f = terminal(y0);
        if let Some(&(prev_y0, prev_f)) = scan.last() {
            if prev_f <= 0.0 && f >= 0.0 {
                bracket = Some((prev_y0, prev_f, y0, f));
                scan.push((y0, f));
                break;
            }
        }
        scan.push((y0, f));
    }
    let (mut a, mut fa, mut b, mut fb) = bracket.ok_or(Error::BracketNotFound { scan })?;

    let mut best = if fa.abs() < fb.abs() { (a, fa) } else { (b, fb) };
    for _ in 0..200 {
        if best.1.abs() < tol {
            break;
        }
        // bisection, with a secant probe when it lands inside the bracket
        let secant = if fb != fa { b - fb * (b - a) / (fb - fa) } else { f64::NAN };
        let mid = 0.5 * (a + b);
        let probe = if secant.is_finite() && secant > a && secant < b {
            let fs = terminal(secant);
            if fs.abs() < best.1.abs() {
                best = (secant, fs);
            }
            if fs.abs() < tol {
                break;
            }
            if fs < 0.0 {
                a = secant;
                fa = fs;
            } else {
                b = secant;
                fb = fs;
            }
            mid.clamp(a, b)
        } else {
            mid
        };
        let fm = terminal(probe);
        if fm.abs() < best.1.abs() {
            best = (probe, fm);
        }
        if fm < 0.0 {
            a = probe;
            fa = fm;
        } else {
            b = probe;
            fb = fm;
        }
        if b - a <= f64::EPSILON * b.abs().max(1.0) {
            break;
        }
    }
    let y0 = best.0;
    let (x, y, _) = integrate(market, horizon, steps, mu0, y0, true);
    let h = horizon / steps as f64;
    Ok(ShootingSolution {
        y0,
        times: (0..=steps).map(|k| k as f64 * h).collect(),
        x,
        y,
        refinement,
    })
}

/// Decoupling field sampled on a time x state mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiTable {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    /// Row-major, one row per time.
    pub values: Vec<f64>,
}

impl PhiTable {
    pub fn value(&self, ti: usize, xi: usize) -> f64 {
        self.values[ti * self.xs.len() + xi]
    }

    pub fn row(&self, ti: usize) -> &[f64] {
        let n = self.xs.len();
        &self.values[ti * n..(ti + 1) * n]
    }

    fn locate(grid: &[f64], v: f64) -> (usize, f64) {
        let n = grid.len();
        if n == 1 || v <= grid[0] {
            return (0, 0.0);
        }
        if v >= grid[n - 1] {
            return (n - 2, 1.0);
        }
        let step = (grid[n - 1] - grid[0]) / (n - 1) as f64;
        let mut i = (((v - grid[0]) / step).floor() as usize).min(n - 2);
        while i > 0 && v < grid[i] {
            i -= 1;
        }
        while i < n - 2 && v >= grid[i + 1] {
            i += 1;
        }
        (i, (v - grid[i]) / (grid[i + 1] - grid[i]))
    }

    /// Bilinear interpolation; states outside the mesh are clamped to its ends.
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let (ti, wt) = Self::locate(&self.times, t);
        let (xi, wx) = Self::locate(&self.xs, x);
        let t1 = (ti + 1).min(self.times.len() - 1);
        let x1 = (xi + 1).min(self.xs.len() - 1);
        let a = self.value(ti, xi) * (1.0 - wx) + self.value(ti, x1) * wx;
        let b = self.value(t1, xi) * (1.0 - wx) + self.value(t1, x1) * wx;
        a * (1.0 - wt) + b * wt
    }

    /// Mesh dump with header `t,x,phi`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "t,x,phi")?;
            for (ti, t) in self.times.iter().enumerate() {
                for (xi, x) in self.xs.iter().enumerate() {
                    writeln!(out, "{t},{x},{}", self.value(ti, xi))?;
                }
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Mesh for [`solve_phi_fd`]. Values are stored at every solver grid time;
/// each solver step is split into `substeps` explicit steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub x_min: f64,
    pub x_max: f64,
    /// Number of cells; the mesh has `cells + 1` nodes.
    pub cells: usize,
    pub substeps: usize,
}

/// Subsidy feedback `v(t, x, phi)` and a bound on its magnitude.
pub struct Feedback<'a> {
    pub bound: f64,
    pub rule: &'a (dyn Fn(f64, f64, f64) -> f64 + Sync),
}

impl FdConfig {
    fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.cells as f64
    }

    /// Smallest `substeps` keeping the explicit scheme monotone:
    /// `dt_fd (|b|_max / dx + sigma0^2 / dx^2 + delta) <= 1`.
    pub fn required_substeps(&self, market: &MarketParams, grid: &Grid, v_bound: f64) -> usize {
        let dx = self.dx();
        let y_span = costate_upper(0.0, grid.horizon, market)
            .abs()
            .max(costate_lower(0.0, grid.horizon, market).abs());
        let b_max = market.delta * self.x_min.abs().max(self.x_max.abs())
            + (y_span + market.c_i + v_bound) / (2.0 * market.c_a);
        let rate = b_max / dx + market.sigma0 * market.sigma0 / (dx * dx) + market.delta;
        (grid.dt() * rate).ceil().max(1.0) as usize
    }

    /// Mesh covering `mu0` plus five common-noise standard deviations and the
    /// largest drift excursion, with `substeps` set to the stability minimum.
    pub fn covering(market: &MarketParams, grid: &Grid, mu0: f64, cells: usize, v_bound: f64) -> Self {
        let y_span = costate_upper(0.0, grid.horizon, market)
            .abs()
            .max(costate_lower(0.0, grid.horizon, market).abs());
        let half = 5.0 * market.sigma0.abs() * grid.horizon.sqrt()
            + grid.horizon
                * (market.delta * mu0.abs() + (y_span + market.c_i + v_bound) / (2.0 * market.c_a));
        let mut cfg = FdConfig {
            x_min: mu0 - half,
            x_max: mu0 + half,
            cells,
            substeps: 1,
        };
        cfg.substeps = cfg.required_substeps(market, grid, v_bound);
        cfg
    }
}

/// Backward explicit solve of the decoupling-field PDE
/// `phi_t + b phi_x + sigma0^2/2 phi_xx - delta phi - c_p + P = 0`,
/// `b = -delta x + (phi - c_i + v) / (2 c_a)`, `phi(T, .) = 0`, with upwinded
/// advection, centred diffusion and zero-slope ends.
pub fn solve_phi_fd(market: &MarketParams, grid: &Grid, cfg: &FdConfig, feedback: Option<&Feedback>)
    -> Result<PhiTable> {
    market.validate()?;
    grid.validate()?;
    if cfg.cells < 2 || !(cfg.x_max > cfg.x_min) {
        return Err(Error::InvalidParams(format!("bad finite-difference mesh {cfg:?}")));
    }
    let v_bound = feedback.map_or(0.0, |f| f.bound);
    let required = cfg.required_substeps(market, grid, v_bound);
    if cfg.substeps < required {
        return Err(Error::Unstable {
            steps: cfg.substeps * grid.steps,
            required: required * grid.steps,
        });
    }
    let n = cfg.cells + 1;
    let dx = cfg.dx();
    let xs: Vec<f64> = (0..n).map(|k| cfg.x_min + k as f64 * dx).collect();
    let dt = grid.dt() / cfg.substeps as f64;
    let gain = 1.0 / (2.0 * market.c_a);
    let half_var = 0.5 * market.sigma0 * market.sigma0;
    // the linear decay term is integrated exactly, so the capped regime is reproduced
    let decay = (-market.delta * dt).exp();
    let source = -(-market.delta * dt).exp_m1() / market.delta;

    let mut values = vec![0.0; (grid.steps + 1) * n];
    let mut phi = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut prices = vec![0.0; n];
    for step in (0..grid.steps).rev() {
        for sub in (0..cfg.substeps).rev() {
            // time of the level being stepped from
            let t = grid.time(step) + (sub + 1) as f64 * dt;
            for (p, &x) in prices.iter_mut().zip(&xs) {
                *p = price(&market.price, t, x);
            }
            for k in 1..n - 1 {
                let v = feedback.map_or(0.0, |f| (f.rule)(t, xs[k], phi[k]));
                let b = -market.delta * xs[k] + gain * (phi[k] - market.c_i + v);
                let slope = if b > 0.0 {
                    (phi[k + 1] - phi[k]) / dx
                } else {
                    (phi[k] - phi[k - 1]) / dx
                };
                let curv = (phi[k + 1] - 2.0 * phi[k] + phi[k - 1]) / (dx * dx);
                next[k] = decay * phi[k]
                    + dt * (b * slope + half_var * curv)
                    + source * (prices[k] - market.c_p);
            }
            next[0] = next[1];
            next[n - 1] = next[n - 2];
            std::mem::swap(&mut phi, &mut next);
        }
        if let Some(k) = phi.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "finite-difference value",
                step: step * n + k,
            });
        }
        values[step * n..(step + 1) * n].copy_from_slice(&phi);
    }
    Ok(PhiTable {
        times: grid.times(),
        xs,
        values,
    })
}
