//! Pieces shared by both solvers: the coupled Euler step for the mean
//! capacity and its costate, its adjoint, trajectory storage and summaries,
//! training configuration, and the deterministic parallel chunking.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approximator::OptimizerKind;
use crate::error::{Error, Result};
use crate::field::HeadKind;
use crate::model::{price, price_slope, DriftConvention, MarketParams};
use crate::paths::{em_step, pairwise_sum};

/// Samples per parallel work unit. Fixed so results never depend on the
/// thread count.
pub(crate) const CHUNK: usize = 32;

/// Noise stream reserved for evaluation rollouts; training iteration `k`
/// reads stream `k`.
pub const EVAL_STREAM: u32 = u32::MAX;

/// Euler step of `(X, Y)` under subsidy `v`, plus its adjoint.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PairStep<'a> {
    pub market: &'a MarketParams,
    pub gain: f64,
    pub dt: f64,
}

impl<'a> PairStep<'a> {
    pub fn new(market: &'a MarketParams, convention: DriftConvention, dt: f64) -> Self {
        PairStep {
            market,
            gain: convention.gain(market.c_a),
            dt,
        }
    }

    #[inline]
    pub fn alpha(&self, y: f64, v: f64) -> f64 {
        self.gain * (y - self.market.c_i + v)
    }

    /// Returns `(X_{i+1}, Y_{i+1})`. `z` is the costate's diffusion coefficient.
    #[inline]
    pub fn step(&self, t: f64, x: f64, y: f64, v: f64, z: f64, dw: f64) -> (f64, f64) {
        let m = self.market;
        let x1 = em_step(x, -m.delta * x + self.alpha(y, v), self.dt, m.sigma0, dw);
        let y1 = em_step(y, m.delta * y + m.c_p - price(&m.price, t, x), self.dt, z, dw);
        (x1, y1)
    }

    /// Pulls `(lx, ly)` = adjoints of `(X_{i+1}, Y_{i+1})` back to step `i`.
    /// `dz_dx_term` is `ly * dW * dz/dx`, which the caller gets from the
    /// network backward pass. `v` is treated as a constant.
    #[inline]
    pub fn adjoint(&self, t: f64, x: f64, lx: f64, ly: f64, dz_dx_term: f64) -> (f64, f64) {
        let m = self.market;
        let ax = lx * (1.0 - m.delta * self.dt) - ly * price_slope(&m.price, t, x) * self.dt + dz_dx_term;
        let ay = lx * self.gain * self.dt + ly * (1.0 + m.delta * self.dt);
        (ax, ay)
    }
}

/// Per-sample, per-grid-point arrays from one rollout, row-major
/// (`sample * (steps + 1) + point`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryBatch {
    pub batch: usize,
    pub steps: usize,
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    /// `mu^Y` for the game, the carried `phi` for the planner.
    pub y: Vec<f64>,
    /// Costate diffusion coefficient used at each point (last point unused).
    pub z: Vec<f64>,
    pub alpha: Vec<f64>,
    pub price: Vec<f64>,
    /// Subsidy; all zero for the game.
    pub subsidy: Vec<f64>,
    /// Planner value process; empty for the game.
    pub value: Vec<f64>,
    /// Planner value diffusion coefficient; empty for the game.
    pub z_value: Vec<f64>,
    /// Demand path (deterministic), one value per grid point; empty for the game.
    pub demand: Vec<f64>,
}

impl TrajectoryBatch {
    pub(crate) fn with_capacity(batch: usize, steps: usize, times: Vec<f64>, planner: bool) -> Self {
        let n = batch * (steps + 1);
        let planner_len = if planner { n } else { 0 };
        TrajectoryBatch {
            batch,
            steps,
            times,
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            alpha: Vec::with_capacity(n),
            price: Vec::with_capacity(n),
            subsidy: Vec::with_capacity(n),
            value: Vec::with_capacity(planner_len),
            z_value: Vec::with_capacity(planner_len),
            demand: Vec::new(),
        }
    }

    pub(crate) fn append(&mut self, other: TrajectoryBatch) {
        self.x.extend(other.x);
        self.y.extend(other.y);
        self.z.extend(other.z);
        self.alpha.extend(other.alpha);
        self.price.extend(other.price);
        self.subsidy.extend(other.subsidy);
        self.value.extend(other.value);
        self.z_value.extend(other.z_value);
    }

    #[inline]
    pub fn index(&self, sample: usize, point: usize) -> usize {
        sample * (self.steps + 1) + point
    }

    /// Values of `field` at grid point `point` across all samples.
    pub fn column(&self, field: &[f64], point: usize) -> Vec<f64> {
        (0..self.batch).map(|j| field[self.index(j, point)]).collect()
    }

    /// Terminal values of `field`.
    pub fn terminal(&self, field: &[f64]) -> Vec<f64> {
        self.column(field, self.steps)
    }

    pub fn mean_at(&self, field: &[f64], point: usize) -> f64 {
        pairwise_sum(&self.column(field, point)) / self.batch as f64
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        (0..=self.steps)
            .map(|i| {
                let mut xs = self.column(&self.x, i);
                let mean = |f: &[f64]| {
                    if f.is_empty() {
                        f64::NAN
                    } else {
                        self.mean_at(f, i)
                    }
                };
                let x_mean = pairwise_sum(&xs) / self.batch as f64;
                xs.sort_by(f64::total_cmp);
                SummaryRow {
                    t: self.times[i],
                    x_mean,
                    x_p05: quantile_sorted(&xs, 0.05),
                    x_p50: quantile_sorted(&xs, 0.5),
                    x_p95: quantile_sorted(&xs, 0.95),
                    y_mean: mean(&self.y),
                    alpha_mean: mean(&self.alpha),
                    price_mean: mean(&self.price),
                    subsidy_mean: mean(&self.subsidy),
                    value_mean: mean(&self.value),
                    demand: self.demand.get(i).copied().unwrap_or(f64::NAN),
                }
            })
            .collect()
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Cross-sample statistics at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SummaryRow {
    pub t: f64,
    pub x_mean: f64,
    pub x_p05: f64,
    pub x_p50: f64,
    pub x_p95: f64,
    pub y_mean: f64,
    pub alpha_mean: f64,
    pub price_mean: f64,
    pub subsidy_mean: f64,
    pub value_mean: f64,
    pub demand: f64,
}

/// Learning rate per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Geometric interpolation from `start` at the first iteration to `end` at the last.
    Exponential { start: f64, end: f64 },
}

impl LrSchedule {
    pub fn at(&self, k: usize, iterations: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Exponential { start, end } => {
                if iterations <= 1 {
                    start
                } else {
                    start * (end / start).powf(k as f64 / (iterations - 1) as f64)
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { lr } => lr > 0.0 && lr.is_finite(),
            LrSchedule::Exponential { start, end } => {
                start > 0.0 && end > 0.0 && start.is_finite() && end.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("learning rate {self:?}")))
        }
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Exponential { start: 1e-2, end: 1e-3 }
    }
}

/// Training hyper-parameters shared by both solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch: usize,
    pub iterations: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerKind,
    /// Set from the scenario file's `seeds` section.
    #[serde(skip)]
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Initial-value representation; `None` picks the solver's default.
    pub head: Option<HeadKind>,
    pub drift: DriftConvention,
    /// Planner only: use `Z_V` instead of `Z_V / sigma0` in the subsidy rule.
    pub undivided_z: bool,
    /// Evaluation samples; defaults to `10 * batch`.
    pub eval_batch: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch: 2000,
            iterations: 1000,
            lr: LrSchedule::default(),
            optimizer: OptimizerKind::Adam,
            seed: 0,
            hidden: vec![32, 32],
            head: None,
            drift: DriftConvention::HalfInverse,
            undivided_z: false,
            eval_batch: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.iterations == 0 {
            return Err(Error::InvalidParams("batch and iterations must be >= 1".into()));
        }
        if self.iterations >= EVAL_STREAM as usize {
            return Err(Error::InvalidParams("too many iterations for the stream layout".into()));
        }
        if self.eval_batch == Some(0) {
            return Err(Error::InvalidParams("eval_batch must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidParams(format!("hidden widths {:?}", self.hidden)));
        }
        self.lr.validate()
    }

    pub fn eval_samples(&self) -> usize {
        self.eval_batch.unwrap_or(10 * self.batch)
    }
}

/// Independent seed for a named component.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `f` over fixed chunks of `0..batch` in parallel; results come back
/// in chunk order.
pub(crate) fn par_chunks<T, F>(batch: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<T> + Sync,
{
    let n = batch.div_ceil(CHUNK);
    (0..n)
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(batch)))
        .collect()
}

/// Snapshot/restart policy: a loss above `1e6 x` the first loss, or a
/// non-finite one, rolls back to the last snapshot with half the learning
/// rate. A second blow-up is fatal.
pub(crate) struct DivergenceGuard {
    initial: Vec<f64>,
    pub restarts: Vec<usize>,
    pub lr_factor: f64,
}

pub(crate) const SNAPSHOT_EVERY: usize = 50;

pub(crate) enum Verdict {
    Continue,
    Restart,
}

impl DivergenceGuard {
    pub fn new() -> Self {
        DivergenceGuard {
            initial: Vec::new(),
            restarts: Vec::new(),
            lr_factor: 1.0,
        }
    }

    pub fn check(&mut self, k: usize, losses: &[f64], trace: &[f64]) -> Result<Verdict> {
        if self.initial.is_empty() && losses.iter().all(|l| l.is_finite()) {
            self.initial = losses.iter().map(|l| l.max(f64::MIN_POSITIVE)).collect();
        }
        let blown = losses
            .iter()
            .enumerate()
            .any(|(g, l)| !l.is_finite() || self.initial.get(g).is_some_and(|i| *l > 1e6 * i));
        if !blown {
            return Ok(Verdict::Continue);
        }
        let worst = losses.iter().copied().fold(0.0f64, |a, b| if b.is_finite() { a.max(b) } else { b });
        if !self.restarts.is_empty() {
            return Err(Error::Divergence {
                iteration: k,
                loss: worst,
                trace: trace.to_vec(),
            });
        }
        log::warn!("loss {worst:e} at iteration {k}: restarting from snapshot with half the learning rate");
        self.restarts.push(k);
        self.lr_factor *= 0.5;
        Ok(Verdict::Restart)
    }
}
