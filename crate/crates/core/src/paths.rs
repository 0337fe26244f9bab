//! Reproducible Brownian increments and Euler–Maruyama stepping.
//!
//! Increments come from a counter-based generator: ChaCha8 keyed on the seed,
//! with the 64-bit stream id built from `(stream, sample)` and the word
//! position from the step index. Any single increment can therefore be
//! regenerated in isolation, and batch order or thread scheduling never
//! changes a sample. Uniforms are mapped to Gaussians by the inverse normal
//! CDF.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{DriftConvention, MarketParams};

/// Regular time grid `t_k = k T / N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub steps: usize,
}

impl Grid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        let grid = Grid { horizon, steps };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidParams(format!(
                "grid needs T > 0 and N >= 1, got T = {}, N = {}",
                self.horizon, self.steps
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// Addresses a `batch x steps` block of increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub seed: u64,
    pub stream: u32,
    pub batch: usize,
    pub steps: usize,
}

fn stream_id(stream: u32, sample: usize) -> u64 {
    assert!(sample <= u32::MAX as usize, "sample index exceeds 32 bits");
    ((stream as u64) << 32) | sample as u64
}

fn unit_open(bits: u64) -> f64 {
    // 53 random bits centred in their cell: strictly inside (0, 1)
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn standard_normal(bits: u64) -> f64 {
    thread_local! {
        static STD: Normal = Normal::standard();
    }
    STD.with(|n| n.inverse_cdf(unit_open(bits)))
}

/// Standard-normal draws `(sample, 0..steps)`, one per step.
fn normal_row(seed: u64, stream: u32, sample: usize, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(stream, sample));
    for z in out.iter_mut() {
        *z = standard_normal(rng.next_u64());
    }
}

/// A single `N(0, dt)` increment, computed without generating its neighbours.
pub fn increment(seed: u64, stream: u32, sample: usize, step: usize, dt: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(stream, sample));
    // each u64 consumes two 32-bit words
    rng.set_word_pos(2 * step as u128);
    standard_normal(rng.next_u64()) * dt.sqrt()
}

/// Row-major `batch x steps` array of increments.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub batch: usize,
    pub steps: usize,
    pub data: Vec<f64>,
}

impl Increments {
    pub fn row(&self, sample: usize) -> &[f64] {
        &self.data[sample * self.steps..(sample + 1) * self.steps]
    }

    pub fn get(&self, sample: usize, step: usize) -> f64 {
        self.data[sample * self.steps + step]
    }
}

/// Fills `out` with the increments of one sample of `plan`.
pub fn increment_row(plan: &NoisePlan, sample: usize, dt: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), plan.steps);
    normal_row(plan.seed, plan.stream, sample, out);
    let sd = dt.sqrt();
    for z in out.iter_mut() {
        *z *= sd;
    }
}

/// i.i.d. `N(0, dt)` increments for every `(sample, step)` of the plan.
pub fn increments(plan: &NoisePlan, dt: f64) -> Result<Increments> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParams(format!("dt must be positive, got {dt}")));
    }
    let mut data = vec![0.0; plan.batch * plan.steps];
    if plan.steps > 0 {
        for (j, row) in data.chunks_mut(plan.steps).enumerate() {
            increment_row(plan, j, dt, row);
        }
    }
    Ok(Increments {
        batch: plan.batch,
        steps: plan.steps,
        data,
    })
}

/// `x + drift dt + vol dW`.
#[inline]
pub fn em_step(x: f64, drift: f64, dt: f64, vol: f64, dw: f64) -> f64 {
    x + drift * dt + vol * dw
}

/// Addresses the two noise sources of one individual producer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProducerNoise {
    pub seed: u64,
    /// Common shock, shared by every producer reading the same `(stream, sample)`.
    pub common_stream: u32,
    pub common_sample: usize,
    pub idiosyncratic_stream: u32,
    pub idiosyncratic_sample: usize,
}

/// Euler–Maruyama path of one producer who installs at the optimal rate
/// given the equilibrium costate path `y_path` (one value per grid point).
pub fn simulate_producer(
    params: &MarketParams,
    grid: &Grid,
    y_path: &[f64],
    x0: f64,
    noise: &ProducerNoise,
) -> Result<Vec<f64>> {
    simulate_producer_with(params, grid, y_path, x0, noise, DriftConvention::default())
}

pub fn simulate_producer_with(
    params: &MarketParams,
    grid: &Grid,
    y_path: &[f64],
    x0: f64,
    noise: &ProducerNoise,
    convention: DriftConvention,
) -> Result<Vec<f64>> {
    grid.validate()?;
    if y_path.len() != grid.steps + 1 {
        return Err(Error::ShapeMismatch {
            expected: grid.steps + 1,
            got: y_path.len(),
        });
    }
    if !x0.is_finite() {
        return Err(Error::InvalidParams("x0 must be finite".into()));
    }
    let dt = grid.dt();
    let gain = convention.gain(params.c_a);
    let mut common = vec![0.0; grid.steps];
    let mut own = vec![0.0; grid.steps];
    let common_plan = NoisePlan {
        seed: noise.seed,
        stream: noise.common_stream,
        batch: noise.common_sample + 1,
        steps: grid.steps,
    };
    let own_plan = NoisePlan {
        stream: noise.idiosyncratic_stream,
        batch: noise.idiosyncratic_sample + 1,
        ..common_plan
    };
    increment_row(&common_plan, noise.common_sample, dt, &mut common);
    increment_row(&own_plan, noise.idiosyncratic_sample, dt, &mut own);

    let mut path = Vec::with_capacity(grid.steps + 1);
    let mut x = x0;
    path.push(x);
    for i in 0..grid.steps {
        let drift = -params.delta * x + gain * (y_path[i] - params.c_i);
        x = em_step(x, drift, dt, params.sigma, own[i]) + params.sigma0 * common[i];
        path.push(x);
    }
    Ok(path)
}

/// Fixed-order pairwise summation; the result depends only on the input
/// order, never on how the caller scheduled the work that produced it.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Element-wise pairwise reduction of equally long vectors.
pub fn pairwise_reduce(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}
