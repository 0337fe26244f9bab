//! Deep-BSDE solve of the conditional-mean forward-backward system of the
//! capacity game: `Y_0` and the diffusion network `z(t, x)` are trained so
//! that the forward-simulated costate hits zero at the horizon.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::approximator::{Adam, Tape};
use crate::error::{Error, Result};
use crate::export::{self, SolveReport};
use crate::field::{Checkpoint, Field, HeadKind, InitialValue, Scales};
use crate::model::{price, DriftConvention, MarketParams};
use crate::paths::{increment_row, pairwise_reduce, pairwise_sum, Grid, NoisePlan};
use crate::rollout::{
    derive_seed, par_chunks, DivergenceGuard, PairStep, SummaryRow, TrainingConfig, TrajectoryBatch, Verdict,
    EVAL_STREAM, SNAPSHOT_EVERY,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfgScenario {
    pub market: MarketParams,
    pub grid: Grid,
    /// Initial mean capacity.
    pub mu0: f64,
}

impl MfgScenario {
    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.grid.validate()?;
        if !self.mu0.is_finite() {
            return Err(Error::InvalidParams("mu0 must be finite".into()));
        }
        Ok(())
    }

    pub fn scales(&self) -> Scales {
        Scales::new(&self.market, &self.grid, self.mu0, None)
    }
}

/// Trainable pieces: the initial costate and the costate diffusion network.
#[derive(Debug, Clone, PartialEq)]
pub struct MfgNets {
    pub head: InitialValue,
    pub z: Field,
}

impl MfgNets {
    pub fn init(scn: &MfgScenario, cfg: &TrainingConfig) -> Result<Self> {
        let s = scn.scales();
        Ok(MfgNets {
            head: InitialValue::new(
                cfg.head.unwrap_or(HeadKind::Scalar),
                &cfg.hidden,
                derive_seed(cfg.seed, 2),
                &s,
                s.y,
            )?,
            z: Field::new(&cfg.hidden, derive_seed(cfg.seed, 1), &s, s.z)?,
        })
    }

    pub fn y0(&self, scn: &MfgScenario) -> f64 {
        self.head.value(scn.mu0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("y0", self.head.clone());
        ck.push("z", InitialValue::Network(self.z.clone()));
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> std::result::Result<Self, String> {
        Ok(MfgNets {
            head: ck.take("y0")?,
            z: ck.take_field("z")?,
        })
    }
}

/// Forward simulation of `(mu^X, mu^Y)` for every sample of `plan`.
/// Parameters are not validated here so degenerate limits can be explored.
pub fn rollout(scn: &MfgScenario, nets: &MfgNets, plan: &NoisePlan, convention: DriftConvention)
    -> Result<TrajectoryBatch> {
    let steps = scn.grid.steps;
    if plan.steps != steps {
        return Err(Error::ShapeMismatch {
            expected: steps,
            got: plan.steps,
        });
    }
    let dt = scn.grid.dt();
    let ps = PairStep::new(&scn.market, convention, dt);
    let y0 = nets.y0(scn);
    let parts = par_chunks(plan.batch, |range| {
        let mut out = TrajectoryBatch::with_capacity(range.len(), steps, Vec::new(), false);
        let mut dw = vec![0.0; steps];
        let mut tape = Tape::default();
        for j in range {
            increment_row(plan, j, dt, &mut dw);
            let (mut x, mut y) = (scn.mu0, y0);
            for i in 0..=steps {
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::NonFinite { what: "state", step: i });
                }
                let t = scn.grid.time(i);
                let z = nets.z.eval_tape(t, x, &mut tape);
                out.x.push(x);
                out.y.push(y);
                out.z.push(z);
                out.alpha.push(ps.alpha(y, 0.0));
                out.price.push(price(&scn.market.price, t, x));
                out.subsidy.push(0.0);
                if i < steps {
                    (x, y) = ps.step(t, x, y, 0.0, z, dw[i]);
                }
            }
        }
        Ok(out)
    })?;
    let mut batch = TrajectoryBatch::with_capacity(plan.batch, steps, scn.grid.times(), false);
    for p in parts {
        batch.append(p);
    }
    Ok(batch)
}

/// Mean squared terminal costate.
pub fn loss(batch: &TrajectoryBatch) -> f64 {
    terminal_loss(&batch.terminal(&batch.y))
}

pub(crate) fn terminal_loss(terminal: &[f64]) -> f64 {
    let squares: Vec<f64> = terminal.iter().map(|y| y * y).collect();
    pairwise_sum(&squares) / terminal.len() as f64
}

struct ChunkGrad {
    loss: f64,
    head: f64,
    z: Vec<f64>,
}

/// Loss, `dJ/dY_0` summed over samples, and `dJ/dtheta_z`, all from one
/// rollout differentiated end to end.
pub(crate) fn loss_and_grad(
    scn: &MfgScenario,
    nets: &MfgNets,
    plan: &NoisePlan,
    convention: DriftConvention,
) -> Result<(f64, f64, Vec<f64>)> {
    let steps = scn.grid.steps;
    let dt = scn.grid.dt();
    let ps = PairStep::new(&scn.market, convention, dt);
    let y0 = nets.y0(scn);
    let inv_b = 1.0 / plan.batch as f64;
    let n_z = nets.z.param_count();
    let parts = par_chunks(plan.batch, |range| {
        let mut g = ChunkGrad {
            loss: 0.0,
            head: 0.0,
            z: vec![0.0; n_z],
        };
        let mut losses = Vec::with_capacity(range.len());
        let mut heads = Vec::with_capacity(range.len());
        let mut dw = vec![0.0; steps];
        let mut xs = vec![0.0; steps + 1];
        let mut tapes = vec![Tape::default(); steps];
        for j in range {
            increment_row(plan, j, dt, &mut dw);
            let mut y = y0;
            xs[0] = scn.mu0;
            for i in 0..steps {
                let t = scn.grid.time(i);
                let z = nets.z.eval_tape(t, xs[i], &mut tapes[i]);
                (xs[i + 1], y) = ps.step(t, xs[i], y, 0.0, z, dw[i]);
            }
            losses.push(y * y * inv_b);
            let (mut lx, mut ly) = (0.0, 2.0 * y * inv_b);
            for i in (0..steps).rev() {
                let t = scn.grid.time(i);
                let dz = nets.z.backprop(&mut tapes[i], ly * dw[i], &mut g.z);
                (lx, ly) = ps.adjoint(t, xs[i], lx, ly, dz);
            }
            heads.push(ly);
        }
        g.loss = pairwise_sum(&losses);
        g.head = pairwise_sum(&heads);
        Ok(g)
    })?;
    let loss = pairwise_sum(&parts.iter().map(|p| p.loss).collect::<Vec<_>>());
    let head = pairwise_sum(&parts.iter().map(|p| p.head).collect::<Vec<_>>());
    let z = pairwise_reduce(parts.into_iter().map(|p| p.z).collect());
    Ok((loss, head, z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfgSolution {
    pub nets: MfgNets,
    pub y0: f64,
    /// One entry per completed iteration.
    pub loss_trace: Vec<f64>,
    /// Iterations at which the divergence guard restarted training.
    pub restarts: Vec<usize>,
    /// Statistics of the evaluation rollout.
    pub summary: Vec<SummaryRow>,
}

/// Trains from a fresh initialisation.
pub fn train(scn: &MfgScenario, cfg: &TrainingConfig) -> Result<MfgSolution> {
    let (sol, _) = train_and_evaluate(scn, cfg)?;
    Ok(sol)
}

fn train_and_evaluate(scn: &MfgScenario, cfg: &TrainingConfig) -> Result<(MfgSolution, TrajectoryBatch)> {
    scn.validate()?;
    cfg.validate()?;
    let mut nets = MfgNets::init(scn, cfg)?;
    let (trace, restarts) = fit(scn, cfg, &mut nets)?;
    let batch = evaluate(scn, cfg, &nets)?;
    let sol = MfgSolution {
        y0: nets.y0(scn),
        summary: batch.summary(),
        nets,
        loss_trace: trace,
        restarts,
    };
    Ok((sol, batch))
}

/// Runs the optimisation loop on `nets` in place.
pub fn fit(scn: &MfgScenario, cfg: &TrainingConfig, nets: &mut MfgNets) -> Result<(Vec<f64>, Vec<usize>)> {
    let iterations = cfg.iterations;
    let mut opt_head = Adam::new(cfg.optimizer, nets.head.param_count());
    let mut opt_z = Adam::new(cfg.optimizer, nets.z.param_count());
    let mut guard = DivergenceGuard::new();
    let mut trace = Vec::with_capacity(iterations);
    let mut snapshot = (nets.clone(), opt_head.clone(), opt_z.clone(), 0);
    let mut k = 0;
    while k < iterations {
        if k % SNAPSHOT_EVERY == 0 {
            snapshot = (nets.clone(), opt_head.clone(), opt_z.clone(), k);
        }
        let plan = NoisePlan {
            seed: cfg.seed,
            stream: k as u32,
            batch: cfg.batch,
            steps: scn.grid.steps,
        };
        let (loss, g_head, g_z) = loss_and_grad(scn, nets, &plan, cfg.drift)?;
        if let Verdict::Restart = guard.check(k, &[loss], &trace)? {
            (*nets, opt_head, opt_z, k) = snapshot.clone();
            trace.truncate(k);
            continue;
        }
        trace.push(loss);
        let lr = cfg.lr.at(k, iterations) * guard.lr_factor;
        let mut head_grad = vec![0.0; nets.head.param_count()];
        nets.head.backprop(scn.mu0, g_head, &mut head_grad);
        opt_head.step(nets.head.params_mut(), &head_grad, lr)?;
        opt_z.step(nets.z.net.params_mut(), &g_z, lr)?;
        if k % 100 == 0 || k + 1 == iterations {
            log::info!("iteration {k}: loss {loss:.6e}, y0 {:.6}", nets.y0(scn));
        }
        k += 1;
    }
    Ok((trace, guard.restarts))
}

/// Rollout on the held-out evaluation stream.
pub fn evaluate(scn: &MfgScenario, cfg: &TrainingConfig, nets: &MfgNets) -> Result<TrajectoryBatch> {
    let plan = NoisePlan {
        seed: cfg.seed,
        stream: EVAL_STREAM,
        batch: cfg.eval_samples(),
        steps: scn.grid.steps,
    };
    rollout(scn, nets, &plan, cfg.drift)
}

/// Trains (or, given `nets`, only evaluates) and writes `trajectories.csv`,
/// `samples.csv`, `checkpoint.txt` and `report.json` into `out_dir`.
pub fn solve_and_export(
    scn: &MfgScenario,
    cfg: &TrainingConfig,
    out_dir: &Path,
    nets: Option<MfgNets>,
) -> Result<SolveReport> {
    let start = Instant::now();
    scn.validate()?;
    cfg.validate()?;
    let (nets, trace, restarts, batch) = match nets {
        Some(nets) => {
            let batch = evaluate(scn, cfg, &nets)?;
            (nets, Vec::new(), Vec::new(), batch)
        }
        None => {
            let (sol, batch) = train_and_evaluate(scn, cfg)?;
            (sol.nets, sol.loss_trace, sol.restarts, batch)
        }
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    export::write_mfg_trajectories(&out_dir.join(export::TRAJECTORIES), &batch.summary())?;
    export::write_samples(&out_dir.join(export::SAMPLES), &batch, false)?;
    nets.to_checkpoint().save(&out_dir.join(export::CHECKPOINT))?;
    let y0 = nets.y0(scn);
    let mut report = SolveReport::new("mfg", scn, cfg, &scn.scales(), nets.head.kind());
    report.add_trace("y", trace);
    report.restarts = restarts;
    report.initial_values.insert("y0".into(), y0);
    report.eval_losses.insert("y".into(), loss(&batch));
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    report.write(&out_dir.join(export::REPORT))?;
    Ok(report)
}
