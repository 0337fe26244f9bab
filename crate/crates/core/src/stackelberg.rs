//! Deep solve of the planner's extended HJB system. The planner value `V`
//! and the decoupling field `phi` are carried forward from trainable initial
//! values with network diffusion coefficients `Z_V` and `z_phi`; the subsidy
//! is the clamped pointwise minimiser of the planner Hamiltonian.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::approximator::{Adam, Tape};
use crate::error::{Error, Result};
use crate::export::{self, SolveReport};
use crate::field::{Checkpoint, Field, HeadKind, InitialValue, Scales};
use crate::mfg::terminal_loss;
use crate::model::{demand_at, drift_l, planner_cost_g, price, DemandSpec, DriftConvention, MarketParams, PlannerParams};
use crate::paths::{increment_row, pairwise_reduce, pairwise_sum, Grid, NoisePlan};
use crate::rollout::{
    derive_seed, par_chunks, DivergenceGuard, PairStep, SummaryRow, TrainingConfig, TrajectoryBatch, Verdict,
    EVAL_STREAM, SNAPSHOT_EVERY,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackelbergScenario {
    pub market: MarketParams,
    pub grid: Grid,
    pub mu0: f64,
    pub demand: DemandSpec,
    pub planner: PlannerParams,
}

impl StackelbergScenario {
    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.grid.validate()?;
        self.demand.validate()?;
        self.planner.validate()?;
        if self.market.sigma0 == 0.0 {
            return Err(Error::InvalidParams(
                "sigma0 must be non-zero: the subsidy rule divides Z_V by sigma0".into(),
            ));
        }
        if !self.mu0.is_finite() {
            return Err(Error::InvalidParams("mu0 must be finite".into()));
        }
        Ok(())
    }

    pub fn scales(&self) -> Scales {
        Scales::new(&self.market, &self.grid, self.mu0, Some((&self.planner, self.demand.initial())))
    }

    /// Demand at every grid point.
    pub fn demand_path(&self) -> Vec<f64> {
        let dt = self.grid.dt();
        let mut d = Vec::with_capacity(self.grid.steps + 1);
        d.push(self.demand.initial());
        for i in 0..self.grid.steps {
            d.push(demand_at(&self.demand, self.grid.time(i), dt, d[i]));
        }
        d
    }
}

/// Minimiser of `v -> g + l * dV/dx` over `[-bound, bound]`, with
/// `dV/dx ~ z_v / sigma0`.
pub fn minimizer_v(phi: f64, z_v: f64, sigma0: f64, c_i: f64, bound: f64) -> f64 {
    ((c_i - z_v / sigma0 - phi) / 2.0).clamp(-bound, bound)
}

/// Subsidy rule used by the solver; `undivided` drops the `1 / sigma0`.
#[inline]
pub fn subsidy(phi: f64, z_v: f64, sigma0: f64, c_i: f64, bound: f64, undivided: bool) -> f64 {
    minimizer_v(phi, z_v, if undivided { 1.0 } else { sigma0 }, c_i, bound)
}

/// Relative central-difference derivative of the planner Hamiltonian
/// `v -> g(t, x, phi, v) + l(t, x, phi, v) * p` at `v`, with `p = z_v / sigma0`
/// (or `z_v` when `undivided`).
#[allow(clippy::too_many_arguments)]
pub fn foc_residual(
    market: &MarketParams,
    planner: &PlannerParams,
    t: f64,
    x: f64,
    phi: f64,
    z_v: f64,
    v: f64,
    demand: f64,
    undivided: bool,
) -> f64 {
    let p = if undivided { z_v } else { z_v / market.sigma0 };
    let ham = |v: f64| {
        planner_cost_g(t, x, phi, v, demand, planner, market.c_a, market.c_i) + drift_l(t, x, phi, v, market) * p
    };
    let h = 1e-3 * v.abs().max(1.0);
    let d = (ham(v + h) - ham(v - h)) / (2.0 * h);
    let scale = ((phi - market.c_i).abs() + 2.0 * v.abs() + p.abs()) / (2.0 * market.c_a);
    d.abs() / scale.max(f64::MIN_POSITIVE)
}

/// The four trainable pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerNets {
    pub value_head: InitialValue,
    pub phi_head: InitialValue,
    pub z_value: Field,
    pub z_phi: Field,
}

impl PlannerNets {
    pub fn init(scn: &StackelbergScenario, cfg: &TrainingConfig) -> Result<Self> {
        let s = scn.scales();
        let kind = cfg.head.unwrap_or(HeadKind::Network);
        Ok(PlannerNets {
            value_head: InitialValue::new(kind, &cfg.hidden, derive_seed(cfg.seed, 11), &s, s.value)?,
            phi_head: InitialValue::new(kind, &cfg.hidden, derive_seed(cfg.seed, 12), &s, s.y)?,
            z_value: Field::new(&cfg.hidden, derive_seed(cfg.seed, 13), &s, s.z_value)?,
            z_phi: Field::new(&cfg.hidden, derive_seed(cfg.seed, 14), &s, s.z)?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("V0", self.value_head.clone());
        ck.push("phi0", self.phi_head.clone());
        ck.push("Z_V", InitialValue::Network(self.z_value.clone()));
        ck.push("z_phi", InitialValue::Network(self.z_phi.clone()));
        ck
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> std::result::Result<Self, String> {
        Ok(PlannerNets {
            value_head: ck.take("V0")?,
            phi_head: ck.take("phi0")?,
            z_value: ck.take_field("Z_V")?,
            z_phi: ck.take_field("z_phi")?,
        })
    }
}

/// Options that change the discrete dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Variant {
    pub drift: DriftConvention,
    pub undivided_z: bool,
}

impl From<&TrainingConfig> for Variant {
    fn from(cfg: &TrainingConfig) -> Self {
        Variant {
            drift: cfg.drift,
            undivided_z: cfg.undivided_z,
        }
    }
}

/// Forward simulation of `(mu^X, phi, V)` under the subsidy feedback.
pub fn rollout_planner(scn: &StackelbergScenario, nets: &PlannerNets, plan: &NoisePlan, variant: Variant)
    -> Result<TrajectoryBatch> {
    let steps = scn.grid.steps;
    if plan.steps != steps {
        return Err(Error::ShapeMismatch {
            expected: steps,
            got: plan.steps,
        });
    }
    let dt = scn.grid.dt();
    let m = &scn.market;
    let ps = PairStep::new(m, variant.drift, dt);
    let demand = scn.demand_path();
    let (v0, phi0) = (nets.value_head.value(scn.mu0), nets.phi_head.value(scn.mu0));
    let bound = scn.planner.subsidy_bound;
    let parts = par_chunks(plan.batch, |range| {
        let mut out = TrajectoryBatch::with_capacity(range.len(), steps, Vec::new(), true);
        let mut dw = vec![0.0; steps];
        let mut tape = Tape::default();
        for j in range {
            increment_row(plan, j, dt, &mut dw);
            let (mut x, mut phi, mut value) = (scn.mu0, phi0, v0);
            for i in 0..=steps {
                if !x.is_finite() || !phi.is_finite() || !value.is_finite() {
                    return Err(Error::NonFinite { what: "state", step: i });
                }
                let t = scn.grid.time(i);
                let zv = nets.z_value.eval_tape(t, x, &mut tape);
                let zp = nets.z_phi.eval_tape(t, x, &mut tape);
                let v = subsidy(phi, zv, m.sigma0, m.c_i, bound, variant.undivided_z);
                out.x.push(x);
                out.y.push(phi);
                out.z.push(zp);
                out.alpha.push(ps.alpha(phi, v));
                out.price.push(price(&m.price, t, x));
                out.subsidy.push(v);
                out.value.push(value);
                out.z_value.push(zv);
                if i < steps {
                    let g = planner_cost_g(t, x, phi, v, demand[i], &scn.planner, m.c_a, m.c_i);
                    value = value - g * dt + zv * dw[i];
                    (x, phi) = ps.step(t, x, phi, v, zp, dw[i]);
                }
            }
        }
        Ok(out)
    })?;
    let mut batch = TrajectoryBatch::with_capacity(plan.batch, steps, scn.grid.times(), true);
    for p in parts {
        batch.append(p);
    }
    batch.demand = demand;
    Ok(batch)
}

/// `(mean V_T^2, mean phi_T^2)`.
pub fn losses(batch: &TrajectoryBatch) -> (f64, f64) {
    (terminal_loss(&batch.terminal(&batch.value)), terminal_loss(&batch.terminal(&batch.y)))
}

pub(crate) struct PlannerGrad {
    pub loss_value: f64,
    pub loss_phi: f64,
    /// `dJ1/dV_0` and `dJ2/dphi_0`, summed over samples.
    pub value_head: f64,
    pub phi_head: f64,
    pub z_value: Vec<f64>,
    pub z_phi: Vec<f64>,
}

/// Both losses and their group gradients from one rollout. The subsidy is
/// held fixed when differentiating, so `J1` reaches only the value head and
/// `Z_V`, and `J2` only the phi head and `z_phi`.
pub(crate) fn loss_and_grads(
    scn: &StackelbergScenario,
    nets: &PlannerNets,
    plan: &NoisePlan,
    variant: Variant,
) -> Result<PlannerGrad> {
    let steps = scn.grid.steps;
    let dt = scn.grid.dt();
    let m = &scn.market;
    let ps = PairStep::new(m, variant.drift, dt);
    let demand = scn.demand_path();
    let (v0, phi0) = (nets.value_head.value(scn.mu0), nets.phi_head.value(scn.mu0));
    let bound = scn.planner.subsidy_bound;
    let inv_b = 1.0 / plan.batch as f64;
    let (n_zv, n_zp) = (nets.z_value.param_count(), nets.z_phi.param_count());
    let parts = par_chunks(plan.batch, |range| {
        let n = range.len();
        let mut g = PlannerGrad {
            loss_value: 0.0,
            loss_phi: 0.0,
            value_head: 0.0,
            phi_head: 0.0,
            z_value: vec![0.0; n_zv],
            z_phi: vec![0.0; n_zp],
        };
        let (mut lv, mut lp, mut hv, mut hp) =
            (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let mut dw = vec![0.0; steps];
        let mut xs = vec![0.0; steps + 1];
        let mut tapes_v = vec![Tape::default(); steps];
        let mut tapes_p = vec![Tape::default(); steps];
        for j in range {
            increment_row(plan, j, dt, &mut dw);
            let (mut phi, mut value) = (phi0, v0);
            xs[0] = scn.mu0;
            for i in 0..steps {
                let t = scn.grid.time(i);
                let x = xs[i];
                let zv = nets.z_value.eval_tape(t, x, &mut tapes_v[i]);
                let zp = nets.z_phi.eval_tape(t, x, &mut tapes_p[i]);
                let v = subsidy(phi, zv, m.sigma0, m.c_i, bound, variant.undivided_z);
                let cost = planner_cost_g(t, x, phi, v, demand[i], &scn.planner, m.c_a, m.c_i);
                value = value - cost * dt + zv * dw[i];
                (xs[i + 1], phi) = ps.step(t, x, phi, v, zp, dw[i]);
            }
            lv.push(value * value * inv_b);
            lp.push(phi * phi * inv_b);
            // J1: V_N = V_0 - sum g dt + sum Z_V dW, states frozen
            let lam_v = 2.0 * value * inv_b;
            hv.push(lam_v);
            for i in 0..steps {
                nets.z_value.backprop(&mut tapes_v[i], lam_v * dw[i], &mut g.z_value);
            }
            // J2: adjoint of (X, phi) with the subsidy frozen
            let (mut ax, mut ay) = (0.0, 2.0 * phi * inv_b);
            for i in (0..steps).rev() {
                let t = scn.grid.time(i);
                let dz = nets.z_phi.backprop(&mut tapes_p[i], ay * dw[i], &mut g.z_phi);
                (ax, ay) = ps.adjoint(t, xs[i], ax, ay, dz);
            }
            hp.push(ay);
        }
        g.loss_value = pairwise_sum(&lv);
        g.loss_phi = pairwise_sum(&lp);
        g.value_head = pairwise_sum(&hv);
        g.phi_head = pairwise_sum(&hp);
        Ok(g)
    })?;
    let sum = |f: fn(&PlannerGrad) -> f64| pairwise_sum(&parts.iter().map(f).collect::<Vec<_>>());
    let loss_value = sum(|p| p.loss_value);
    let loss_phi = sum(|p| p.loss_phi);
    let value_head = sum(|p| p.value_head);
    let phi_head = sum(|p| p.phi_head);
    let (zv, zp): (Vec<_>, Vec<_>) = parts.into_iter().map(|p| (p.z_value, p.z_phi)).unzip();
    Ok(PlannerGrad {
        loss_value,
        loss_phi,
        value_head,
        phi_head,
        z_value: pairwise_reduce(zv),
        z_phi: pairwise_reduce(zp),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackelbergSolution {
    pub nets: PlannerNets,
    pub v0: f64,
    pub phi0: f64,
    pub loss_value: Vec<f64>,
    pub loss_phi: Vec<f64>,
    pub restarts: Vec<usize>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Clone)]
struct Optimizers {
    value_head: Adam,
    phi_head: Adam,
    z_value: Adam,
    z_phi: Adam,
}

pub fn train_stackelberg(scn: &StackelbergScenario, cfg: &TrainingConfig) -> Result<StackelbergSolution> {
    Ok(train_and_evaluate(scn, cfg)?.0)
}

fn train_and_evaluate(scn: &StackelbergScenario, cfg: &TrainingConfig)
    -> Result<(StackelbergSolution, TrajectoryBatch)> {
    scn.validate()?;
    cfg.validate()?;
    let mut nets = PlannerNets::init(scn, cfg)?;
    let (loss_value, loss_phi, restarts) = fit(scn, cfg, &mut nets)?;
    let batch = evaluate(scn, cfg, &nets)?;
    let sol = StackelbergSolution {
        v0: nets.value_head.value(scn.mu0),
        phi0: nets.phi_head.value(scn.mu0),
        summary: batch.summary(),
        nets,
        loss_value,
        loss_phi,
        restarts,
    };
    Ok((sol, batch))
}

/// Optimisation loop; both parameter groups step simultaneously from the
/// same rollout.
pub fn fit(scn: &StackelbergScenario, cfg: &TrainingConfig, nets: &mut PlannerNets)
    -> Result<(Vec<f64>, Vec<f64>, Vec<usize>)> {
    let iterations = cfg.iterations;
    let variant = Variant::from(cfg);
    let mut opt = Optimizers {
        value_head: Adam::new(cfg.optimizer, nets.value_head.param_count()),
        phi_head: Adam::new(cfg.optimizer, nets.phi_head.param_count()),
        z_value: Adam::new(cfg.optimizer, nets.z_value.param_count()),
        z_phi: Adam::new(cfg.optimizer, nets.z_phi.param_count()),
    };
    let mut guard = DivergenceGuard::new();
    let (mut trace_v, mut trace_p) = (Vec::with_capacity(iterations), Vec::with_capacity(iterations));
    let mut snapshot = (nets.clone(), opt.clone(), 0);
    let mut k = 0;
    while k < iterations {
        if k % SNAPSHOT_EVERY == 0 {
            snapshot = (nets.clone(), opt.clone(), k);
        }
        let plan = NoisePlan {
            seed: cfg.seed,
            stream: k as u32,
            batch: cfg.batch,
            steps: scn.grid.steps,
        };
        let g = loss_and_grads(scn, nets, &plan, variant)?;
        if let Verdict::Restart = guard.check(k, &[g.loss_value, g.loss_phi], &trace_v)? {
            (*nets, opt, k) = snapshot.clone();
            trace_v.truncate(k);
            trace_p.truncate(k);
            continue;
        }
        trace_v.push(g.loss_value);
        trace_p.push(g.loss_phi);
        let lr = cfg.lr.at(k, iterations) * guard.lr_factor;
        let mut head = vec![0.0; nets.value_head.param_count()];
        nets.value_head.backprop(scn.mu0, g.value_head, &mut head);
        opt.value_head.step(nets.value_head.params_mut(), &head, lr)?;
        let mut head = vec![0.0; nets.phi_head.param_count()];
        nets.phi_head.backprop(scn.mu0, g.phi_head, &mut head);
        opt.phi_head.step(nets.phi_head.params_mut(), &head, lr)?;
        opt.z_value.step(nets.z_value.net.params_mut(), &g.z_value, lr)?;
        opt.z_phi.step(nets.z_phi.net.params_mut(), &g.z_phi, lr)?;
        if k % 100 == 0 || k + 1 == iterations {
            log::info!(
                "iteration {k}: loss_V {:.6e}, loss_phi {:.6e}, V0 {:.4}, phi0 {:.4}",
                g.loss_value,
                g.loss_phi,
                nets.value_head.value(scn.mu0),
                nets.phi_head.value(scn.mu0)
            );
        }
        k += 1;
    }
    Ok((trace_v, trace_p, guard.restarts))
}

pub fn evaluate(scn: &StackelbergScenario, cfg: &TrainingConfig, nets: &PlannerNets) -> Result<TrajectoryBatch> {
    let plan = NoisePlan {
        seed: cfg.seed,
        stream: EVAL_STREAM,
        batch: cfg.eval_samples(),
        steps: scn.grid.steps,
    };
    rollout_planner(scn, nets, &plan, Variant::from(cfg))
}

/// Largest `|d v_hat / dx| = |dZ_V/dx| / (2 sigma0)` over visited states of
/// the first samples, ignoring the clamp (which only shrinks it).
pub fn feedback_lipschitz(scn: &StackelbergScenario, nets: &PlannerNets, batch: &TrajectoryBatch, undivided: bool)
    -> f64 {
    let sigma = if undivided { 1.0 } else { scn.market.sigma0.abs() };
    let mut tape = Tape::default();
    let mut scratch = vec![0.0; nets.z_value.param_count()];
    let mut worst = 0.0f64;
    for j in 0..batch.batch.min(export::SAMPLE_ROWS) {
        for i in 0..=batch.steps {
            let x = batch.x[batch.index(j, i)];
            nets.z_value.eval_tape(batch.times[i], x, &mut tape);
            let dzdx = nets.z_value.backprop(&mut tape, 1.0, &mut scratch);
            worst = worst.max(dzdx.abs() / (2.0 * sigma));
        }
    }
    worst
}

/// Trains (or, given `nets`, only evaluates) and writes the run artifacts.
pub fn export_planner(
    scn: &StackelbergScenario,
    cfg: &TrainingConfig,
    out_dir: &Path,
    nets: Option<PlannerNets>,
) -> Result<SolveReport> {
    let start = Instant::now();
    scn.validate()?;
    cfg.validate()?;
    let (nets, trace_v, trace_p, restarts, batch) = match nets {
        Some(nets) => {
            let batch = evaluate(scn, cfg, &nets)?;
            (nets, Vec::new(), Vec::new(), Vec::new(), batch)
        }
        None => {
            let (sol, batch) = train_and_evaluate(scn, cfg)?;
            (sol.nets, sol.loss_value, sol.loss_phi, sol.restarts, batch)
        }
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    export::write_planner_trajectories(&out_dir.join(export::TRAJECTORIES), &batch.summary())?;
    export::write_samples(&out_dir.join(export::SAMPLES), &batch, true)?;
    nets.to_checkpoint().save(&out_dir.join(export::CHECKPOINT))?;
    let mut report = SolveReport::new("stackelberg", scn, cfg, &scn.scales(), nets.value_head.kind());
    report.add_trace("V", trace_v);
    report.add_trace("phi", trace_p);
    report.restarts = restarts;
    report.initial_values.insert("V0".into(), nets.value_head.value(scn.mu0));
    report.initial_values.insert("phi0".into(), nets.phi_head.value(scn.mu0));
    let (lv, lp) = losses(&batch);
    report.eval_losses.insert("V".into(), lv);
    report.eval_losses.insert("phi".into(), lp);
    report.feedback_lipschitz = Some(feedback_lipschitz(scn, &nets, &batch, cfg.undivided_z));
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    report.write(&out_dir.join(export::REPORT))?;
    Ok(report)
}
