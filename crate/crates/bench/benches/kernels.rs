use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use capmfg_core::approximator::Tape;
use capmfg_core::mfg::{self, MfgNets, MfgScenario};
use capmfg_core::oracles::{solve_phi_fd, FdConfig};
use capmfg_core::stackelberg::{self, PlannerNets, StackelbergScenario, Variant};
use capmfg_core::{Arch, DemandSpec, DriftConvention, Grid, MarketParams, Mlp, NoisePlan, PlannerParams, TrainingConfig};

fn scenario() -> MfgScenario {
    MfgScenario {
        market: MarketParams::solar_pv(100.0, 1.0),
        grid: Grid::new(1.0, 50).unwrap(),
        mu0: 2000.0,
    }
}

fn plan(batch: usize) -> NoisePlan {
    NoisePlan {
        seed: 1,
        stream: 0,
        batch,
        steps: 50,
    }
}

fn network(c: &mut Criterion) {
    let net = Mlp::init(Arch::new(2, &[32, 32]), 7).unwrap();
    let x = [0.3, -0.4];
    c.bench_function("mlp_forward_32x32", |b| {
        let mut tape = Tape::default();
        b.iter(|| net.forward_tape(black_box(&x), &mut tape))
    });
    c.bench_function("mlp_forward_backward_32x32", |b| {
        let mut tape = Tape::default();
        let mut grad = vec![0.0; net.param_count()];
        let mut gin = [0.0; 2];
        b.iter(|| {
            net.forward_tape(black_box(&x), &mut tape);
            net.backprop(&mut tape, 1.0, &mut grad, &mut gin);
        })
    });
}

fn solvers(c: &mut Criterion) {
    let scn = scenario();
    let cfg = TrainingConfig {
        batch: 256,
        iterations: 1,
        ..Default::default()
    };
    let nets = MfgNets::init(&scn, &cfg).unwrap();
    c.bench_function("mfg_rollout_b256_n50", |b| {
        b.iter(|| mfg::rollout(&scn, &nets, &plan(256), DriftConvention::HalfInverse).unwrap())
    });
    c.bench_function("mfg_training_iteration_b256_n50", |b| {
        b.iter_batched(
            || nets.clone(),
            |mut n| mfg::fit(&scn, &cfg, &mut n).unwrap(),
            BatchSize::SmallInput,
        )
    });

    let planner = StackelbergScenario {
        market: MarketParams::solar_pv(1.0, 1.0),
        grid: scn.grid,
        mu0: 1000.0,
        demand: DemandSpec::Constant { level: 1500.0 },
        planner: PlannerParams {
            lambda_d: 5.0,
            subsidy_bound: 500.0,
        },
    };
    let pnets = PlannerNets::init(&planner, &cfg).unwrap();
    c.bench_function("planner_rollout_b256_n50", |b| {
        b.iter(|| stackelberg::rollout_planner(&planner, &pnets, &plan(256), Variant::from(&cfg)).unwrap())
    });

    let fd = FdConfig::covering(&scn.market, &scn.grid, scn.mu0, 400, 0.0);
    c.bench_function("phi_fd_400_cells", |b| {
        b.iter(|| solve_phi_fd(&scn.market, &scn.grid, black_box(&fd), None).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = network, solvers
}
criterion_main!(benches);
