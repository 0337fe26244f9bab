//! Deep-BSDE solvers for a capacity-expansion mean field game with common
//! noise and for a planner's Stackelberg subsidy problem on top of it.

pub mod approximator;
pub mod config;
pub mod error;
pub mod export;
pub mod field;
pub mod mfg;
pub mod model;
pub mod oracles;
pub mod paths;
pub mod rollout;
pub mod stackelberg;
pub mod verify;

pub use approximator::{Activation, Adam, Arch, Mlp, OptimizerKind};
pub use config::ScenarioFile;
pub use error::{Error, Result};
pub use model::{DemandSpec, DriftConvention, MarketParams, PlannerParams, PriceModel};
pub use field::{HeadKind, InitialValue, Scales};
pub use mfg::{MfgScenario, MfgSolution};
pub use paths::{Grid, NoisePlan};
pub use stackelberg::{StackelbergScenario, StackelbergSolution};
pub use rollout::{LrSchedule, TrainingConfig, TrajectoryBatch};
