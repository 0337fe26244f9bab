//! JSON scenario files.
//!
//! ```json
//! {
//!   "label": "exam02",
//!   "market": { "delta": 0.005, "sigma0": 100, "c_p": 5.65, "c_i": 37.35, "c_a": 1 },
//!   "price": { "kind": "marginal_capacity", "M": 300, "p0": 30, "p1": 27500, "r": 1, "D": 1500 },
//!   "grid": { "T": 1, "N": 50 },
//!   "mu0": 1000,
//!   "training": { "batch": 2000, "iterations": 1000 },
//!   "seeds": { "train": 0 }
//! }
//! ```
//!
//! Planner runs add `demand` and `planner` sections. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfg::MfgScenario;
use crate::model::{DemandSpec, MarketParams, PlannerParams, PriceModel};
use crate::paths::Grid;
use crate::rollout::TrainingConfig;
use crate::stackelberg::StackelbergScenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub delta: f64,
    #[serde(default)]
    pub sigma: f64,
    pub sigma0: f64,
    pub c_p: f64,
    pub c_i: f64,
    pub c_a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub market: MarketSection,
    pub price: PriceModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<DemandSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planner: Option<PlannerParams>,
    pub grid: Grid,
    pub mu0: f64,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub seeds: SeedSection,
}

impl ScenarioFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn market(&self) -> MarketParams {
        let m = &self.market;
        MarketParams {
            delta: m.delta,
            sigma: m.sigma,
            sigma0: m.sigma0,
            c_p: m.c_p,
            c_i: m.c_i,
            c_a: m.c_a,
            price: self.price,
        }
    }

    /// Training settings with the seed filled in.
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seeds.train,
            ..self.training.clone()
        }
    }

    pub fn mfg(&self) -> Result<MfgScenario> {
        let scn = MfgScenario {
            market: self.market(),
            grid: self.grid,
            mu0: self.mu0,
        };
        scn.validate()?;
        Ok(scn)
    }

    pub fn stackelberg(&self) -> Result<StackelbergScenario> {
        let planner = self
            .planner
            .ok_or_else(|| Error::InvalidParams("missing `planner` section".into()))?;
        let demand = match (self.demand, self.price) {
            (Some(d), _) => d,
            // the marginal-capacity price already names a constant demand level
            (None, PriceModel::MarginalCapacity { demand, .. }) => DemandSpec::Constant { level: demand },
            (None, _) => return Err(Error::InvalidParams("missing `demand` section".into())),
        };
        let scn = StackelbergScenario {
            market: self.market(),
            grid: self.grid,
            mu0: self.mu0,
            demand,
            planner,
        };
        scn.validate()?;
        Ok(scn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAM02: &str = r#"{
        "label": "exam02",
        "market": { "delta": 0.005, "sigma0": 100, "c_p": 5.65, "c_i": 37.35, "c_a": 1 },
        "price": { "kind": "marginal_capacity", "M": 300, "p0": 30, "p1": 27500, "r": 1, "D": 1500 },
        "grid": { "T": 1, "N": 50 },
        "mu0": 1000,
        "training": { "batch": 2000, "iterations": 1000 },
        "seeds": { "train": 7 }
    }"#;

    #[test]
    fn parses_game_scenario() {
        let f = ScenarioFile::parse(EXAM02, Path::new("exam02.json")).unwrap();
        let scn = f.mfg().unwrap();
        assert_eq!(scn.market, MarketParams::solar_pv(100.0, 1.0));
        assert_eq!(f.training().seed, 7);
        assert_eq!(f.training().hidden, vec![32, 32]);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = EXAM02.replace("\"c_a\": 1", "\"c_a\": 1, \"c_x\": 2");
        let err = ScenarioFile::parse(&text, Path::new("x.json")).unwrap_err();
        assert!(err.to_string().contains("c_x"), "{err}");
    }

    #[test]
    fn planner_section_required() {
        let f = ScenarioFile::parse(EXAM02, Path::new("exam02.json")).unwrap();
        let err = f.stackelberg().unwrap_err();
        assert!(err.to_string().contains("planner"), "{err}");
    }

    #[test]
    fn planner_scenario_defaults_demand_from_price() {
        let text = EXAM02.replace("\"mu0\"", "\"planner\": { \"lambda_d\": 5, \"S\": 500 }, \"mu0\"");
        let f = ScenarioFile::parse(&text, Path::new("x.json")).unwrap();
        let scn = f.stackelberg().unwrap();
        assert_eq!(scn.demand, DemandSpec::Constant { level: 1500.0 });
    }
}
