//! Market primitives: price functions, demand dynamics, the producer's
//! closed-form control and the coefficient functions shared by both solvers.
//!
//! Units: capacity in MWh, prices and costates in $/MWh, time in years.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spot price as a function of aggregate capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriceModel {
    /// Capped price driven by the capacity surplus over demand `D`:
    /// `M` when `x <= D`, otherwise `min(M, p0 + p1 / (x - D)^r)`.
    MarginalCapacity {
        #[serde(rename = "M")]
        cap: f64,
        p0: f64,
        p1: f64,
        r: f64,
        #[serde(rename = "D")]
        demand: f64,
    },
    /// `p0 + p1 / (x + eps1)^r` above the switch point `x + eps1 = eps2`,
    /// flat at `p0 + p1 / eps2^r` below it.
    Capacity {
        p0: f64,
        p1: f64,
        r: f64,
        eps1: f64,
        eps2: f64,
    },
    /// Flat price, mostly useful for testing against closed forms.
    Constant {
        #[serde(rename = "M")]
        cap: f64,
    },
}

impl PriceModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PriceModel::MarginalCapacity { cap, p1, r, .. } => cap > 0.0 && p1 > 0.0 && r >= 1.0,
            PriceModel::Capacity {
                p1, r, eps1, eps2, ..
            } => p1 > 0.0 && r >= 1.0 && eps1 > 0.0 && eps2 > 0.0,
            PriceModel::Constant { cap } => cap > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("price model {self:?}")))
        }
    }

    /// Upper bound of the price over all capacities.
    pub fn cap(&self) -> f64 {
        match *self {
            PriceModel::MarginalCapacity { cap, .. } | PriceModel::Constant { cap } => cap,
            PriceModel::Capacity { p0, p1, r, eps2, .. } => p0 + p1 / eps2.powf(r),
        }
    }
}

/// Price at time `t` for aggregate capacity `x`.
pub fn price(model: &PriceModel, _t: f64, x: f64) -> f64 {
    match *model {
        PriceModel::MarginalCapacity {
            cap,
            p0,
            p1,
            r,
            demand,
        } => {
            let surplus = x - demand;
            if surplus <= 0.0 {
                cap
            } else {
                cap.min(p0 + p1 / surplus.powf(r))
            }
        }
        PriceModel::Capacity {
            p0,
            p1,
            r,
            eps1,
            eps2,
        } => {
            if x + eps1 >= eps2 {
                p0 + p1 / (x + eps1).powf(r)
            } else {
                p0 + p1 / eps2.powf(r)
            }
        }
        PriceModel::Constant { cap } => cap,
    }
}

/// Derivative of [`price`] in `x`; zero on flat branches and at the cap.
pub fn price_slope(model: &PriceModel, _t: f64, x: f64) -> f64 {
    match *model {
        PriceModel::MarginalCapacity {
            cap,
            p0,
            p1,
            r,
            demand,
        } => {
            let surplus = x - demand;
            if surplus <= 0.0 || p0 + p1 / surplus.powf(r) >= cap {
                0.0
            } else {
                -r * p1 / surplus.powf(r + 1.0)
            }
        }
        PriceModel::Capacity {
            p1, r, eps1, eps2, ..
        } => {
            if x + eps1 >= eps2 {
                -r * p1 / (x + eps1).powf(r + 1.0)
            } else {
                0.0
            }
        }
        PriceModel::Constant { .. } => 0.0,
    }
}

/// Producer cost, decay and volatility constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Capacity decay rate (1/year).
    pub delta: f64,
    /// Idiosyncratic volatility (MWh/sqrt(year)); only individual paths use it.
    pub sigma: f64,
    /// Common-noise volatility (MWh/sqrt(year)).
    pub sigma0: f64,
    /// Production cost ($/MWh).
    pub c_p: f64,
    /// Installation cost ($/MWh).
    pub c_i: f64,
    /// Adjustment cost ($^2/MWh^2).
    pub c_a: f64,
    pub price: PriceModel,
}

impl MarketParams {
    /// Solar PV constants with the marginal-capacity price, `M = 300`,
    /// `p0 = 30`, `p1 = 27500` and constant demand `D = 1500`.
    pub fn solar_pv(sigma0: f64, r: f64) -> Self {
        MarketParams {
            delta: 0.005,
            sigma: 0.0,
            sigma0,
            c_p: 5.65,
            c_i: 37.35,
            c_a: 1.0,
            price: PriceModel::MarginalCapacity {
                cap: 300.0,
                p0: 30.0,
                p1: 27500.0,
                r,
                demand: 1500.0,
            },
        }
    }

    /// Solar PV constants with the capacity price `p0 = 30`, `p1 = 405000`,
    /// `eps1 = 1e-4`, `eps2 = 1500`.
    pub fn solar_pv_capacity_price(sigma0: f64, r: f64) -> Self {
        MarketParams {
            price: PriceModel::Capacity {
                p0: 30.0,
                p1: 405_000.0,
                r,
                eps1: 1e-4,
                eps2: 1500.0,
            },
            ..Self::solar_pv(sigma0, r)
        }
    }

    /// Checks the constants. `sigma0 = 0` is allowed here; the planner solver
    /// rejects it separately because its minimiser divides by it.
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.delta > 0.0 && self.delta < 1.0, "delta must lie in (0, 1)"),
            (self.c_p > 0.0, "c_p must be positive"),
            (self.c_i > 0.0, "c_i must be positive"),
            (self.c_a > 0.0, "c_a must be positive"),
            (self.sigma >= 0.0, "sigma must be non-negative"),
            (self.sigma0.is_finite(), "sigma0 must be finite"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidParams(msg.into()));
            }
        }
        self.price.validate()
    }
}

/// Demand baseline used by the planner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandSpec {
    Constant {
        #[serde(rename = "D")]
        level: f64,
    },
    /// `dD = a (b(t) - D) dt` with the seasonal target
    /// `b(t) = b0 + b1 cos(2 pi t - b2) - 2 pi sin(2 pi t - b2)`.
    MeanReverting {
        a: f64,
        b0: f64,
        b1: f64,
        b2: f64,
        #[serde(rename = "D0")]
        initial: f64,
    },
}

impl DemandSpec {
    pub fn initial(&self) -> f64 {
        match *self {
            DemandSpec::Constant { level } => level,
            DemandSpec::MeanReverting { initial, .. } => initial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DemandSpec::Constant { level } if level.is_finite() => Ok(()),
            DemandSpec::MeanReverting { a, initial, .. } if a > 0.0 && initial > 0.0 => Ok(()),
            _ => Err(Error::InvalidParams(format!("demand {self:?}"))),
        }
    }
}

/// Seasonal mean-reversion target.
pub fn seasonal_target(b0: f64, b1: f64, b2: f64, t: f64) -> f64 {
    let phase = 2.0 * PI * t - b2;
    b0 + b1 * phase.cos() - 2.0 * PI * phase.sin()
}

/// One explicit Euler step of the demand ODE from `d_prev` at time `t`.
pub fn demand_at(spec: &DemandSpec, t: f64, dt: f64, d_prev: f64) -> f64 {
    match *spec {
        DemandSpec::Constant { level } => level,
        DemandSpec::MeanReverting { a, b0, b1, b2, .. } => {
            d_prev + a * (seasonal_target(b0, b1, b2, t) - d_prev) * dt
        }
    }
}

/// Social planner constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerParams {
    /// Weight converting capacity shortfall/surplus into loss ($/MWh^2).
    pub lambda_d: f64,
    /// Subsidy bound ($/MWh); subsidies live in `[-S, S]`.
    #[serde(rename = "S")]
    pub subsidy_bound: f64,
}

impl PlannerParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_d >= 0.0 && self.subsidy_bound >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("planner {self:?}")))
        }
    }
}

/// Which coefficient multiplies `(y - c_i + v)` in the capacity drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftConvention {
    /// `1 / (2 c_a)`, matching the optimal control.
    #[default]
    HalfInverse,
    /// `1 / c_a`, as written in the discretised pseudocode.
    Inverse,
}

impl DriftConvention {
    pub fn gain(self, c_a: f64) -> f64 {
        match self {
            DriftConvention::HalfInverse => 1.0 / (2.0 * c_a),
            DriftConvention::Inverse => 1.0 / c_a,
        }
    }
}

/// Producer's optimal installation rate given costate `y` and subsidy `v`.
pub fn optimal_alpha(y: f64, v: f64, c_a: f64, c_i: f64) -> f64 {
    (y - c_i + v) / (2.0 * c_a)
}

/// Capacity drift under the optimal control.
pub fn drift_l(_t: f64, x: f64, y: f64, v: f64, p: &MarketParams) -> f64 {
    -p.delta * x + optimal_alpha(y, v, p.c_a, p.c_i)
}

/// Costate driver `delta y + c_p - P(t, x)`.
pub fn driver_h(t: f64, x: f64, y: f64, p: &MarketParams) -> f64 {
    p.delta * y + p.c_p - price(&p.price, t, x)
}

/// Planner running cost: capacity mismatch plus the subsidy bill.
#[allow(clippy::too_many_arguments)]
pub fn planner_cost_g(
    _t: f64,
    x: f64,
    y: f64,
    v: f64,
    demand: f64,
    pp: &PlannerParams,
    c_a: f64,
    c_i: f64,
) -> f64 {
    let gap = demand - x;
    pp.lambda_d * gap * gap + (y * v - c_i * v + v * v) / (2.0 * c_a)
}

/// Producer running profit; a diagnostic, never part of a training loss.
pub fn running_profit_f(t: f64, x: f64, mean: f64, alpha: f64, p: &MarketParams, v: f64) -> f64 {
    x * (price(&p.price, t, mean) - p.c_p) - (p.c_i - v) * alpha - p.c_a * alpha * alpha
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pf1() -> PriceModel {
        MarketParams::solar_pv(100.0, 1.0).price
    }

    fn nlp() -> PriceModel {
        MarketParams::solar_pv_capacity_price(100.0, 1.0).price
    }

    #[test]
    fn marginal_capacity_price_branches() {
        assert_eq!(price(&pf1(), 0.0, 1000.0), 300.0);
        assert_eq!(price(&pf1(), 0.0, 1500.0), 300.0);
        assert!((price(&pf1(), 0.0, 2000.0) - 85.0).abs() < 1e-12);
        // just above D the hyperbola exceeds the cap
        assert_eq!(price(&pf1(), 0.0, 1500.5), 300.0);
    }

    #[test]
    fn capacity_price_branches_meet() {
        assert!((price(&nlp(), 0.0, 0.0) - 300.0).abs() < 1e-12);
        assert!((nlp().cap() - 300.0).abs() < 1e-12);
        let switch = 1500.0 - 1e-4;
        let below = price(&nlp(), 0.0, switch - 1e-9);
        let at = price(&nlp(), 0.0, switch);
        assert!((below - at).abs() < 1e-9);
    }

    #[test]
    fn constant_price_cap() {
        let m = PriceModel::Constant { cap: 120.0 };
        assert_eq!(price(&m, 3.0, -50.0), 120.0);
        assert_eq!(m.cap(), 120.0);
        assert_eq!(price_slope(&m, 0.0, 10.0), 0.0);
    }

    #[test]
    fn price_slope_matches_finite_difference() {
        for model in [pf1(), nlp()] {
            for x in [1700.0, 2000.0, 2600.0] {
                let h = 1e-4;
                let fd = (price(&model, 0.0, x + h) - price(&model, 0.0, x - h)) / (2.0 * h);
                assert!((fd - price_slope(&model, 0.0, x)).abs() < 1e-7, "{model:?} {x}");
            }
        }
        assert_eq!(price_slope(&pf1(), 0.0, 1550.0), 0.0);
    }

    #[test]
    fn demand_steps() {
        let c = DemandSpec::Constant { level: 1500.0 };
        assert_eq!(demand_at(&c, 0.7, 0.02, 1200.0), 1500.0);

        let mr = DemandSpec::MeanReverting {
            a: 1.0,
            b0: 1500.0,
            b1: 0.0,
            b2: 0.0,
            initial: 1000.0,
        };
        assert!((demand_at(&mr, 0.0, 0.1, 1000.0) - 1050.0).abs() < 1e-12);

        let b = seasonal_target(1500.0, 30.0, 0.4, 0.3);
        assert_eq!(demand_at(&mr_with(30.0, 0.4), 0.3, 0.05, b), b);
    }

    fn mr_with(b1: f64, b2: f64) -> DemandSpec {
        DemandSpec::MeanReverting {
            a: 2.0,
            b0: 1500.0,
            b1,
            b2,
            initial: 1400.0,
        }
    }

    #[test]
    fn control_and_coefficients() {
        let p = MarketParams::solar_pv(1.0, 1.0);
        assert_eq!(optimal_alpha(p.c_i, 0.0, p.c_a, p.c_i), 0.0);
        assert!((optimal_alpha(39.35, 0.0, 1.0, 37.35) - 1.0).abs() < 1e-12);
        assert_eq!(optimal_alpha(0.0, p.c_i, p.c_a, p.c_i), 0.0);

        assert_eq!(drift_l(0.0, 0.0, p.c_i, 0.0, &p), 0.0);
        assert!((drift_l(0.0, 1000.0, p.c_i, 0.0, &p) + 5.0).abs() < 1e-12);
        assert!((drift_l(0.0, 0.0, p.c_i + 2.0 * p.c_a, 0.0, &p) - 1.0).abs() < 1e-12);

        // price pinned at the 300 cap for x below D
        assert!((driver_h(0.0, 1000.0, 0.0, &p) + 294.35).abs() < 1e-12);
        let flat = MarketParams {
            price: PriceModel::Constant { cap: 30.0 },
            ..p
        };
        assert!((driver_h(0.0, 0.0, 100.0, &flat) + 23.85).abs() < 1e-12);
        let at_cost = MarketParams {
            price: PriceModel::Constant { cap: p.c_p },
            ..p
        };
        assert_eq!(driver_h(0.0, 42.0, 0.0, &at_cost), 0.0);
    }

    #[test]
    fn planner_cost_examples() {
        let pp = PlannerParams {
            lambda_d: 5.0,
            subsidy_bound: 500.0,
        };
        assert_eq!(planner_cost_g(0.0, 1500.0, 100.0, 0.0, 1500.0, &pp, 1.0, 37.35), 0.0);
        assert!(
            (planner_cost_g(0.0, 1000.0, 100.0, 0.0, 1500.0, &pp, 1.0, 37.35) - 1_250_000.0).abs()
                < 1e-6
        );
        assert!(planner_cost_g(0.0, 1500.0, 0.0, 37.35, 1500.0, &pp, 1.0, 37.35).abs() < 1e-12);
    }

    #[test]
    fn running_profit_examples() {
        let p = MarketParams::solar_pv(1.0, 1.0);
        assert_eq!(running_profit_f(0.0, 0.0, 1000.0, 0.0, &p, 0.0), 0.0);
        assert!((running_profit_f(0.0, 1.0, 1000.0, 0.0, &p, 0.0) - 294.35).abs() < 1e-12);
        let vertex = -(p.c_i - 10.0) / (2.0 * p.c_a);
        let f0 = running_profit_f(0.0, 1.0, 1000.0, vertex, &p, 10.0);
        for da in [-1.0, -0.1, 0.1, 1.0] {
            assert!(running_profit_f(0.0, 1.0, 1000.0, vertex + da, &p, 10.0) < f0);
        }
    }

    #[test]
    fn drift_convention_gain() {
        assert_eq!(DriftConvention::HalfInverse.gain(2.0), 0.25);
        assert_eq!(DriftConvention::Inverse.gain(2.0), 0.5);
    }

    #[test]
    fn validation_rejects_bad_constants() {
        let mut p = MarketParams::solar_pv(1.0, 1.0);
        assert!(p.validate().is_ok());
        p.delta = 1.5;
        assert!(p.validate().is_err());
        let bad = PriceModel::MarginalCapacity {
            cap: 300.0,
            p0: 30.0,
            p1: 1.0,
            r: 0.5,
            demand: 1.0,
        };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_model() -> impl Strategy<Value = PriceModel> {
            prop_oneof![
                (10.0..500.0f64, 0.0..50.0f64, 1.0..1e5f64, 1.0..3.0f64, 0.0..3000.0f64).prop_map(
                    |(cap, p0, p1, r, demand)| PriceModel::MarginalCapacity {
                        cap,
                        p0,
                        p1,
                        r,
                        demand
                    }
                ),
                (0.0..50.0f64, 1.0..1e6f64, 1.0..3.0f64, 1e-5..1.0f64, 10.0..3000.0f64).prop_map(
                    |(p0, p1, r, eps1, eps2)| PriceModel::Capacity {
                        p0,
                        p1,
                        r,
                        eps1,
                        eps2
                    }
                ),
                (1.0..500.0f64).prop_map(|cap| PriceModel::Constant { cap }),
            ]
        }

        proptest! {
            #[test]
            fn price_bounded_and_non_increasing(
                model in any_model(),
                x1 in -1000.0..6000.0f64,
                dx in 0.0..3000.0f64,
                t in 0.0..2.0f64,
            ) {
                let a = price(&model, t, x1);
                let b = price(&model, t, x1 + dx);
                prop_assert!(a >= b);
                prop_assert!(a > 0.0 && a <= model.cap() * (1.0 + 1e-12));
                prop_assert!(b > 0.0);
            }

            #[test]
            fn alpha_monotone(y in -500.0..500.0f64, v in -500.0..500.0f64, c_a in 0.1..10.0f64, c_i in 1.0..100.0f64) {
                let a = optimal_alpha(y, v, c_a, c_i);
                prop_assert!(optimal_alpha(y + 1.0, v, c_a, c_i) > a);
                prop_assert!(optimal_alpha(y, v + 1.0, c_a, c_i) > a);
                prop_assert!(optimal_alpha(y, v, c_a, c_i + 1.0) < a);
                if y - c_i + v > 0.0 {
                    prop_assert!(optimal_alpha(y, v, c_a * 2.0, c_i) < a);
                }
            }

            #[test]
            fn planner_cost_sign_and_convexity(
                x in 0.0..3000.0f64, y in -500.0..500.0f64, v in -500.0..500.0f64,
                lambda_d in 0.0..10.0f64, c_a in 0.1..5.0f64,
            ) {
                let pp = PlannerParams { lambda_d, subsidy_bound: 500.0 };
                let c_i = 37.35;
                let g = |v: f64| planner_cost_g(0.0, x, y, v, 1500.0, &pp, c_a, c_i);
                if v * (y - c_i + v) >= 0.0 {
                    prop_assert!(g(v) >= 0.0);
                }
                let h = 1.0;
                let second = (g(v + h) - 2.0 * g(v) + g(v - h)) / (h * h);
                let scale = g(v).abs().max(1.0);
                prop_assert!((second - 1.0 / c_a).abs() < 1e-6 * scale);
            }
        }
    }
}
