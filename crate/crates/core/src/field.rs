//! Networks wrapped with the input normalisation and output scale they are
//! trained under, plus the initial-value heads and a text checkpoint format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::approximator::{Arch, Mlp, Tape};
use crate::error::{Error, Result};
use crate::model::{MarketParams, PlannerParams};
use crate::oracles::{costate_lower, costate_upper};
use crate::paths::Grid;

/// Normalisation constants for one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub horizon: f64,
    pub x_center: f64,
    /// Half-width of the state range the networks are expected to see.
    pub x_half: f64,
    pub y: f64,
    pub z: f64,
    pub value: f64,
    pub z_value: f64,
}

impl Scales {
    /// `planner` carries the planner constants and the initial demand.
    pub fn new(market: &MarketParams, grid: &Grid, mu0: f64, planner: Option<(&PlannerParams, f64)>) -> Self {
        let horizon = grid.horizon;
        let y = costate_upper(0.0, horizon, market)
            .abs()
            .max(costate_lower(0.0, horizon, market).abs())
            .max(1.0);
        let bound = planner.map_or(0.0, |(p, _)| p.subsidy_bound);
        let noise = 5.0 * market.sigma0.abs() * horizon.sqrt();
        let x_half = (noise
            + horizon * (market.delta * mu0.abs() + (y + market.c_i + bound) / (2.0 * market.c_a)))
            .max(1.0);
        let value = match planner {
            Some((p, d0)) => {
                let gap = (d0 - mu0).abs() + market.sigma0.abs() * horizon.sqrt();
                (p.lambda_d * gap * gap * horizon
                    + bound * (y + market.c_i + bound) / (2.0 * market.c_a) * horizon)
                    .max(1.0)
            }
            None => 1.0,
        };
        Scales {
            horizon,
            x_center: mu0,
            x_half,
            y,
            z: market.sigma0.abs() * y / x_half,
            value,
            z_value: market.sigma0.abs() * value / x_half,
        }
    }
}

/// `f(t, x) = scale * net(t / T, (x - center) / half)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub net: Mlp,
    pub horizon: f64,
    pub x_center: f64,
    pub x_half: f64,
    pub out_scale: f64,
}

impl Field {
    pub fn new(hidden: &[usize], seed: u64, scales: &Scales, out_scale: f64) -> Result<Self> {
        Ok(Field {
            net: Mlp::init(Arch::new(2, hidden), seed)?,
            horizon: scales.horizon,
            x_center: scales.x_center,
            x_half: scales.x_half,
            out_scale,
        })
    }

    #[inline]
    fn input(&self, t: f64, x: f64) -> [f64; 2] {
        [t / self.horizon, (x - self.x_center) / self.x_half]
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let mut tape = Tape::default();
        self.eval_tape(t, x, &mut tape)
    }

    pub fn eval_tape(&self, t: f64, x: f64, tape: &mut Tape) -> f64 {
        self.out_scale * self.net.forward_tape(&self.input(t, x), tape)
    }

    /// Accumulates `upstream * df/dtheta` into `grad`; returns `upstream * df/dx`.
    pub fn backprop(&self, tape: &mut Tape, upstream: f64, grad: &mut [f64]) -> f64 {
        let mut input_grad = [0.0; 2];
        self.net.backprop(tape, upstream * self.out_scale, grad, &mut input_grad);
        input_grad[1] / self.x_half
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

/// How `Y_0` (or `V_0`) is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One trainable number.
    #[default]
    Scalar,
    /// A network evaluated at `(0, x_0)`.
    Network,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialValue {
    Scalar { raw: f64, scale: f64 },
    Network(Field),
}

impl InitialValue {
    pub fn new(kind: HeadKind, hidden: &[usize], seed: u64, scales: &Scales, scale: f64) -> Result<Self> {
        Ok(match kind {
            HeadKind::Scalar => InitialValue::Scalar { raw: 0.0, scale },
            HeadKind::Network => InitialValue::Network(Field::new(hidden, seed, scales, scale)?),
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            InitialValue::Scalar { .. } => HeadKind::Scalar,
            InitialValue::Network(_) => HeadKind::Network,
        }
    }

    pub fn value(&self, x0: f64) -> f64 {
        match self {
            InitialValue::Scalar { raw, scale } => raw * scale,
            InitialValue::Network(f) => f.eval(0.0, x0),
        }
    }

    /// Accumulates `upstream * d value(x0) / d theta`; returns `upstream * d value / d x0`.
    pub fn backprop(&self, x0: f64, upstream: f64, grad: &mut [f64]) -> f64 {
        match self {
            InitialValue::Scalar { scale, .. } => {
                grad[0] += upstream * scale;
                0.0
            }
            InitialValue::Network(f) => {
                let mut tape = Tape::default();
                f.eval_tape(0.0, x0, &mut tape);
                f.backprop(&mut tape, upstream, grad)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            InitialValue::Scalar { .. } => 1,
            InitialValue::Network(f) => f.param_count(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            InitialValue::Scalar { raw, .. } => std::slice::from_mut(raw),
            InitialValue::Network(f) => f.net.params_mut(),
        }
    }
}

/// Named heads and fields, serialised as plain text.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, InitialValue)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: &str, value: InitialValue) {
        self.entries.push((name.to_string(), value));
    }

    pub fn take(&mut self, name: &str) -> std::result::Result<InitialValue, String> {
        let pos = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| format!("checkpoint has no entry `{name}`"))?;
        Ok(self.entries.remove(pos).1)
    }

    pub fn take_field(&mut self, name: &str) -> std::result::Result<Field, String> {
        match self.take(name)? {
            InitialValue::Network(f) => Ok(f),
            InitialValue::Scalar { .. } => Err(format!("checkpoint entry `{name}` is not a network")),
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "capmfg-checkpoint 1")?;
        writeln!(out, "entries {}", self.entries.len())?;
        for (name, entry) in &self.entries {
            match entry {
                InitialValue::Scalar { raw, scale } => {
                    writeln!(out, "scalar {name}")?;
                    writeln!(out, "{raw:e} {scale:e}")?;
                }
                InitialValue::Network(f) => {
                    writeln!(out, "field {name}")?;
                    writeln!(out, "{:e} {:e} {:e} {:e}", f.horizon, f.x_center, f.x_half, f.out_scale)?;
                    f.net.write_text(&mut out)?;
                }
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> std::result::Result<Self, String> {
        let mut lines = input.lines();
        let next = |lines: &mut std::io::Lines<R>| -> std::result::Result<String, String> {
            lines
                .next()
                .ok_or_else(|| "unexpected end of checkpoint".to_string())?
                .map_err(|e| e.to_string())
        };
        let numbers = |line: String, n: usize| -> std::result::Result<Vec<f64>, String> {
            let v = line
                .split_whitespace()
                .map(|w| w.parse::<f64>().map_err(|e| e.to_string()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if v.len() == n {
                Ok(v)
            } else {
                Err(format!("expected {n} numbers, found `{line}`"))
            }
        };
        if next(&mut lines)? != "capmfg-checkpoint 1" {
            return Err("not a checkpoint (bad header)".into());
        }
        let count: usize = next(&mut lines)?
            .strip_prefix("entries ")
            .ok_or("missing entry count")?
            .parse()
            .map_err(|e: std::num::ParseIntError| e.to_string())?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let header = next(&mut lines)?;
            let (kind, name) = header.split_once(' ').ok_or_else(|| format!("bad entry `{header}`"))?;
            let entry = match kind {
                "scalar" => {
                    let v = numbers(next(&mut lines)?, 2)?;
                    InitialValue::Scalar { raw: v[0], scale: v[1] }
                }
                "field" => {
                    let v = numbers(next(&mut lines)?, 4)?;
                    let net = Mlp::read_text(&mut lines)?;
                    if net.arch().input_dim != 2 {
                        return Err(format!("field `{name}` must take (t, x)"));
                    }
                    InitialValue::Network(Field {
                        net,
                        horizon: v[0],
                        x_center: v[1],
                        x_half: v[2],
                        out_scale: v[3],
                    })
                }
                _ => return Err(format!("unknown entry kind `{kind}`")),
            };
            ck.push(name, entry);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read(std::io::BufReader::new(file)).map_err(|m| Error::format(path, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scales() -> Scales {
        Scales::new(&MarketParams::solar_pv(100.0, 1.0), &Grid::new(1.0, 50).unwrap(), 1000.0, None)
    }

    #[test]
    fn scales_are_positive() {
        let s = scales();
        assert!(s.x_half > 100.0 && s.y > 290.0 && s.z > 0.0);
        let quiet = Scales::new(&MarketParams::solar_pv(0.0, 1.0), &Grid::new(1.0, 50).unwrap(), 1000.0, None);
        assert_eq!(quiet.z, 0.0);
    }

    #[test]
    fn field_state_gradient_matches_finite_difference() {
        let s = scales();
        let f = Field::new(&[8, 8], 3, &s, 10.0).unwrap();
        let mut tape = Tape::default();
        f.eval_tape(0.4, 1100.0, &mut tape);
        let mut grad = vec![0.0; f.param_count()];
        let dx = f.backprop(&mut tape, 1.0, &mut grad);
        let h = 1e-3;
        let fd = (f.eval(0.4, 1100.0 + h) - f.eval(0.4, 1100.0 - h)) / (2.0 * h);
        assert!((dx - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{dx} {fd}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = scales();
        let mut ck = Checkpoint::default();
        ck.push("y0", InitialValue::Scalar { raw: 0.123456789, scale: 293.6 });
        ck.push("z", InitialValue::Network(Field::new(&[4, 3], 9, &s, 2.5).unwrap()));
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert!(Checkpoint::read("nonsense\n".as_bytes()).is_err());
    }

    #[test]
    fn scalar_head_gradient() {
        let head = InitialValue::Scalar { raw: 0.5, scale: 200.0 };
        assert_eq!(head.value(1000.0), 100.0);
        let mut g = [0.0];
        head.backprop(1000.0, 2.0, &mut g);
        assert_eq!(g[0], 400.0);
    }
}
