//! Small feedforward networks with hand-written reverse-mode gradients and
//! an adaptive-moment optimiser.
//!
//! Parameters live in one flat vector, layer by layer: the weight matrix of
//! each layer in row-major order (one row per output unit) followed by its
//! bias vector. Gradients use the same layout, which keeps optimiser updates
//! and checkpoints trivial.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Arch {
    pub fn new(input_dim: usize, hidden: &[usize]) -> Self {
        Arch {
            input_dim,
            hidden: hidden.to_vec(),
            activation: Activation::Tanh,
        }
    }

    /// Widths of every layer including input and the scalar output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(1);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidParams(format!("layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

fn layout(arch: &Arch) -> Vec<Layer> {
    let mut offset = 0;
    arch.widths()
        .windows(2)
        .map(|w| {
            let layer = Layer {
                fan_in: w[0],
                fan_out: w[1],
                weights: offset,
                bias: offset + w[0] * w[1],
            };
            offset += w[0] * w[1] + w[1];
            layer
        })
        .collect()
}

/// Scalar-output multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: Arch,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backprop`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// Input followed by the post-activation of each hidden layer.
    values: Vec<f64>,
    delta: Vec<f64>,
    prev: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases; a pure function of `(arch, seed)`.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layers = layout(&arch);
        let mut params = vec![0.0; arch.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &layers {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut params[layer.weights..layer.bias] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(Mlp {
            arch,
            layers,
            params,
        })
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::ShapeMismatch {
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParams("non-finite network parameter".into()));
        }
        Ok(Mlp {
            layers: layout(&arch),
            arch,
            params,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Network output at `input`.
    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        self.check_input(input)?;
        let mut tape = Tape::default();
        Ok(self.forward_tape(input, &mut tape))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                expected: self.arch.input_dim,
                got: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite network input {input:?}")));
        }
        Ok(())
    }

    /// Forward pass recording what [`Mlp::backprop`] needs. No input checks.
    pub fn forward_tape(&self, input: &[f64], tape: &mut Tape) -> f64 {
        tape.values.clear();
        tape.values.extend_from_slice(input);
        let mut start = 0;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = &self.params[layer.weights..layer.bias];
            let b = &self.params[layer.bias..layer.bias + layer.fan_out];
            let end = start + layer.fan_in;
            if k == last {
                let x = &tape.values[start..end];
                return b[0] + dot(&w[..layer.fan_in], x);
            }
            for o in 0..layer.fan_out {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let z = b[o] + dot(row, &tape.values[start..end]);
                tape.values.push(z.tanh());
            }
            start = end;
        }
        unreachable!("network has an output layer")
    }

    /// Accumulates `upstream * d(output)/d(params)` into `grad` and returns
    /// `upstream * d(output)/d(input)` in `input_grad`.
    pub fn backprop(&self, tape: &mut Tape, upstream: f64, grad: &mut [f64], input_grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let Tape { values, delta, prev } = tape;
        // delta for the current layer's outputs; starts at the scalar output
        delta.clear();
        delta.push(upstream);
        let mut end = values.len();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let start = end - layer.fan_in;
            let x = &values[start..end];
            let w = &self.params[layer.weights..layer.bias];
            prev.clear();
            prev.resize(layer.fan_in, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                grad[layer.bias + o] += d;
                let span = o * layer.fan_in..(o + 1) * layer.fan_in;
                let g_row = &mut grad[layer.weights + span.start..layer.weights + span.end];
                for (g, xi) in g_row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                for (p, wi) in prev.iter_mut().zip(&w[span]) {
                    *p += d * wi;
                }
            }
            if k > 0 {
                // through tanh: d/dz tanh = 1 - a^2
                for (p, a) in prev.iter_mut().zip(x) {
                    *p *= 1.0 - a * a;
                }
            }
            std::mem::swap(delta, prev);
            end = start;
        }
        input_grad.copy_from_slice(delta);
    }

    /// Gradient of `sum_j upstream[j] * forward(inputs[j])` in the parameters.
    pub fn backward(&self, inputs: &[Vec<f64>], upstream: &[f64]) -> Result<Vec<f64>> {
        if inputs.is_empty() {
            return Err(Error::InvalidParams("empty batch".into()));
        }
        if inputs.len() != upstream.len() {
            return Err(Error::ShapeMismatch {
                expected: inputs.len(),
                got: upstream.len(),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut tape = Tape::default();
        let mut input_grad = vec![0.0; self.arch.input_dim];
        for (input, &u) in inputs.iter().zip(upstream) {
            self.check_input(input)?;
            self.forward_tape(input, &mut tape);
            self.backprop(&mut tape, u, &mut grad, &mut input_grad);
        }
        Ok(grad)
    }

    /// Text checkpoint: a short header describing the architecture followed
    /// by one parameter per line in layer order.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "mlp 1")?;
        writeln!(out, "input {}", self.arch.input_dim)?;
        let hidden: Vec<String> = self.arch.hidden.iter().map(|h| h.to_string()).collect();
        writeln!(out, "hidden {}", hidden.join(" "))?;
        writeln!(out, "activation {}", self.arch.activation.name())?;
        writeln!(out, "params {}", self.params.len())?;
        for p in &self.params {
            writeln!(out, "{p:e}")?;
        }
        Ok(())
    }

    /// Reads the format written by [`Mlp::write_text`].
    pub fn read_text<R: BufRead>(lines: &mut std::io::Lines<R>) -> std::result::Result<Self, String> {
        let mut next = || -> std::result::Result<String, String> {
            lines
                .next()
                .ok_or_else(|| "unexpected end of checkpoint".to_string())?
                .map_err(|e| e.to_string())
        };
        let expect = |line: String, key: &str| -> std::result::Result<String, String> {
            line.strip_prefix(key)
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| format!("expected `{key}`, found `{line}`"))
        };
        if expect(next()?, "mlp")? != "1" {
            return Err("unsupported network format version".into());
        }
        let input_dim = expect(next()?, "input")?
            .parse::<usize>()
            .map_err(|e| e.to_string())?;
        let hidden = expect(next()?, "hidden")?
            .split_whitespace()
            .map(|w| w.parse::<usize>().map_err(|e| e.to_string()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let act = expect(next()?, "activation")?;
        if act != "tanh" {
            return Err(format!("unknown activation `{act}`"));
        }
        let count = expect(next()?, "params")?
            .parse::<usize>()
            .map_err(|e| e.to_string())?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            params.push(next()?.trim().parse::<f64>().map_err(|e| e.to_string())?);
        }
        Mlp::from_params(Arch::new(input_dim, &hidden), params).map_err(|e| e.to_string())
    }
}

/// Dot product with four independent accumulators so the compiler can
/// vectorise; the summation order is fixed, so results are reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Bias-corrected adaptive moments.
    #[default]
    Adam,
    /// `theta - lr * g`.
    Plain,
}

/// Optimiser state for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        Adam {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "non-finite gradient component {i}: {}",
                grads[i]
            )));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Plain => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Mlp {
        Mlp::init(Arch::new(2, &[5, 4]), 11).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = small();
        let b = small();
        assert_eq!(a.params(), b.params());
        let c = Mlp::init(Arch::new(2, &[5, 4]), 12).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn init_weights_centred() {
        let net = Mlp::init(Arch::new(2, &[120, 120]), 5).unwrap();
        let weights: Vec<f64> = net
            .layers
            .iter()
            .flat_map(|l| net.params[l.weights..l.bias].iter().copied())
            .collect();
        assert!(weights.len() >= 10_000);
        // per-layer uniform widths differ, so standardise each weight by its layer's sd
        let mut z = Vec::new();
        for l in &net.layers {
            let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            let sd = limit / 3f64.sqrt();
            z.extend(net.params[l.weights..l.bias].iter().map(|w| w / sd));
        }
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let se = 1.0 / (z.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        for l in &net.layers {
            assert!(net.params[l.bias..l.bias + l.fan_out].iter().all(|b| *b == 0.0));
        }
    }

    #[test]
    fn affine_only_network() {
        let net = Mlp::from_params(Arch::new(2, &[]), vec![2.0, 3.0, 1.0]).unwrap();
        assert_eq!(net.forward(&[1.0, 1.0]).unwrap(), 6.0);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let arch = Arch::new(2, &[3, 3]);
        let net = Mlp::from_params(arch.clone(), vec![0.0; arch.param_count()]).unwrap();
        assert_eq!(net.forward(&[0.3, -7.0]).unwrap(), 0.0);
    }

    #[test]
    fn zero_output_weights_give_bias() {
        let mut net = small();
        let last = *net.layers.last().unwrap();
        for w in &mut net.params[last.weights..last.bias] {
            *w = 0.0;
        }
        net.params[last.bias] = 0.75;
        assert_eq!(net.forward(&[0.1, 0.2]).unwrap(), 0.75);
        assert_eq!(net.forward(&[-9.0, 4.0]).unwrap(), 0.75);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = small();
        assert!(net.forward(&[f64::NAN, 0.0]).is_err());
        assert!(net.forward(&[0.0]).is_err());
    }

    #[test]
    fn backward_zero_upstream() {
        let net = small();
        let g = net.backward(&[vec![0.3, 0.1], vec![0.5, -0.2]], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_batch() {
        let net = small();
        let x = vec![0.4, -0.6];
        let one = net.backward(&[x.clone()], &[1.0]).unwrap();
        let two = net.backward(&[x.clone(), x], &[1.0, 1.0]).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_shape_errors() {
        let net = small();
        assert!(net.backward(&[vec![0.0, 0.0]], &[1.0, 2.0]).is_err());
        assert!(net.backward(&[], &[]).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let net = small();
        let x = [0.3, -0.8];
        let mut tape = Tape::default();
        net.forward_tape(&x, &mut tape);
        let mut grad = vec![0.0; net.param_count()];
        let mut gin = [0.0; 2];
        net.backprop(&mut tape, 1.0, &mut grad, &mut gin);
        for k in 0..2 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (net.forward(&xp).unwrap() - net.forward(&xm).unwrap()) / (2.0 * h);
            assert!((fd - gin[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn output_bounded_by_final_layer() {
        let net = small();
        let last = *net.layers.last().unwrap();
        let bound: f64 = net.params[last.weights..last.bias].iter().map(|w| w.abs()).sum::<f64>()
            + net.params[last.bias].abs();
        for x in [[100.0, -100.0], [0.0, 0.0], [-3.0, 7.0]] {
            assert!(net.forward(&x).unwrap().abs() <= bound);
        }
    }

    #[test]
    fn checkpoint_text_round_trip() {
        let net = small();
        let mut buf = Vec::new();
        net.write_text(&mut buf).unwrap();
        let mut lines = std::io::BufRead::lines(&buf[..]);
        let back = Mlp::read_text(&mut lines).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn optimizer_examples() {
        let mut opt = Adam::new(OptimizerKind::Plain, 1);
        let mut theta = [1.0];
        opt.step(&mut theta, &[2.0], 0.1).unwrap();
        assert!((theta[0] - 0.8).abs() < 1e-15);

        let mut adam = Adam::new(OptimizerKind::Adam, 3);
        let mut p = [1.0, -2.0, 3.0];
        adam.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
        assert_eq!(adam.steps(), 1);

        let mut a1 = Adam::new(OptimizerKind::Adam, 2);
        let mut a2 = a1.clone();
        let (mut p1, mut p2) = ([0.5, 0.5], [0.5, 0.5]);
        a1.step(&mut p1, &[0.3, -1.0], 1e-3).unwrap();
        a2.step(&mut p2, &[0.3, -1.0], 1e-3).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(a1, a2);

        assert!(adam.step(&mut p, &[f64::NAN, 0.0, 0.0], 0.1).is_err());
    }
}
