//! Minimal differentiable feedforward network engine: forward evaluation,
//! reverse-mode gradients with respect to parameters and inputs, and an
//! Adam trainer. Double precision throughout; the gradient-check
//! tolerances depend on it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),
}

/// Hidden-layer activation; the output layer is always identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    LeakyRelu,
}

pub const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::LeakyRelu => "leaky_relu",
        }
    }

    fn from_tag(tag: &str) -> Result<Self, NnError> {
        match tag {
            "identity" => Ok(Activation::Identity),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            other => Err(NnError::Checkpoint(format!("unknown activation {other:?}"))),
        }
    }
}

/// Fully-connected network. Weights for layer `l` are stored row-major,
/// `weights[l][o * in + i]`; the activation applies to hidden layers only.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNet {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

/// Per-parameter gradients, same shapes as the network's weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &NeuralNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &ParamGrads, factor: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            for x in w {
                *x *= factor;
            }
        }
        for b in &mut self.biases {
            for x in b {
                *x *= factor;
            }
        }
    }
}

impl NeuralNet {
    /// He-style scaled uniform initialization, deterministic per seed.
    pub fn init(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 {
            return Err(NnError::InvalidNetwork(
                "a network needs at least input and output layers".into(),
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(NnError::InvalidNetwork("zero-width layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Pre-activations for every layer; the last entry is the output.
    fn forward_trace(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let last = self.num_layers() - 1;
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut x = input.to_vec();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let mut z = self.biases[l].clone();
            for o in 0..fan_out {
                let row = &self.weights[l][o * fan_in..(o + 1) * fan_in];
                let mut acc = 0.0;
                for (w, xi) in row.iter().zip(&x) {
                    acc += w * xi;
                }
                z[o] += acc;
            }
            if l < last {
                x = z.iter().map(|&v| self.activation.apply(v)).collect();
            }
            pre.push(z);
        }
        pre
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(input)?;
        Ok(self.forward_trace(input).pop().unwrap())
    }

    /// Reverse-mode gradients of `upstream . forward(input)` with respect to
    /// every parameter and to the input.
    pub fn backward(
        &self,
        input: &[f64],
        upstream: &[f64],
    ) -> Result<(ParamGrads, Vec<f64>), NnError> {
        self.check_input(input)?;
        if upstream.len() != self.output_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let pre = self.forward_trace(input);
        let last = self.num_layers() - 1;
        let mut grads = ParamGrads::zeros_like(self);

        // Output layer is identity, so the first delta is the upstream.
        let mut delta = upstream.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let prev_activ: Vec<f64> = if l == 0 {
                input.to_vec()
            } else {
                pre[l - 1].iter().map(|&z| self.activation.apply(z)).collect()
            };
            for o in 0..fan_out {
                grads.biases[l][o] = delta[o];
                let row = &mut grads.weights[l][o * fan_in..(o + 1) * fan_in];
                for (slot, a) in row.iter_mut().zip(&prev_activ) {
                    *slot = delta[o] * a;
                }
            }
            // Propagate to the previous layer: W^T delta, then the
            // activation derivative of that layer's pre-activations.
            let mut down = vec![0.0; fan_in];
            for o in 0..fan_out {
                let row = &self.weights[l][o * fan_in..(o + 1) * fan_in];
                for (d, w) in down.iter_mut().zip(row) {
                    *d += delta[o] * w;
                }
            }
            if l > 0 {
                for (d, z) in down.iter_mut().zip(&pre[l - 1]) {
                    *d *= self.activation.derivative(*z);
                }
            }
            let _ = last;
            delta = down;
        }
        Ok((grads, delta))
    }

    /// Writes the versioned checkpoint block; all reals carry 17
    /// significant digits so the round-trip is exact.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "net v1")?;
        write!(w, "sizes")?;
        for s in &self.layer_sizes {
            write!(w, " {s}")?;
        }
        writeln!(w)?;
        writeln!(w, "activation {}", self.activation.tag())?;
        for (l, (ws, bs)) in self.weights.iter().zip(&self.biases).enumerate() {
            write!(w, "weights{l}")?;
            for v in ws {
                write!(w, " {v:.16e}")?;
            }
            writeln!(w)?;
            write!(w, "biases{l}")?;
            for v in bs {
                write!(w, " {v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self, NnError> {
        let mut line = String::new();
        let mut next_line = |line: &mut String| -> Result<(), NnError> {
            line.clear();
            r.read_line(line)
                .map_err(|e| NnError::Checkpoint(e.to_string()))?;
            if line.is_empty() {
                return Err(NnError::Checkpoint("unexpected end of file".into()));
            }
            Ok(())
        };
        next_line(&mut line)?;
        if line.trim() != "net v1" {
            return Err(NnError::Checkpoint(format!("bad header {:?}", line.trim())));
        }
        next_line(&mut line)?;
        let sizes: Vec<usize> = line
            .trim()
            .strip_prefix("sizes")
            .ok_or_else(|| NnError::Checkpoint("missing sizes".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| NnError::Checkpoint(format!("{e}"))))
            .collect::<Result<_, _>>()?;
        if sizes.len() < 2 {
            return Err(NnError::Checkpoint("too few layers".into()));
        }
        next_line(&mut line)?;
        let activation = Activation::from_tag(
            line.trim()
                .strip_prefix("activation ")
                .ok_or_else(|| NnError::Checkpoint("missing activation".into()))?,
        )?;
        let parse_row = |line: &str, prefix: &str, expected: usize| -> Result<Vec<f64>, NnError> {
            let body = line
                .trim()
                .strip_prefix(prefix)
                .ok_or_else(|| NnError::Checkpoint(format!("expected {prefix}")))?;
            let vals: Vec<f64> = body
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| NnError::Checkpoint(format!("{e}"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != expected {
                return Err(NnError::Checkpoint(format!(
                    "{prefix}: expected {expected} values, got {}",
                    vals.len()
                )));
            }
            Ok(vals)
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            next_line(&mut line)?;
            weights.push(parse_row(&line, &format!("weights{l}"), sizes[l] * sizes[l + 1])?);
            next_line(&mut line)?;
            biases.push(parse_row(&line, &format!("biases{l}"), sizes[l + 1])?);
        }
        Ok(Self {
            layer_sizes: sizes,
            weights,
            biases,
            activation,
        })
    }
}

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone)]
pub struct AdamTrainer {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    m: ParamGrads,
    v: ParamGrads,
}

impl AdamTrainer {
    pub fn new(net: &NeuralNet, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            m: ParamGrads::zeros_like(net),
            v: ParamGrads::zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One Adam update from averaged batch gradients.
    pub fn step(&mut self, net: &mut NeuralNet, grads: &ParamGrads) -> Result<(), NnError> {
        let finite = grads
            .weights
            .iter()
            .chain(&grads.biases)
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(NnError::NonFiniteGradient);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let correction = (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        let lr_t = self.learning_rate * correction;

        let update = |params: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for k in 0..params.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                params[k] -= lr_t * m[k] / (v[k].sqrt() + self.epsilon);
            }
        };
        for l in 0..net.weights.len() {
            update(
                &mut net.weights[l],
                &grads.weights[l],
                &mut self.m.weights[l],
                &mut self.v.weights[l],
            );
            update(
                &mut net.biases[l],
                &grads.biases[l],
                &mut self.m.biases[l],
                &mut self.v.biases[l],
            );
        }
        Ok(())
    }
}
