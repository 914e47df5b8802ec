//! Small dense networks with hand-written backpropagation and Adam.
//!
//! Parameters live in one flat vector, layer by layer, each layer storing
//! its row-major weight matrix (`out x in`) followed by its bias vector.
//! Gradients use the same layout, so optimizers and soft updates can work
//! on plain slices.

use crate::scalar::Real;
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

const CHECKPOINT_MAGIC: &str = "mlp-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("invalid layer dims {0:?}: need at least input and output, all non-zero")]
    Layout(Vec<usize>),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Activation of the output layer. Hidden layers are always ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Activation::Linear),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn first_non_finite<T: Real>(xs: &[T]) -> Option<usize> {
    xs.iter().position(|x| !x.is_finite())
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// `acts[0]` is the input, `acts[l]` the output of layer `l`.
    acts: Vec<Vec<T>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("trace always holds the input")
    }
}

/// Feed-forward network with ReLU hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    dims: Vec<usize>,
    output: Activation,
    params: Vec<T>,
}

impl<T: Real> Mlp<T> {
    /// All-zero network.
    pub fn zeros(dims: &[usize], output: Activation) -> Result<Self, NeuralError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NeuralError::Layout(dims.to_vec()));
        }
        let count = dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
        Ok(Self {
            dims: dims.to_vec(),
            output,
            params: vec![T::zero(); count],
        })
    }

    /// Weights and biases drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], output: Activation, rng: &mut R) -> Result<Self, NeuralError> {
        let mut net = Self::zeros(dims, output)?;
        let mut offset = 0;
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let len = w[1] * (w[0] + 1);
            for p in &mut net.params[offset..offset + len] {
                *p = T::lit(rng.random_range(-bound..=bound));
            }
            offset += len;
        }
        Ok(net)
    }

    /// Builds a network from explicit parameters in the flat layout.
    pub fn from_params(dims: &[usize], output: Activation, params: Vec<T>) -> Result<Self, NeuralError> {
        let mut net = Self::zeros(dims, output)?;
        if params.len() != net.params.len() {
            return Err(NeuralError::Dimension {
                context: "parameter vector",
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if let Some(index) = first_non_finite(&params) {
            return Err(NeuralError::NonFinite {
                what: "parameter",
                index,
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Same layer dims and output activation.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims == other.dims && self.output == other.output
    }

    /// Offset of layer `l`'s weights; its biases follow at `+ out * in`.
    fn layer_offset(&self, l: usize) -> usize {
        self.dims[..=l].windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn weight(&self, layer: usize, row: usize, col: usize) -> T {
        self.params[self.layer_offset(layer) + row * self.dims[layer] + col]
    }

    pub fn bias(&self, layer: usize, row: usize) -> T {
        let (n_in, n_out) = (self.dims[layer], self.dims[layer + 1]);
        self.params[self.layer_offset(layer) + n_out * n_in + row]
    }

    fn check_input(&self, input: &[T]) -> Result<(), NeuralError> {
        if input.len() != self.input_dim() {
            return Err(NeuralError::Dimension {
                context: "network input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Forward pass keeping every layer's output.
    pub fn forward_trace(&self, input: &[T]) -> Result<Trace<T>, NeuralError> {
        self.check_input(input)?;
        let layers = self.dims.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(input.to_vec());
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[offset..offset + n_out * n_in];
            let b = &self.params[offset + n_out * n_in..offset + n_out * (n_in + 1)];
            let x = &acts[l];
            let last = l + 1 == layers;
            let out: Vec<T> = (0..n_out)
                .map(|i| {
                    let row = &w[i * n_in..(i + 1) * n_in];
                    let z = row.iter().zip(x).fold(b[i], |acc, (&wij, &xj)| acc + wij * xj);
                    match (last, self.output) {
                        (false, _) => z.max(T::zero()),
                        (true, Activation::Linear) => z,
                        (true, Activation::Sigmoid) => sigmoid(z),
                    }
                })
                .collect();
            acts.push(out);
            offset += n_out * (n_in + 1);
        }
        Ok(Trace { acts })
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>, NeuralError> {
        Ok(self.forward_trace(input)?.acts.pop().unwrap())
    }

    /// Backpropagates `upstream` (the gradient of some scalar with respect
    /// to the output) through a recorded pass. Parameter gradients are added
    /// into `grads`; the input gradient is returned.
    pub fn backward_into(&self, trace: &Trace<T>, upstream: &[T], grads: &mut [T]) -> Result<Vec<T>, NeuralError> {
        if upstream.len() != self.output_dim() {
            return Err(NeuralError::Dimension {
                context: "upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(NeuralError::Dimension {
                context: "gradient buffer",
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let layers = self.dims.len() - 1;
        let out = trace.output();
        let mut delta: Vec<T> = match self.output {
            Activation::Linear => upstream.to_vec(),
            Activation::Sigmoid => upstream.iter().zip(out).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
        };
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let offset = self.layer_offset(l);
            let x = &trace.acts[l];
            for i in 0..n_out {
                let d = delta[i];
                let row = &mut grads[offset + i * n_in..offset + (i + 1) * n_in];
                for (g, &xj) in row.iter_mut().zip(x) {
                    *g += d * xj;
                }
                grads[offset + n_out * n_in + i] += d;
            }
            let w = &self.params[offset..offset + n_out * n_in];
            let mut prev: Vec<T> = (0..n_in)
                .map(|j| (0..n_out).fold(T::zero(), |acc, i| acc + w[i * n_in + j] * delta[i]))
                .collect();
            if l > 0 {
                // ReLU: pass gradient only where the unit was active.
                for (p, &a) in prev.iter_mut().zip(x) {
                    if a <= T::zero() {
                        *p = T::zero();
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Gradients of `output . upstream` with respect to the parameters and
    /// the input.
    pub fn backward(&self, input: &[T], upstream: &[T]) -> Result<(Vec<T>, Vec<T>), NeuralError> {
        let trace = self.forward_trace(input)?;
        let mut grads = vec![T::zero(); self.params.len()];
        let input_grad = self.backward_into(&trace, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Serializes to the versioned text checkpoint format.
    pub fn to_checkpoint(&self) -> String {
        let mut s = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\noutput {}\ndims", self.output.name());
        for d in &self.dims {
            let _ = write!(s, " {d}");
        }
        let _ = writeln!(s, "\nparams {}", self.params.len());
        for p in &self.params {
            let _ = writeln!(s, "{p}");
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, NeuralError> {
        let err = |line: usize, message: String| NeuralError::Checkpoint { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
        };

        let (ln, header) = next("header")?;
        let version = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| err(ln, format!("expected '{CHECKPOINT_MAGIC} <version>'")))?;
        if version != CHECKPOINT_VERSION {
            return Err(err(ln, format!("unsupported version {version}")));
        }
        let (ln, output) = next("output activation")?;
        let output = output
            .strip_prefix("output ")
            .and_then(|a| Activation::parse(a.trim()))
            .ok_or_else(|| err(ln, "expected 'output linear|sigmoid'".into()))?;
        let (ln, dims) = next("layer dims")?;
        let dims: Vec<usize> = dims
            .strip_prefix("dims")
            .ok_or_else(|| err(ln, "expected 'dims ...'".into()))?
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| err(ln, format!("bad dimension '{d}'"))))
            .collect::<Result<_, _>>()?;
        let (ln, count) = next("parameter count")?;
        let count: usize = count
            .strip_prefix("params")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| err(ln, "expected 'params <count>'".into()))?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, v) = next("parameter")?;
            let x: f64 = v.parse().map_err(|_| err(ln, format!("bad number '{v}'")))?;
            params.push(T::lit(x));
        }
        Self::from_params(&dims, output, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NeuralError> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NeuralError> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    /// Conventional moments `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(param_count: usize, lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: vec![T::zero(); param_count],
            v: vec![T::zero(); param_count],
            t: 0,
        }
    }

    pub fn for_net(net: &Mlp<T>, lr: T) -> Self {
        Self::new(net.param_count(), lr)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update. The network is left untouched if any
    /// gradient entry is non-finite.
    pub fn step(&mut self, net: &mut Mlp<T>, grads: &[T], direction: Direction) -> Result<(), NeuralError> {
        if grads.len() != net.params.len() || self.m.len() != net.params.len() {
            return Err(NeuralError::Dimension {
                context: "adam step",
                expected: net.params.len(),
                got: if self.m.len() != net.params.len() {
                    self.m.len()
                } else {
                    grads.len()
                },
            });
        }
        if let Some(index) = first_non_finite(grads) {
            return Err(NeuralError::NonFinite { what: "gradient", index });
        }
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let sign = match direction {
            Direction::Descent => -T::one(),
            Direction::Ascent => T::one(),
        };
        for (((p, &g), m), v) in net.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (T::one() - self.beta1) * g;
            *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p += sign * self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
