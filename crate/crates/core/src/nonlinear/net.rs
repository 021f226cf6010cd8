use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn slope(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// Layer sizes and one activation per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NetworkSpec {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl NetworkSpec {
    pub fn affine(input: usize, output: usize) -> Self {
        Self {
            sizes: vec![input, output],
            activations: vec![Activation::Identity],
        }
    }

    /// One tanh hidden layer, linear output.
    pub fn tanh_mlp(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            sizes: vec![input, hidden, output],
            activations: vec![Activation::Tanh, Activation::Identity],
        }
    }

    pub fn input(&self) -> usize {
        self.sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.sizes.last().expect("at least one layer")
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

/// Named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// A network living at `offset` inside a flat parameter vector. Layer `l`
/// stores its `out x in` weights row-major, then its `out` biases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Net {
    pub spec: NetworkSpec,
    pub offset: usize,
}

/// Per-layer outputs of one forward pass; `values[0]` is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub values: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("non-empty trace")
    }
}

impl Net {
    pub fn new(spec: NetworkSpec, offset: usize) -> Self {
        Self { spec, offset }
    }

    pub fn end(&self) -> usize {
        self.offset + self.spec.n_params()
    }

    pub fn block(&self, name: &str) -> ParamBlock {
        ParamBlock {
            name: name.to_string(),
            offset: self.offset,
            len: self.spec.n_params(),
        }
    }

    /// Weights drawn as `N(0, 1 / fan_in)`, biases zero.
    pub fn init(&self, params: &mut [f64], rng: &mut Rng) {
        let mut at = self.offset;
        for w in self.spec.sizes.windows(2) {
            let (fan_in, out) = (w[0], w[1]);
            let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
            for p in &mut params[at..at + out * fan_in] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
            at += out * fan_in;
            params[at..at + out].fill(0.0);
            at += out;
        }
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Trace {
        debug_assert_eq!(input.len(), self.spec.input());
        let mut values = Vec::with_capacity(self.spec.sizes.len());
        values.push(input.to_vec());
        let mut at = self.offset;
        for (l, w) in self.spec.sizes.windows(2).enumerate() {
            let (fan_in, out) = (w[0], w[1]);
            let weights = &params[at..at + out * fan_in];
            let bias = &params[at + out * fan_in..at + out * (fan_in + 1)];
            let prev = &values[l];
            let act = self.spec.activations[l];
            let next: Vec<f64> = (0..out)
                .map(|o| {
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    act.apply(bias[o] + row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>())
                })
                .collect();
            values.push(next);
            at += out * (fan_in + 1);
        }
        Trace { values }
    }

    /// Accumulates `d loss / d params` into `grad` and returns
    /// `d loss / d input`, given `d loss / d output`.
    pub fn backward(&self, params: &[f64], trace: &Trace, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let n_layers = self.spec.activations.len();
        let mut starts = Vec::with_capacity(n_layers);
        let mut at = self.offset;
        for w in self.spec.sizes.windows(2) {
            starts.push(at);
            at += w[1] * (w[0] + 1);
        }
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, out) = (self.spec.sizes[l], self.spec.sizes[l + 1]);
            let act = self.spec.activations[l];
            let post = &trace.values[l + 1];
            let pre_grad: Vec<f64> = delta.iter().zip(post).map(|(d, y)| d * act.slope(*y)).collect();
            let input = &trace.values[l];
            let start = starts[l];
            let mut grad_in = vec![0.0; fan_in];
            for o in 0..out {
                let g = pre_grad[o];
                if g == 0.0 {
                    continue;
                }
                let row = start + o * fan_in;
                for i in 0..fan_in {
                    grad[row + i] += g * input[i];
                    grad_in[i] += g * params[row + i];
                }
                grad[start + out * fan_in + o] += g;
            }
            delta = grad_in;
        }
        delta
    }
}
