//! Small fully connected network with batched forward and backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weights are `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Per-layer values recorded by [`Mlp::forward_batch`].
pub(crate) struct Tape {
    n: usize,
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub(crate) fn outputs(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parameter gradient with the same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl Mlp {
    /// Uniform He initialization for the hidden layers, Glorot for the
    /// output layer; biases start at zero.
    pub fn new(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            sizes.len() >= 2,
            "network needs an input and an output size"
        );
        let n_layers = sizes.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (inputs, outputs) = (sizes[l], sizes[l + 1]);
                let last = l + 1 == n_layers;
                let limit = if last {
                    (6.0 / (inputs + outputs) as f64).sqrt()
                } else {
                    (6.0 / inputs as f64).sqrt()
                };
                Layer {
                    inputs,
                    outputs,
                    weights: (0..inputs * outputs)
                        .map(|_| rng.gen_range(-limit..limit))
                        .collect(),
                    bias: vec![0.0; outputs],
                    activation: if last { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameters in layer order, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.n_params());
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let mut current = x.to_vec();
        let mut next = Vec::new();
        for l in &self.layers {
            next.clear();
            next.extend(
                l.weights
                    .chunks_exact(l.inputs)
                    .zip(&l.bias)
                    .map(|(row, b)| l.activation.apply(b + dot(row, &current))),
            );
            std::mem::swap(&mut current, &mut next);
        }
        current[0]
    }

    /// Forward pass over `n` row-major inputs.
    pub(crate) fn forward_batch(&self, xs: &[f64], n: usize) -> Tape {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(xs.to_vec());
        for l in &self.layers {
            let input = acts.last().expect("input present");
            let mut z = vec![0.0; n * l.outputs];
            for (x, zrow) in input
                .chunks_exact(l.inputs)
                .zip(z.chunks_exact_mut(l.outputs))
            {
                for ((zo, row), b) in zrow
                    .iter_mut()
                    .zip(l.weights.chunks_exact(l.inputs))
                    .zip(&l.bias)
                {
                    *zo = b + dot(row, x);
                }
            }
            let a: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            pre.push(z);
            acts.push(a);
        }
        Tape { n, acts, pre }
    }

    /// Gradient of `Σ_i dout_i · out_i` with respect to every parameter.
    pub(crate) fn backward(&self, tape: &Tape, dout: &[f64]) -> Gradient {
        let n = tape.n;
        let n_layers = self.layers.len();
        let mut gw: Vec<Vec<f64>> = self
            .layers
            .iter()
            .map(|l| vec![0.0; l.weights.len()])
            .collect();
        let mut gb: Vec<Vec<f64>> = self
            .layers
            .iter()
            .map(|l| vec![0.0; l.bias.len()])
            .collect();

        let last = &self.layers[n_layers - 1];
        let mut delta: Vec<f64> = (0..n * last.outputs)
            .map(|k| {
                dout[k]
                    * last
                        .activation
                        .derivative(tape.pre[n_layers - 1][k], tape.acts[n_layers][k])
            })
            .collect();
        for li in (0..n_layers).rev() {
            let l = &self.layers[li];
            let input = &tape.acts[li];
            for (drow, x) in delta
                .chunks_exact(l.outputs)
                .zip(input.chunks_exact(l.inputs))
            {
                for (o, &d) in drow.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, x, &mut gw[li][o * l.inputs..(o + 1) * l.inputs]);
                        gb[li][o] += d;
                    }
                }
            }
            if li == 0 {
                break;
            }
            let below = &self.layers[li - 1];
            let mut next = vec![0.0; n * l.inputs];
            for (drow, nrow) in delta
                .chunks_exact(l.outputs)
                .zip(next.chunks_exact_mut(l.inputs))
            {
                for (&d, wrow) in drow.iter().zip(l.weights.chunks_exact(l.inputs)) {
                    if d != 0.0 {
                        axpy(d, wrow, nrow);
                    }
                }
            }
            for (k, v) in next.iter_mut().enumerate() {
                *v *= below
                    .activation
                    .derivative(tape.pre[li - 1][k], tape.acts[li][k]);
            }
            delta = next;
        }
        Gradient {
            weights: gw,
            bias: gb,
        }
    }

    /// Gradient of `Σ_i dout_i · f(x_i)` over `n` row-major inputs.
    pub fn output_gradient(&self, xs: &[f64], n: usize, dout: &[f64]) -> Gradient {
        let tape = self.forward_batch(xs, n);
        self.backward(&tape, dout)
    }

    /// `θ ← θ − step · g`
    pub(crate) fn descend(&mut self, grad: &Gradient, step: f64) {
        for ((l, gw), gb) in self.layers.iter_mut().zip(&grad.weights).zip(&grad.bias) {
            axpy(-step, gw, &mut l.weights);
            axpy(-step, gb, &mut l.bias);
        }
    }

    pub(crate) fn chains(&self) -> bool {
        !self.layers.is_empty()
            && self.layers.windows(2).all(|w| w[0].outputs == w[1].inputs)
            && self.layers.last().is_some_and(|l| l.outputs == 1)
            && self
                .layers
                .iter()
                .all(|l| l.weights.len() == l.inputs * l.outputs && l.bias.len() == l.outputs)
    }
}
