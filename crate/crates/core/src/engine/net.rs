use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::rng::RngStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu(alpha) => {
                if z > 0.0 {
                    z
                } else {
                    alpha * z
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and the output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(alpha) => {
                if z > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully-connected layer computing `act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out_dim x in_dim`
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
    /// Weight-decay coefficient; contributes `l2 * w` to each weight gradient.
    pub l2_lambda: f64,
    /// Whether train-mode dropout is applied to this layer's output.
    pub dropout: bool,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero biases.
    pub fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((out_dim, in_dim), || rng.uniform_range(-limit, limit));
        Self {
            weights,
            biases: Array1::zeros(out_dim),
            activation,
            l2_lambda: 0.0,
            dropout: false,
        }
    }

    pub fn with_l2(mut self, lambda: f64) -> Self {
        self.l2_lambda = lambda;
        self
    }

    pub fn with_dropout(mut self) -> Self {
        self.dropout = true;
        self
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Stack of dense layers. Every parameter mutation bumps `generation`, which
/// lets `backward` reject tapes recorded against older weights.
#[derive(Debug, Clone)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
    generation: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Intermediates from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }

    pub fn dropout_masks(&self) -> &[Option<Array2<f64>>] {
        &self.masks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.biases.len())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

impl DenseNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_dim(),
                    got: pair[1].in_dim(),
                });
            }
        }
        for l in &layers {
            if l.biases.len() != l.out_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.out_dim(),
                    got: l.biases.len(),
                });
            }
            if l.weights.iter().chain(l.biases.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite layer parameter"));
            }
        }
        Ok(Self { layers, generation: 0 })
    }

    /// Builds a net from `dims[0] -> dims[1] -> ...` with one activation per layer.
    pub fn build(dims: &[usize], activations: &[Activation], rng: &mut RngStream) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::config("dims/activations do not describe a layer stack"));
        }
        if dims.contains(&0) {
            return Err(Error::config("layer dimensions must be at least 1"));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &act)| DenseLayer::init(d[0], d[1], act, rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, k: usize) -> &mut DenseLayer {
        self.generation += 1;
        &mut self.layers[k]
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub(crate) fn touch(&mut self) -> &mut [DenseLayer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// `sum_k 0.5 * l2_k * ||W_k||^2`; biases are not penalised.
    pub fn l2_penalty(&self) -> f64 {
        self.layers
            .iter()
            .filter(|l| l.l2_lambda > 0.0)
            .map(|l| 0.5 * l.l2_lambda * l.weights.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.biases.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut it = params.iter();
        for l in self.touch() {
            l.weights.iter_mut().chain(l.biases.iter_mut()).for_each(|p| *p = *it.next().unwrap());
        }
        Ok(())
    }

    /// Forward pass over a batch (one sample per row).
    ///
    /// In train mode, layers flagged for dropout keep each unit with
    /// probability `1 - dropout_rate` and scale survivors by
    /// `1 / (1 - dropout_rate)`. Eval mode never touches `rng`.
    pub fn forward(
        &self,
        input: &Array2<f64>,
        mode: Mode,
        dropout_rate: f64,
        rng: &mut RngStream,
    ) -> Result<(Array2<f64>, Tape)> {
        if input.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: input.ncols(),
            });
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::config(format!("dropout rate {dropout_rate} not in [0,1)")));
        }
        let n = self.layers.len();
        let mut tape = Tape {
            generation: self.generation,
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weights.t());
            z += &layer.biases;
            let act = layer.activation;
            let a = z.mapv(|v| act.apply(v));
            let (out, mask) = if mode == Mode::Train && layer.dropout && dropout_rate > 0.0 {
                let keep = 1.0 - dropout_rate;
                let scale = 1.0 / keep;
                let mask = Array2::from_shape_simple_fn(a.raw_dim(), || {
                    if rng.uniform() < keep {
                        scale
                    } else {
                        0.0
                    }
                });
                (&a * &mask, Some(mask))
            } else {
                (a.clone(), None)
            };
            tape.inputs.push(x);
            tape.pre.push(z);
            tape.post.push(a);
            tape.masks.push(mask);
            x = out;
        }
        Ok((x, tape))
    }

    /// Eval-mode forward without keeping a tape.
    pub fn predict(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: input.ncols(),
            });
        }
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weights.t());
            z += &layer.biases;
            let act = layer.activation;
            z.mapv_inplace(|v| act.apply(v));
            x = z;
        }
        Ok(x)
    }

    /// Reverse-mode gradients of `loss + l2_penalty` given `d loss / d output`.
    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, output_gradient: &Array2<f64>) -> Result<(Gradients, Array2<f64>)> {
        if tape.generation != self.generation || tape.inputs.len() != self.layers.len() {
            return Err(Error::StaleTape(format!(
                "tape generation {} vs net generation {}",
                tape.generation, self.generation
            )));
        }
        let batch = tape.batch_size();
        if output_gradient.nrows() != batch || output_gradient.ncols() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.out_dim(),
                got: output_gradient.ncols(),
            });
        }
        let n = self.layers.len();
        let mut wgrads = Vec::with_capacity(n);
        let mut bgrads = Vec::with_capacity(n);
        let mut g = output_gradient.to_owned();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            if let Some(mask) = &tape.masks[k] {
                g *= mask;
            }
            let act = layer.activation;
            Zip::from(&mut g)
                .and(&tape.pre[k])
                .and(&tape.post[k])
                .for_each(|g, &z, &a| *g *= act.derivative(z, a));
            let mut dw = g.t().dot(&tape.inputs[k]);
            if layer.l2_lambda > 0.0 {
                dw.scaled_add(layer.l2_lambda, &layer.weights);
            }
            let db = g.sum_axis(Axis(0));
            let dx = g.dot(&layer.weights);
            wgrads.push(dw);
            bgrads.push(db);
            g = dx;
        }
        wgrads.reverse();
        bgrads.reverse();
        Ok((
            Gradients {
                weights: wgrads,
                biases: bgrads,
            },
            g,
        ))
    }
}
