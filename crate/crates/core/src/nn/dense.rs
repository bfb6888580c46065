//! Fully-connected layers with cached forward passes and explicit backward passes.
//!
//! Matrices are batch-major: a batch of `B` instances of width `d` is a `B × d`
//! array, and a layer with `n_in` inputs and `n_out` outputs stores its weights
//! as an `n_in × n_out` matrix so that `pre = x · W + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Negative-side slope of [`Activation::LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `max(v, LEAKY_SLOPE · v)`.
    LeakyRelu,
    Linear,
    Sigmoid,
    /// Row-wise softmax.
    Softmax,
}

impl Activation {
    fn apply(self, pre: &mut Array2<f64>) {
        match self {
            Activation::Relu => pre.mapv_inplace(|v| v.max(0.0)),
            Activation::LeakyRelu => pre.mapv_inplace(|v| v.max(LEAKY_SLOPE * v)),
            Activation::Linear => {}
            Activation::Sigmoid => pre.mapv_inplace(sigmoid),
            Activation::Softmax => {
                for mut row in pre.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
            }
        }
    }

    /// Maps a gradient w.r.t. the activation output to a gradient w.r.t. the
    /// pre-activation, given the activation output.
    fn backprop(self, out: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => {
                grad.zip_mut_with(out, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            Activation::LeakyRelu => {
                grad.zip_mut_with(out, |g, &o| {
                    if o <= 0.0 {
                        *g *= LEAKY_SLOPE
                    }
                });
            }
            Activation::Linear => {}
            Activation::Sigmoid => grad.zip_mut_with(out, |g, &s| *g *= s * (1.0 - s)),
            Activation::Softmax => {
                for (mut g, s) in grad.rows_mut().into_iter().zip(out.rows()) {
                    let dot = g.dot(&s);
                    g.zip_mut_with(&s, |gi, &si| *gi = si * (*gi - dot));
                }
            }
        }
    }

    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu | Activation::LeakyRelu => 6.0,
            _ => 3.0,
        }
    }
}

/// Logistic function, evaluated without overflow for large `|v|`.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Array2<f64>,
    bias: Array1<f64>,
    activation: Activation,
}

impl DenseLayer {
    /// Fan-in scaled uniform weights and zero bias.
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config(format!(
                "layer widths must be positive, got {inputs} -> {outputs}"
            )));
        }
        let bound = (activation.init_gain() / inputs as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((inputs, outputs), || {
            rng.random_range(-bound..bound)
        });
        Ok(Self {
            weights,
            bias: Array1::zeros(outputs),
            activation,
        })
    }

    pub fn from_parts(
        weights: Array2<f64>,
        bias: Array1<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::dim("layer bias", weights.ncols(), bias.len()));
        }
        if weights.is_empty() {
            return Err(Error::Config("empty weight matrix".into()));
        }
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut pre = x.dot(&self.weights);
        pre += &self.bias;
        self.activation.apply(&mut pre);
        pre
    }
}

/// Intermediate values of one forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    revision: u64,
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Post-activation output of each layer.
    outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("a network has at least one layer")
    }
}

/// Weight and bias gradients for every layer of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl NetGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.outputs())))
                .collect(),
        }
    }

    /// Gradient slices in the same order as [`DenseNet::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (w, b) in &self.layers {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            *w *= factor;
            *b *= factor;
        }
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
    revision: u64,
}

impl DenseNet {
    /// Builds a network over `widths` (input width first). Every layer but the
    /// last uses `hidden`; the last uses `output`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs at least two widths, got {widths:?}"
            )));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::new(w[0], w[1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            revision: 0,
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::dim(
                    "consecutive layer widths",
                    pair[0].outputs(),
                    pair[1].inputs(),
                ));
            }
        }
        Ok(Self {
            layers,
            revision: 0,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), batch.ncols()));
        }
        Ok(())
    }

    /// Forward pass without retaining intermediates.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let mut cur = self.layers[0].forward(&batch);
        for layer in &self.layers[1..] {
            cur = layer.forward(&cur.view());
        }
        Ok(cur)
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        inputs.push(batch.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(&inputs[i].view());
            if i + 1 < self.layers.len() {
                inputs.push(out.clone());
            }
            outputs.push(out);
        }
        let output = outputs.last().cloned().expect("non-empty");
        Ok((
            output,
            ForwardCache {
                revision: self.revision,
                inputs,
                outputs,
            },
        ))
    }

    /// Backpropagates `output_grad` (gradient of a scalar loss w.r.t. the
    /// network output) and returns parameter gradients plus the gradient
    /// w.r.t. the network input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
    ) -> Result<(NetGrads, Array2<f64>)> {
        if cache.revision != self.revision || cache.outputs.len() != self.layers.len() {
            return Err(Error::Usage(
                "forward cache does not belong to the current network parameters".into(),
            ));
        }
        let out = cache.output();
        if output_grad.dim() != out.dim() {
            return Err(Error::dim(
                "output gradient rows x cols",
                out.len(),
                output_grad.len(),
            ));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut grad = output_grad.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&cache.outputs[i], &mut grad);
            let mut dw = cache.inputs[i].t().dot(&grad);
            if !dw.is_standard_layout() {
                dw = dw.as_standard_layout().into_owned();
            }
            let db = grad.sum_axis(Axis(0));
            let dx = grad.dot(&layer.weights.t());
            layers.push((dw, db));
            grad = dx;
        }
        layers.reverse();
        Ok((NetGrads { layers }, grad))
    }

    /// Mutable parameter slices, alternating weights and biases per layer.
    /// Any cache created before this call is invalidated.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision += 1;
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            out.push(layer.weights.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            out.push(layer.weights.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out
    }
}
