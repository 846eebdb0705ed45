use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, NodeId, Tape, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input: usize, output: usize, activation: Activation) -> Self {
        Self {
            input,
            output,
            activation,
        }
    }
}

/// A fully connected layer: `act(x W + b)` with `W` stored `input x output`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.weight.rows(), self.weight.cols(), self.activation)
    }
}

/// Parameters of a multi-layer perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        validate_chain(specs)?;
        let layers = specs
            .iter()
            .map(|s| {
                let limit = (6.0 / (s.input + s.output) as f64).sqrt();
                let data = (0..s.input * s.output)
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect();
                Dense {
                    weight: Tensor::new(vec![s.input, s.output], data).expect("sized"),
                    bias: Tensor::zeros(&[s.output]),
                    activation: s.activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.len() != l.weight.cols() {
                return Err(dim_err(
                    format!("layer {i} bias"),
                    l.weight.cols(),
                    l.bias.len(),
                ));
            }
        }
        let specs: Vec<_> = layers.iter().map(Dense::spec).collect();
        validate_chain(&specs)?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Dense::spec).collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights and biases in layer order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// All entries concatenated in layer order (weight then bias).
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrite all entries from a vector laid out as by [`MlpParams::flatten`].
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(dim_err("flat parameter vector", self.param_count(), values.len()));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Tape-free forward pass.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if x.cols() != layer.weight.rows() {
                return Err(dim_err(
                    format!("mlp layer {i} input width"),
                    layer.weight.rows(),
                    x.cols(),
                ));
            }
            let mut y = x.matmul(&layer.weight)?;
            let c = y.cols();
            let b = layer.bias.data();
            for (j, v) in y.data_mut().iter_mut().enumerate() {
                *v += b[j % c];
                *v = match layer.activation {
                    Activation::Relu => v.max(0.0),
                    Activation::Identity => *v,
                    Activation::Sigmoid => super::sigmoid(*v),
                };
            }
            x = y;
        }
        Ok(x)
    }
}

fn validate_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Contract("an MLP needs at least one layer".into()));
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].output != pair[1].input {
            return Err(dim_err(
                format!("mlp layer {} input width", i + 1),
                pair[0].output,
                pair[1].input,
            ));
        }
    }
    Ok(())
}

/// Tape handles produced by [`forward_mlp`].
#[derive(Clone, Debug)]
pub struct MlpNodes {
    pub output: NodeId,
    /// `(weight, bias)` per layer.
    pub params: Vec<(NodeId, NodeId)>,
}

impl MlpNodes {
    pub fn grads(&self, g: &Gradients) -> MlpGrads {
        MlpGrads {
            layers: self
                .params
                .iter()
                .map(|&(w, b)| DenseGrad {
                    weight: g.wrt(w),
                    bias: g.wrt(b),
                })
                .collect(),
        }
    }
}

/// Record a forward pass of `params` applied to `input` on `tape`.
pub fn forward_mlp(params: &MlpParams, input: NodeId, tape: &mut Tape) -> Result<MlpNodes> {
    let mut x = input;
    let mut handles = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let width = tape.value(x).cols();
        if width != layer.weight.rows() {
            return Err(dim_err(
                format!("mlp layer {i} input width"),
                layer.weight.rows(),
                width,
            ));
        }
        let w = tape.param(layer.weight.clone());
        let b = tape.param(layer.bias.clone());
        let xw = tape.matmul(x, w)?;
        let pre = tape.add_row(xw, b)?;
        x = match layer.activation {
            Activation::Relu => tape.relu(pre),
            Activation::Identity => pre,
            Activation::Sigmoid => tape.sigmoid(pre),
        };
        handles.push((w, b));
    }
    Ok(MlpNodes {
        output: x,
        params: handles,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer gradient buffers matching an [`MlpParams`] layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<DenseGrad>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// All entries concatenated in layer order (weight then bias).
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &MlpGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale_in_place(alpha);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}
