//! Fully connected networks on top of the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeedStreams;
use crate::tensor::{gemm, Tensor};

/// Layer widths, activations and init seed for an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    /// One entry per hidden layer (`layer_widths.len() - 2` entries).
    pub hidden_activations: Vec<Activation>,
    pub output_activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    /// All hidden layers share `hidden`.
    pub fn uniform(widths: &[usize], hidden: Activation, output: Activation, seed: u64) -> Self {
        Self {
            layer_widths: widths.to_vec(),
            hidden_activations: vec![hidden; widths.len().saturating_sub(2)],
            output_activation: output,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "zero width in {:?}",
                self.layer_widths
            )));
        }
        if self.hidden_activations.len() != self.layer_widths.len() - 2 {
            return Err(Error::InvalidSpec(format!(
                "{} hidden activations for {} hidden layers",
                self.hidden_activations.len(),
                self.layer_widths.len() - 2
            )));
        }
        Ok(())
    }
}

/// One affine layer followed by an activation. Weights are stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Builds an MLP with Glorot-uniform weights and zero biases.
pub fn build_mlp(spec: &MlpSpec) -> Result<Mlp> {
    spec.validate()?;
    let streams = SeedStreams::new(spec.seed);
    let n_layers = spec.layer_widths.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for (i, pair) in spec.layer_widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = streams.indexed("init", i as u64);
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let activation = if i + 1 == n_layers {
            spec.output_activation
        } else {
            spec.hidden_activations[i]
        };
        layers.push(Dense {
            weight: Tensor::matrix(fan_in, fan_out, w)?.with_grad(),
            bias: Tensor::zeros(vec![fan_out])?.with_grad(),
            activation,
        });
    }
    Ok(Mlp { layers })
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidSpec("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Shape(format!(
                    "layer widths do not chain: {} then {}",
                    pair[0].fan_out(),
                    pair[1].fan_in()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Shape("bias length differs from fan-out".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in fixed order: weight then bias, layer by layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(flag);
        }
    }

    /// Taped forward pass over a batch `x` of shape `n × input_width`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let width = *tape.shape(x).last().unwrap_or(&0);
        if width != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {width}, network expects {}",
                self.input_width()
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            let w = tape.param(&layer.weight);
            let b = tape.param(&layer.bias);
            let a = tape.matmul(h, w)?;
            let a = tape.add_row(a, b)?;
            h = tape.activate(a, layer.activation);
        }
        Ok(h)
    }

    /// Untaped forward pass; pure and safe to call concurrently.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {}, network expects {}",
                x.cols(),
                self.input_width()
            )));
        }
        let n = x.rows();
        let mut h = x.data().to_vec();
        for layer in &self.layers {
            let (k, m) = (layer.fan_in(), layer.fan_out());
            let mut out = vec![0.0; n * m];
            gemm(n, k, m, &h, false, layer.weight.data(), false, &mut out, false);
            for row in out.chunks_mut(m) {
                for (o, b) in row.iter_mut().zip(layer.bias.data()) {
                    *o = layer.activation.apply(*o + b);
                }
            }
            h = out;
        }
        Tensor::matrix(n, self.output_width(), h)
    }
}
