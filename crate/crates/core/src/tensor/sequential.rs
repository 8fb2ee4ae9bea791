use std::collections::HashMap;
use std::ops::Range;

use rand::Rng;

use super::{Layer, LayerConfig, Mode, ParamTensor, Tensor};
use crate::error::Result;

/// Ordered stack of named layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    names: Vec<String>,
    layers: Vec<Layer>,
}

fn short_kind(cfg: &LayerConfig) -> &'static str {
    match cfg {
        LayerConfig::Conv2d { .. } => "conv",
        LayerConfig::Maxpool { .. } => "pool",
        LayerConfig::Batchnorm { .. } => "bn",
        LayerConfig::FullyConnected { .. } => "fc",
        LayerConfig::Relu => "relu",
        LayerConfig::ShiftedLeakyRelu { .. } => "slrelu",
        LayerConfig::Scale { .. } => "scale",
        LayerConfig::Flatten => "flatten",
    }
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds layers named `{prefix}.{kind}{n}` (e.g. `joint.conv3`), with `n`
    /// counting from 1 per kind.
    pub fn from_configs<R: Rng + ?Sized>(prefix: &str, configs: &[LayerConfig], rng: &mut R) -> Result<Self> {
        let mut seq = Self::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for cfg in configs {
            let kind = short_kind(cfg);
            let n = counts.entry(kind).or_insert(0);
            *n += 1;
            let name = format!("{prefix}.{kind}{n}");
            let layer = cfg.build(&name, rng)?;
            seq.push(name, layer);
        }
        Ok(seq)
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer) {
        self.names.push(name.into());
        self.layers.push(layer);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn configs(&self) -> Vec<LayerConfig> {
        self.layers.iter().map(Layer::config).collect()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_range(x, 0..self.layers.len(), mode)
    }

    pub fn forward_range(&mut self, x: &Tensor, range: Range<usize>, mode: Mode) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &mut self.layers[range] {
            cur = layer.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        self.backward_range(grad, 0..self.layers.len())
    }

    /// Backpropagates through `range` in reverse; returns the gradient with
    /// respect to the input of `range.start`.
    pub fn backward_range(&mut self, grad: &Tensor, range: Range<usize>) -> Result<Tensor> {
        let mut cur = grad.clone();
        for layer in self.layers[range].iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    /// Full backward pass for parameter gradients only; the first layer does
    /// not form a gradient with respect to the network input.
    pub fn backward_params(&mut self, grad: &Tensor) -> Result<()> {
        let n = self.layers.len();
        if n == 0 {
            return Ok(());
        }
        let g = self.backward_range(grad, 1..n)?;
        self.layers[0].backward_params(&g)
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// `(qualified name, tensor)` for every running statistic.
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        self.names
            .iter()
            .zip(&self.layers)
            .flat_map(|(n, l)| l.buffers().into_iter().map(move |(b, t)| (format!("{n}.{b}"), t)))
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.names
            .iter()
            .zip(self.layers.iter_mut())
            .flat_map(|(n, l)| l.buffers_mut().into_iter().map(move |(b, t)| (format!("{n}.{b}"), t)))
            .collect()
    }
}
