//! Layer stacks: construction, forward/backward passes, embeddings and
//! shallow/server splitting.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{layer_backward, layer_forward, LayerSpec};
use crate::rng;
use crate::tensor::{Image, Tensor};

/// Architecture of a model: an ordered layer stack plus its input shape.
///
/// When `head` is set the final layer is a `Linear(embedding_dim -> head)`
/// classifier that embeddings skip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub embedding_dim: usize,
    pub head: Option<usize>,
}

impl ModelSpec {
    /// Headless spec; the embedding dimension is the flattened output size.
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>) -> Result<Self> {
        let mut spec = Self { layers, input_shape, embedding_dim: 0, head: None };
        spec.embedding_dim = match spec.shapes()?.last() {
            Some(s) => s.iter().product(),
            None => spec.input_shape.iter().product(),
        };
        Ok(spec)
    }

    /// Default toy recognizer: three Conv+ReLU+AvgPool blocks, a dense
    /// embedding layer with L2 normalization, and an optional identity head.
    pub fn recognizer(widths: [usize; 3], embedding_dim: usize, head: Option<usize>) -> Self {
        let [a, b, c] = widths;
        let mut layers = vec![
            LayerSpec::conv(3, a, 3),
            LayerSpec::Relu,
            LayerSpec::AvgPool2d { kernel: 2 },
            LayerSpec::conv(a, b, 3),
            LayerSpec::Relu,
            LayerSpec::AvgPool2d { kernel: 2 },
            LayerSpec::conv(b, c, 3),
            LayerSpec::Relu,
            LayerSpec::AvgPool2d { kernel: 2 },
            LayerSpec::Flatten,
            LayerSpec::linear(c * 16, embedding_dim),
            LayerSpec::L2Normalize,
        ];
        if let Some(n) = head {
            layers.push(LayerSpec::linear(embedding_dim, n));
        }
        Self { layers, input_shape: vec![3, 32, 32], embedding_dim, head }
    }

    /// The default recognizer architecture (widths 16/32/64, embedding 64).
    pub fn toy_recognizer(head: Option<usize>) -> Self {
        Self::recognizer([16, 32, 64], 64, head)
    }

    /// The architecturally different model used as an unauthorized party.
    pub fn toy_alternate(head: Option<usize>) -> Self {
        Self::recognizer([8, 24, 48], 32, head)
    }

    /// Output shape of every layer, in order.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| e.at_layer(i))?;
            shape = layer.output_shape(&shape).map_err(|e| e.at_layer(i))?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Number of layers on the embedding path.
    pub fn embedding_layers(&self) -> usize {
        self.layers.len() - usize::from(self.head.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!("bad input shape {:?}", self.input_shape)));
        }
        let shapes = self.shapes()?;
        if let Some(n) = self.head {
            match self.layers.last() {
                Some(LayerSpec::Linear { in_dim, out_dim, .. }) if *in_dim == self.embedding_dim && *out_dim == n => {}
                _ => return Err(Error::InvalidSpec(format!("head of size {n} must be a final Linear({} -> {n})", self.embedding_dim))),
            }
        }
        let emb_len = match self.embedding_layers() {
            0 => self.input_shape.iter().product(),
            k => shapes[k - 1].iter().product::<usize>(),
        };
        if emb_len != self.embedding_dim {
            return Err(Error::InvalidSpec(format!("embedding path yields {emb_len} values, spec declares {}", self.embedding_dim)));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Name of parameter `j` of layer `i` in weight files.
    pub fn param_name(layer: usize, j: usize) -> String {
        format!("layer{layer}.{}", if j == 0 { "weight" } else { "bias" })
    }
}

/// Per-layer outputs of a forward pass; entry 0 is the input.
#[derive(Clone, Debug)]
pub struct Activations(pub Vec<Tensor>);

impl Activations {
    pub fn input(&self) -> &Tensor {
        &self.0[0]
    }

    pub fn output(&self) -> &Tensor {
        self.0.last().expect("activations always hold the input")
    }

    /// Output of layer `layer`.
    pub fn after(&self, layer: usize) -> &Tensor {
        &self.0[layer + 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Result of a reverse pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub input: Tensor,
    /// One list per layer, matching the model's parameter layout.
    pub params: Vec<Vec<Tensor>>,
}

/// A parameterized layer stack. Equality compares architecture and
/// parameters, not the provenance seed.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Vec<Tensor>>,
    seed: u64,
}

impl Model {
    /// Deterministic initialization: weights uniform in `±sqrt(6 / fan_in)`
    /// from a stream keyed by `(seed, layer index)`, biases zero.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let mut stream = rng::stream(seed, i as u64);
                let bound = layer.fan_in().map_or(0.0, |f| (6.0 / f as f64).sqrt());
                layer
                    .param_shapes()
                    .into_iter()
                    .enumerate()
                    .map(|(j, shape)| {
                        if j == 0 {
                            let n = shape.iter().product();
                            let data = (0..n).map(|_| rng::uniform(&mut stream, -bound, bound)).collect();
                            Tensor::new(shape, data).expect("shape from spec")
                        } else {
                            Tensor::zeros(&shape)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { spec, params, seed })
    }

    /// Assembles a model from explicit parameters, checking their shapes.
    pub fn from_parts(spec: ModelSpec, params: Vec<Vec<Tensor>>, seed: u64) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.layers.len() {
            return Err(Error::Params(format!("{} parameter groups for {} layers", params.len(), spec.layers.len())));
        }
        for (i, (layer, p)) in spec.layers.iter().zip(&params).enumerate() {
            let shapes = layer.param_shapes();
            if shapes.len() != p.len() || shapes.iter().zip(p).any(|(s, t)| s.as_slice() != t.shape()) {
                return Err(Error::Params(format!("layer {i}: parameter shapes do not match {shapes:?}")));
            }
        }
        Ok(Self { spec, params, seed })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Vec<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_layers(&self) -> usize {
        self.spec.layers.len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.spec.layers
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.spec.input_shape.as_slice() {
            return Err(Error::ShapeMismatch { expected: self.spec.input_shape.clone(), actual: input.shape().to_vec() });
        }
        Ok(())
    }

    /// Fused forward pass through every layer.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_range(0..self.num_layers(), input)
    }

    fn forward_range(&self, range: Range<usize>, input: &Tensor) -> Result<Tensor> {
        if range.start == 0 {
            self.check_input(input)?;
        }
        let mut x = input.clone();
        for i in range {
            x = layer_forward(&self.spec.layers[i], &self.params[i], &x).map_err(|e| e.at_layer(i))?;
        }
        Ok(x)
    }

    /// Forward pass keeping every intermediate output.
    pub fn forward_collect(&self, input: &Tensor) -> Result<Activations> {
        self.forward_collect_to(input, self.num_layers())
    }

    /// Forward pass through the first `depth` layers.
    pub fn forward_collect_to(&self, input: &Tensor, depth: usize) -> Result<Activations> {
        self.check_input(input)?;
        let mut acts = Vec::with_capacity(depth + 1);
        acts.push(input.clone());
        for i in 0..depth.min(self.num_layers()) {
            let y = layer_forward(&self.spec.layers[i], &self.params[i], &acts[i]).map_err(|e| e.at_layer(i))?;
            acts.push(y);
        }
        Ok(Activations(acts))
    }

    /// Reverse pass of a scalar loss whose gradient w.r.t. the final
    /// activation is `output_grad`.
    pub fn backward(&self, acts: &Activations, output_grad: &Tensor) -> Result<Gradients> {
        self.check_acts(acts, self.num_layers())?;
        self.backward_taps(acts, &[(self.num_layers() - 1, output_grad.clone())], true).map(|(input, params)| Gradients { input, params })
    }

    /// Input gradient only; skips parameter gradients.
    pub fn backward_input(&self, acts: &Activations, output_grad: &Tensor) -> Result<Tensor> {
        self.check_acts(acts, self.num_layers())?;
        Ok(self.backward_taps(acts, &[(self.num_layers() - 1, output_grad.clone())], false)?.0)
    }

    fn check_acts(&self, acts: &Activations, depth: usize) -> Result<()> {
        if acts.len() != depth + 1 {
            return Err(Error::InvalidShape(format!("activations hold {} entries, model needs {}", acts.len(), depth + 1)));
        }
        Ok(())
    }

    /// Reverse pass with gradients injected at the outputs of several layers.
    ///
    /// `taps` pairs a layer index with the gradient of the loss w.r.t. that
    /// layer's output. Only layers up to the deepest tap are visited, so
    /// `acts` may come from [`Model::forward_collect_to`].
    pub fn backward_taps(&self, acts: &Activations, taps: &[(usize, Tensor)], want_params: bool) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
        let Some(deepest) = taps.iter().map(|(l, _)| *l).max() else {
            return Ok((Tensor::zeros(acts.input().shape()), self.zero_param_grads()));
        };
        if acts.len() < deepest + 2 {
            return Err(Error::InvalidShape(format!("tap at layer {deepest} needs {} activations, got {}", deepest + 2, acts.len())));
        }
        let mut param_grads = if want_params { self.zero_param_grads() } else { Vec::new() };
        let mut grad: Option<Tensor> = None;
        for i in (0..=deepest).rev() {
            for (l, g) in taps.iter().filter(|(l, _)| *l == i) {
                acts.after(*l).same_shape(g).map_err(|e| e.at_layer(i))?;
                match grad.as_mut() {
                    Some(acc) => acc.add_scaled(g, 1.0)?,
                    None => grad = Some(g.clone()),
                }
            }
            let Some(g) = grad.take() else { continue };
            let (dx, dp) = layer_backward(&self.spec.layers[i], &self.params[i], &acts.0[i], &acts.0[i + 1], &g, want_params)
                .map_err(|e| e.at_layer(i))?;
            if want_params {
                param_grads[i] = dp;
            }
            grad = Some(dx);
        }
        let input = grad.unwrap_or_else(|| Tensor::zeros(acts.input().shape()));
        Ok((input, param_grads))
    }

    pub fn zero_param_grads(&self) -> Vec<Vec<Tensor>> {
        self.params.iter().map(|p| p.iter().map(|t| Tensor::zeros(t.shape())).collect()).collect()
    }

    /// Unit-norm feature vector: forward through every layer except the head.
    pub fn embed(&self, image: &Image) -> Result<Tensor> {
        self.forward_range(0..self.spec.embedding_layers(), image)
    }

    /// Sub-model over `range`, taking the range's input shape as its input.
    pub fn slice(&self, range: Range<usize>) -> Result<Model> {
        if range.start >= range.end || range.end > self.num_layers() {
            return Err(Error::InvalidConfig(format!("layer range {range:?} invalid for {} layers", self.num_layers())));
        }
        let input_shape = if range.start == 0 { self.spec.input_shape.clone() } else { self.spec.shapes()?[range.start - 1].clone() };
        let include_head = self.spec.head.is_some() && range.end == self.num_layers();
        let mut spec = ModelSpec::new(self.spec.layers[range.clone()].to_vec(), input_shape)?;
        if include_head {
            spec.head = self.spec.head;
            spec.embedding_dim = self.spec.embedding_dim;
            if spec.embedding_layers() == 0 {
                spec.embedding_dim = spec.input_shape.iter().product();
            }
        }
        Model::from_parts(spec, self.params[range].to_vec(), self.seed)
    }

    /// Splits after `s` layers into a shallow client model and a server model.
    pub fn split(&self, s: usize) -> Result<SplitModel> {
        if s == 0 || s >= self.num_layers() {
            return Err(Error::InvalidConfig(format!("split index {s} must lie in 1..{}", self.num_layers())));
        }
        Ok(SplitModel { shallow: self.slice(0..s)?, server: self.slice(s..self.num_layers())?, split: s })
    }
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

/// Layer count of the default shallow model (end of the second block).
pub const DEFAULT_SPLIT: usize = 6;

/// A model partitioned into a client-side shallow part and a server part.
#[derive(Clone, Debug)]
pub struct SplitModel {
    pub shallow: Model,
    pub server: Model,
    pub split: usize,
}

impl SplitModel {
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.server.forward(&self.shallow.forward(input)?)
    }
}
