//! Adversaries: optimization-based feature inversion through a known
//! shallow model, a trained decoder from features to images, and a trained
//! probe for the private binary attribute.

use serde::{Deserialize, Serialize};

pub use crate::autodiff::total_variation;
use crate::autodiff::{l2_distance, softmax, softmax_cross_entropy, total_variation_grad};
use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::model::{Model, ModelSpec};
use crate::rng;
use crate::tensor::{Image, Tensor};
use crate::train::{self, TrainConfig, Trained};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub iterations: usize,
    pub step: f64,
    pub tv_weight: f64,
    pub tv_beta: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { iterations: 500, step: 1.0 / 255.0, tv_weight: 1e-3, tv_beta: 2.0, seed: 0 }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.step > 0.0) || !(self.tv_weight >= 0.0) || !(self.tv_beta > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid attack configuration {self:?}")));
        }
        Ok(())
    }
}

/// Objective `‖shallow(x̂) − z‖₂ + λ·TV_β(x̂)` and its gradient.
pub fn inversion_objective(shallow: &Model, z: &Tensor, x: &Image, cfg: &AttackConfig) -> Result<(f64, Tensor)> {
    let acts = shallow.forward_collect(x)?;
    let (mut loss, g) = l2_distance(acts.output(), z)?;
    let mut grad = shallow.backward_input(&acts, &g)?;
    if cfg.tv_weight > 0.0 {
        let (tv, tg) = total_variation_grad(x, cfg.tv_beta)?;
        loss += cfg.tv_weight * tv;
        grad.add_scaled(&tg, cfg.tv_weight)?;
    }
    Ok((loss, grad))
}

/// White-box inversion by signed-gradient descent from a uniform random
/// start: `x̂ ← clamp(x̂ − α·sign(∇))`.
pub fn whitebox_reconstruct(z: &Tensor, shallow: &Model, cfg: &AttackConfig) -> Result<Image> {
    cfg.validate()?;
    let out_shape = shallow.spec().shapes()?.last().cloned().unwrap_or_else(|| shallow.spec().input_shape.clone());
    if z.shape() != out_shape.as_slice() {
        return Err(Error::ShapeMismatch { expected: out_shape, actual: z.shape().to_vec() });
    }
    let shape = shallow.spec().input_shape.clone();
    let mut s = rng::stream(cfg.seed, 0x1A7);
    let n = shape.iter().product();
    let mut x = Tensor::new(shape, (0..n).map(|_| rng::uniform(&mut s, 0.0, 1.0)).collect())?;
    for _ in 0..cfg.iterations {
        let (_, g) = inversion_objective(shallow, z, &x, cfg)?;
        let sign = g.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        x.add_scaled(&sign, -cfg.step)?;
        x = x.clamp01();
    }
    Ok(x)
}

/// Decoder from shallow features `[c, h, w]` back to a `3 × 4h × 4w` image:
/// two conv+ReLU+upsample stages and a sigmoid output.
pub fn default_decoder_spec(feature_shape: &[usize]) -> Result<ModelSpec> {
    let &[c, h, w] = feature_shape else {
        return Err(Error::InvalidShape(format!("decoder input must be [C, H, W], got {feature_shape:?}")));
    };
    ModelSpec::new(
        vec![
            LayerSpec::conv(c, 32, 3),
            LayerSpec::Relu,
            LayerSpec::UpsampleNearest2x,
            LayerSpec::conv(32, 16, 3),
            LayerSpec::Relu,
            LayerSpec::UpsampleNearest2x,
            LayerSpec::conv(16, 3, 3),
            LayerSpec::Sigmoid,
        ],
        vec![c, h, w],
    )
}

/// Decoder training defaults; the per-pixel mean loss has small gradients,
/// hence the larger rate.
pub fn default_decoder_training() -> TrainConfig {
    TrainConfig { learning_rate: 0.5, epochs: 40, batch_size: 16, ..TrainConfig::default() }
}

/// Fits a decoder to `(feature, image)` pairs by minimizing the per-pixel
/// mean squared reconstruction error.
pub fn train_decoder(pairs: &[(Tensor, Image)], spec: &ModelSpec, cfg: &TrainConfig) -> Result<Trained> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no feature/image pairs".into()));
    }
    let out_shape = spec.shapes()?.last().cloned().unwrap_or_default();
    for (z, x) in pairs {
        if z.shape() != spec.input_shape.as_slice() {
            return Err(Error::ShapeMismatch { expected: spec.input_shape.clone(), actual: z.shape().to_vec() });
        }
        if x.shape() != out_shape.as_slice() {
            return Err(Error::ShapeMismatch { expected: out_shape.clone(), actual: x.shape().to_vec() });
        }
    }
    let model = Model::build(spec.clone(), cfg.seed)?;
    train::train(model, pairs.len(), cfg, |m, i| {
        let (z, x) = &pairs[i];
        let acts = m.forward_collect(z)?;
        let n = x.len() as f64;
        let diff = acts.output().zip_map(x, |a, b| a - b)?;
        let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        Ok((loss, m.backward(&acts, &diff.map(|d| 2.0 * d / n))?.params))
    })
}

/// Black-box reconstruction: one decoder pass.
pub fn modelbased_reconstruct(decoder: &Model, z: &Tensor) -> Result<Image> {
    decoder.forward(z)
}

/// Classifier for the private binary attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeProbe {
    pub model: Model,
}

impl AttributeProbe {
    /// Class probabilities `[P(tag = 0), P(tag = 1)]`.
    pub fn estimate(&self, image: &Image) -> Result<Tensor> {
        Ok(Tensor::vector(softmax(self.model.forward(image)?.data())))
    }

    pub fn predict(&self, image: &Image) -> Result<bool> {
        let p = self.estimate(image)?;
        Ok(p.data()[1] > p.data()[0])
    }

    /// Fraction of `(image, tag)` samples predicted correctly.
    pub fn accuracy(&self, samples: &[(Image, bool)]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset("no attribute samples".into()));
        }
        let mut hits = 0;
        for (x, tag) in samples {
            if self.predict(x)? == *tag {
                hits += 1;
            }
        }
        Ok(hits as f64 / samples.len() as f64)
    }
}

pub fn attribute_estimate(probe: &AttributeProbe, image: &Image) -> Result<Tensor> {
    probe.estimate(image)
}

/// Trains a toy-recognizer-shaped probe with a two-class head.
pub fn train_attribute_probe(samples: &[(Image, bool)], cfg: &TrainConfig) -> Result<AttributeProbe> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no attribute samples".into()));
    }
    let positives = samples.iter().filter(|(_, t)| *t).count();
    if positives == 0 || positives == samples.len() {
        return Err(Error::InvalidConfig("attribute probe needs both tag classes".into()));
    }
    let spec = ModelSpec::toy_recognizer(Some(2));
    let model = Model::build(spec, cfg.seed)?;
    let trained = train::train(model, samples.len(), cfg, |m, i| {
        let (x, tag) = &samples[i];
        let acts = m.forward_collect(x)?;
        let (loss, g) = softmax_cross_entropy(acts.output(), *tag as usize)?;
        Ok((loss, m.backward(&acts, &g)?.params))
    })?;
    Ok(AttributeProbe { model: trained.model })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut s = rng::stream(seed, 2);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(&mut s, 0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn decoder_shape_contract() {
        let spec = default_decoder_spec(&[32, 8, 8]).unwrap();
        assert_eq!(spec.shapes().unwrap().last().unwrap(), &vec![3, 32, 32]);
        let d = Model::build(spec, 0).unwrap();
        let out = modelbased_reconstruct(&d, &rand(&[32, 8, 8], 1)).unwrap();
        assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(modelbased_reconstruct(&d, &rand(&[16, 8, 8], 1)).is_err());
    }

    #[test]
    fn whitebox_is_deterministic_and_valid() {
        let spec =
            ModelSpec::new(vec![LayerSpec::conv(3, 4, 3), LayerSpec::Relu, LayerSpec::AvgPool2d { kernel: 2 }], vec![3, 8, 8]).unwrap();
        let m = Model::build(spec, 1).unwrap();
        let x = rand(&[3, 8, 8], 3);
        let z = m.forward(&x).unwrap();
        let cfg = AttackConfig { iterations: 50, ..AttackConfig::default() };
        let a = whitebox_reconstruct(&z, &m, &cfg).unwrap();
        let b = whitebox_reconstruct(&z, &m, &cfg).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(whitebox_reconstruct(&Tensor::zeros(&[4, 3, 3]), &m, &cfg).is_err());
        let start = inversion_objective(&m, &z, &rand(&[3, 8, 8], 0), &cfg).unwrap().0;
        assert!(inversion_objective(&m, &z, &a, &cfg).unwrap().0 < start);
    }

    #[test]
    fn decoder_rejects_bad_pairs() {
        let spec = default_decoder_spec(&[4, 2, 2]).unwrap();
        let cfg = default_decoder_training();
        assert!(matches!(train_decoder(&[], &spec, &cfg), Err(Error::EmptyDataset(_))));
        let bad = vec![(rand(&[4, 2, 2], 1), rand(&[3, 4, 4], 2))];
        assert!(train_decoder(&bad, &spec, &cfg).is_err());
    }

    #[test]
    fn probe_requires_both_classes() {
        let one = vec![(rand(&[3, 32, 32], 1), true)];
        assert!(train_attribute_probe(&one, &TrainConfig::default()).is_err());
    }

    #[test]
    fn probe_outputs_probabilities() {
        let probe = AttributeProbe { model: Model::build(ModelSpec::toy_recognizer(Some(2)), 4).unwrap() };
        let p = attribute_estimate(&probe, &rand(&[3, 32, 32], 5)).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-9);
        assert!(p.data().iter().all(|v| *v >= 0.0));
    }
}
