//! Mini-batch gradient descent with momentum.
//!
//! Per-sample gradients are computed in parallel and summed in index order,
//! so results do not depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_cross_entropy;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::rng;
use crate::tensor::{Image, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds both the initial weights and the shuffling stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, momentum: 0.9, epochs: 30, batch_size: 32, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!("training needs lr > 0, momentum in [0, 1) and batch size > 0, got {self:?}")));
        }
        Ok(())
    }
}

/// A trained model with its mean loss per epoch.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub epoch_losses: Vec<f64>,
}

/// Loss and parameter gradients of one training sample.
pub type SampleGrad = (f64, Vec<Vec<Tensor>>);

/// Runs `cfg.epochs` epochs over `n` samples starting from `model`.
///
/// `sample_grad(model, i)` returns the loss of sample `i` and its parameter
/// gradients. Each step applies the batch-mean gradient with
/// `v ← μ·v + g; θ ← θ − lr·v`.
pub fn train<F>(mut model: Model, n: usize, cfg: &TrainConfig, sample_grad: F) -> Result<Trained>
where
    F: Fn(&Model, usize) -> Result<SampleGrad> + Sync,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    let mut velocity = model.zero_param_grads();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng::permutation(&mut rng::stream_path(cfg.seed, &[0x5F1, epoch as u64]), n);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<SampleGrad> = batch.par_iter().map(|&i| sample_grad(&model, i)).collect::<Result<_>>()?;
            let mut sum = model.zero_param_grads();
            for (loss, grads) in &results {
                total += loss;
                for (acc, g) in sum.iter_mut().flatten().zip(grads.iter().flatten()) {
                    acc.add_scaled(g, 1.0)?;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((p, v), g) in model.params_mut().iter_mut().flatten().zip(velocity.iter_mut().flatten()).zip(sum.iter().flatten()) {
                v.scale(cfg.momentum);
                v.add_scaled(g, scale)?;
                p.add_scaled(v, -cfg.learning_rate)?;
            }
        }
        epoch_losses.push(total / n as f64);
    }
    Ok(Trained { model, epoch_losses })
}

/// Trains a classifier `spec` (which must carry a head) on `(image, label)`
/// samples with softmax cross-entropy.
pub fn train_classifier(spec: &ModelSpec, samples: &[(Image, usize)], cfg: &TrainConfig) -> Result<Trained> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no training images".into()));
    }
    let classes = spec.head.ok_or_else(|| Error::InvalidSpec("classifier training needs a head layer".into()))?;
    let mut seen = vec![false; classes];
    for (_, label) in samples {
        if *label >= classes {
            return Err(Error::LabelOutOfRange { label: *label, classes });
        }
        seen[*label] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidConfig(format!(
            "head has {classes} classes but only {} appear in the data",
            seen.iter().filter(|s| **s).count()
        )));
    }
    let model = Model::build(spec.clone(), cfg.seed)?;
    train(model, samples.len(), cfg, |m, i| {
        let (image, label) = &samples[i];
        let acts = m.forward_collect(image)?;
        let (loss, g) = softmax_cross_entropy(acts.output(), *label)?;
        Ok((loss, m.backward(&acts, &g)?.params))
    })
}

/// Trains a recognizer on images labelled with identity indices.
pub fn train_recognizer(spec: &ModelSpec, samples: &[(Image, usize)], cfg: &TrainConfig) -> Result<Trained> {
    if spec.head.is_some_and(|h| h < 2) {
        return Err(Error::InvalidConfig("a recognizer needs at least two identities".into()));
    }
    train_classifier(spec, samples, cfg)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn classification_accuracy(model: &Model, samples: &[(Image, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples to score".into()));
    }
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|(x, label)| {
            let out = model.forward(x)?;
            Ok(argmax(out.data()) == *label)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / samples.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}
