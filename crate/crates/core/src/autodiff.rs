//! Scalar objectives with exact gradients, and the central-difference
//! gradient checker used to verify them.

use crate::error::{Error, Result};
use crate::model::{Gradients, Model};
use crate::tensor::Tensor;

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    if logits.rank() != 1 {
        return Err(Error::InvalidShape(format!("logits must be rank 1, got {:?}", logits.shape())));
    }
    let n = logits.len();
    if label >= n {
        return Err(Error::LabelOutOfRange { label, classes: n });
    }
    let l = logits.data();
    let top = (0..n).fold(0, |best, i| if l[i] > l[best] { i } else { best });
    let rest: f64 = (0..n).filter(|&i| i != top).map(|i| (l[i] - l[top]).exp()).sum();
    // (max - l[label]) + ln Σ exp(l - max), with the argmax term split out
    let loss = (l[top] - l[label]) + rest.ln_1p();
    let probs = softmax(l);
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, Tensor::vector(grad)))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `Σ (a - b)²` and its gradient w.r.t. `a`.
pub fn squared_distance(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    let diff = a.zip_map(b, |x, y| x - y)?;
    let loss = diff.data().iter().map(|d| d * d).sum();
    Ok((loss, diff.map(|d| 2.0 * d)))
}

/// `‖a - b‖₂` and its gradient w.r.t. `a` (zero at `a == b`).
pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<(f64, Tensor)> {
    let diff = a.zip_map(b, |x, y| x - y)?;
    let norm = diff.l2_norm();
    if norm == 0.0 {
        return Ok((0.0, Tensor::zeros(a.shape())));
    }
    Ok((norm, diff.map(|d| d / norm)))
}

/// Total variation `Σ ((x[i,j-1]-x[i,j])² + (x[i+1,j]-x[i,j])²)^(β/2)`,
/// summed over channels; neighbours outside the image are skipped.
pub fn total_variation(image: &Tensor, beta: f64) -> Result<f64> {
    Ok(tv_impl(image, beta, false)?.0)
}

/// Total variation and its gradient. Where both differences vanish the
/// subgradient is taken as zero.
pub fn total_variation_grad(image: &Tensor, beta: f64) -> Result<(f64, Tensor)> {
    let (v, g) = tv_impl(image, beta, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn tv_impl(image: &Tensor, beta: f64, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    if beta <= 0.0 {
        return Err(Error::InvalidConfig(format!("TV exponent must be positive, got {beta}")));
    }
    let (c, h, w) = image.chw()?;
    let x = image.data();
    let mut grad = want_grad.then(|| vec![0.0; x.len()]);
    let mut total = 0.0;
    let half = beta / 2.0;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let at = (ch * h + i) * w + j;
                let dx = if j > 0 { x[at - 1] - x[at] } else { 0.0 };
                let dy = if i + 1 < h { x[at + w] - x[at] } else { 0.0 };
                let s = dx * dx + dy * dy;
                if s == 0.0 {
                    continue;
                }
                total += if beta == 2.0 { s } else { s.powf(half) };
                if let Some(g) = grad.as_mut() {
                    let ds = if beta == 2.0 { 1.0 } else { half * s.powf(half - 1.0) };
                    if j > 0 {
                        g[at - 1] += ds * 2.0 * dx;
                    }
                    if i + 1 < h {
                        g[at + w] += ds * 2.0 * dy;
                    }
                    g[at] -= ds * 2.0 * (dx + dy);
                }
            }
        }
    }
    let grad = grad.map(|g| Tensor::new(image.shape().to_vec(), g).expect("same shape"));
    Ok((total, grad))
}

/// Objective applied to a model's final output.
#[derive(Clone, Debug)]
pub enum OutputLoss {
    /// `Σ (out - target)²`
    SquaredDistance(Tensor),
    /// `‖out - target‖₂`
    Distance(Tensor),
    CrossEntropy(usize),
}

/// A scalar loss: an output objective plus an optional weighted TV prior
/// on the model input.
#[derive(Clone, Debug)]
pub struct LossSpec {
    pub output: OutputLoss,
    pub input_tv: Option<(f64, f64)>,
}

impl LossSpec {
    pub fn new(output: OutputLoss) -> Self {
        Self { output, input_tv: None }
    }

    /// Adds `weight · TV_β(input)`.
    pub fn with_tv(mut self, weight: f64, beta: f64) -> Self {
        self.input_tv = Some((weight, beta));
        self
    }

    pub fn value(&self, model: &Model, input: &Tensor) -> Result<f64> {
        let out = model.forward(input)?;
        let mut v = self.output_value(&out)?.0;
        if let Some((weight, beta)) = self.input_tv {
            v += weight * total_variation(input, beta)?;
        }
        Ok(v)
    }

    fn output_value(&self, out: &Tensor) -> Result<(f64, Tensor)> {
        match &self.output {
            OutputLoss::SquaredDistance(t) => squared_distance(out, t),
            OutputLoss::Distance(t) => l2_distance(out, t),
            OutputLoss::CrossEntropy(label) => softmax_cross_entropy(out, *label),
        }
    }

    /// Loss value with input and parameter gradients.
    pub fn value_and_grad(&self, model: &Model, input: &Tensor) -> Result<(f64, Gradients)> {
        let acts = model.forward_collect(input)?;
        let (mut v, g) = self.output_value(acts.output())?;
        let mut grads = model.backward(&acts, &g)?;
        if let Some((weight, beta)) = self.input_tv {
            let (tv, tg) = total_variation_grad(input, beta)?;
            v += weight * tv;
            grads.input.add_scaled(&tg, weight)?;
        }
        Ok((v, grads))
    }
}

/// Relative error `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Largest relative error between analytic gradients and central
/// differences with step `h`, over every input and parameter coordinate.
pub fn grad_check(model: &Model, input: &Tensor, loss: &LossSpec, h: f64) -> Result<f64> {
    let (_, grads) = loss.value_and_grad(model, input)?;
    let mut worst: f64 = 0.0;

    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let fp = loss.value(model, &x)?;
        x.data_mut()[i] = orig - h;
        let fm = loss.value(model, &x)?;
        x.data_mut()[i] = orig;
        worst = worst.max(relative_error(grads.input.data()[i], (fp - fm) / (2.0 * h)));
    }

    let mut probe = model.clone();
    for layer in 0..model.num_layers() {
        for j in 0..model.params()[layer].len() {
            for k in 0..model.params()[layer][j].len() {
                let orig = model.params()[layer][j].data()[k];
                probe.params_mut()[layer][j].data_mut()[k] = orig + h;
                let fp = loss.value(&probe, input)?;
                probe.params_mut()[layer][j].data_mut()[k] = orig - h;
                let fm = loss.value(&probe, input)?;
                probe.params_mut()[layer][j].data_mut()[k] = orig;
                worst = worst.max(relative_error(grads.params[layer][j].data()[k], (fp - fm) / (2.0 * h)));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_two_zero_logits() {
        let (loss, g) = softmax_cross_entropy(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_confident() {
        let (loss, _) = softmax_cross_entropy(&Tensor::vector(vec![10.0, -10.0]), 0).unwrap();
        // ln(1 + e^-20)
        let expected = (-20.0f64).exp().ln_1p();
        assert!((loss - expected).abs() < 1e-20);
        assert!((loss - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        for k in 1..6 {
            for label in 0..k {
                let (loss, _) = softmax_cross_entropy(&Tensor::full(&[k], 0.3), label).unwrap();
                assert!((loss - (k as f64).ln()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(matches!(softmax_cross_entropy(&Tensor::vector(vec![1.0, 2.0]), 2), Err(Error::LabelOutOfRange { label: 2, classes: 2 })));
    }

    #[test]
    fn squared_distance_gradient() {
        let z = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let zt = Tensor::vector(vec![0.0, 1.0, 0.5]);
        let (v, g) = squared_distance(&zt, &z).unwrap();
        assert_eq!(v, 1.0 + 9.0);
        assert_eq!(g.data(), &[-2.0, 6.0, 0.0]);
    }

    #[test]
    fn tv_examples() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(total_variation(&img, 2.0).unwrap(), 2.0);
        assert_eq!(total_variation(&Tensor::full(&[3, 4, 4], 0.7), 1.0).unwrap(), 0.0);
        let shifted = img.map(|v| v + 0.25);
        assert_eq!(total_variation(&shifted, 2.0).unwrap(), 2.0);
    }

    #[test]
    fn tv_gradient_matches_differences() {
        let mut s = crate::rng::stream(3, 3);
        let img = Tensor::new(vec![2, 5, 4], (0..40).map(|_| crate::rng::uniform(&mut s, 0.0, 1.0)).collect()).unwrap();
        for beta in [1.0, 2.0, 3.0] {
            let (_, g) = total_variation_grad(&img, beta).unwrap();
            let h = 1e-6;
            for i in 0..img.len() {
                let mut p = img.clone();
                p.data_mut()[i] += h;
                let mut m = img.clone();
                m.data_mut()[i] -= h;
                let fd = (total_variation(&p, beta).unwrap() - total_variation(&m, beta).unwrap()) / (2.0 * h);
                assert!(relative_error(g.data()[i], fd) < 1e-6, "beta {beta} coord {i}");
            }
        }
    }
}
