//! The obfuscation optimizer.
//!
//! Starting from an image that looks nothing like the original, each
//! iteration pulls the obfuscated image's shallow-model features towards the
//! original's: both images go through one shared augmentation draw, features
//! from several layers are pooled and compared, and the resulting gradient is
//! L1-normalized and smoothed with a small kernel before the step. Several
//! authorized shallow models can be served at once by summing their smoothed
//! directions.

use serde::{Deserialize, Serialize};

use crate::data::{AugmentDraw, AugmentMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;
use crate::tensor::{Image, Tensor};

/// Gradient-smoothing kernel with half-width `k`; the realized matrix is
/// `(2k+1)×(2k+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    None,
    Linear { k: usize },
    Gaussian { k: usize },
}

impl KernelSpec {
    pub fn label(&self) -> String {
        match self {
            KernelSpec::None => "none".into(),
            KernelSpec::Linear { k } => format!("linear{k}"),
            KernelSpec::Gaussian { k } => format!("gaussian{k}"),
        }
    }
}

/// Normalized kernel matrix, indexed `[i + k, j + k]` for `i, j ∈ [-k, k]`.
///
/// Linear: `(1 - |i|/(k+1)) (1 - |j|/(k+1))`. Gaussian: `exp(-(i² + j²) / 2σ²)`
/// with `σ = k/√3`, so the radius `k` spans 3σ.
pub fn make_kernel(spec: KernelSpec) -> Result<Tensor> {
    let (k, f): (usize, Box<dyn Fn(f64, f64) -> f64>) = match spec {
        KernelSpec::None => return Ok(Tensor::full(&[1, 1], 1.0)),
        KernelSpec::Linear { k } => {
            let d = k as f64 + 1.0;
            (k, Box::new(move |i, j| (1.0 - i.abs() / d) * (1.0 - j.abs() / d)))
        }
        KernelSpec::Gaussian { k } => {
            let sigma = k as f64 / 3f64.sqrt();
            (k, Box::new(move |i, j| (-(i * i + j * j) / (2.0 * sigma * sigma)).exp()))
        }
    };
    if k < 1 {
        return Err(Error::InvalidConfig(format!("kernel half-width must be at least 1, got {k}")));
    }
    let n = 2 * k + 1;
    let mut data = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            data.push(f(a as f64 - k as f64, b as f64 - k as f64));
        }
    }
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Tensor::new(vec![n, n], data)
}

/// Per-channel "same" convolution with zero fill outside the image.
pub fn smooth(g: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (c, h, w) = g.chw()?;
    let n = kernel.shape()[0];
    if n == 1 {
        return Ok(g.map(|v| v * kernel.data()[0]));
    }
    let k = (n / 2) as isize;
    let mut out = Tensor::zeros(g.shape());
    let (src, kd) = (g.data(), kernel.data());
    let dst = out.data_mut();
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for a in -k..=k {
                    let y = i + a;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for b in -k..=k {
                        let x = j + b;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        acc += kd[((a + k) as usize) * n + (b + k) as usize] * src[base + y as usize * w + x as usize];
                    }
                }
                dst[base + i as usize * w + j as usize] = acc;
            }
        }
    }
    Ok(out)
}

/// Starting point of the optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// I.i.d. Gaussian(0.5, 0.25²), clamped; ignores the original.
    GaussianNoise,
    /// The original's values shuffled across all channels and positions.
    RandomPermute,
    /// The original blurred with σ = 4 px over a 13×13 window.
    GaussianBlur,
    /// The original itself (for debugging).
    CopyOriginal,
}

impl InitMode {
    pub const ALL: [InitMode; 4] = [InitMode::GaussianNoise, InitMode::RandomPermute, InitMode::GaussianBlur, InitMode::CopyOriginal];

    pub fn label(&self) -> &'static str {
        match self {
            InitMode::GaussianNoise => "gaussian_noise",
            InitMode::RandomPermute => "random_permute",
            InitMode::GaussianBlur => "gaussian_blur",
            InitMode::CopyOriginal => "copy_original",
        }
    }
}

const INIT_NOISE_MEAN: f64 = 0.5;
const INIT_NOISE_STD: f64 = 0.25;
const BLUR_SIGMA: f64 = 4.0;
const BLUR_RADIUS: isize = 6;

pub fn init_obfuscation(x: &Image, mode: InitMode, seed: u64) -> Result<Image> {
    let mut s = rng::stream(seed, 0x1417);
    Ok(match mode {
        InitMode::CopyOriginal => x.clone(),
        InitMode::GaussianNoise => {
            let data = (0..x.len()).map(|_| (INIT_NOISE_MEAN + INIT_NOISE_STD * rng::normal(&mut s)).clamp(0.0, 1.0)).collect();
            Tensor::new(x.shape().to_vec(), data)?
        }
        InitMode::RandomPermute => {
            let order = rng::permutation(&mut s, x.len());
            let data = order.iter().map(|&i| x.data()[i]).collect();
            Tensor::new(x.shape().to_vec(), data)?
        }
        InitMode::GaussianBlur => gaussian_blur(x, BLUR_SIGMA, BLUR_RADIUS)?,
    })
}

/// Separable normalized Gaussian blur with edge clamping.
fn gaussian_blur(x: &Image, sigma: f64, radius: isize) -> Result<Image> {
    let (c, h, w) = x.chw()?;
    let taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / total).collect();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for (t, d) in taps.iter().zip(-radius..=radius) {
                        let (y, xx) = if horizontal {
                            (i, (j as isize + d).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((i as isize + d).clamp(0, h as isize - 1) as usize, j)
                        };
                        acc += t * src[(ch * h + y) * w + xx];
                    }
                    out[(ch * h + i) * w + j] = acc;
                }
            }
        }
        out
    };
    let data = pass(&pass(x.data(), true), false);
    Tensor::new(x.shape().to_vec(), data)
}

/// Side length of the pooled grid used by feature aggregation.
pub const POOL_GRID: usize = 4;

/// Equal-partition cell `[start, end)` of output index `i` out of `n` over `len`.
fn cell(i: usize, n: usize, len: usize) -> (usize, usize) {
    (i * len / n, ((i + 1) * len).div_ceil(n))
}

fn adaptive_pool(t: &Tensor, n: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let mut out = Vec::with_capacity(c * n * n);
    for ch in 0..c {
        let plane = t.channel(ch);
        for a in 0..n {
            let (y0, y1) = cell(a, n, h);
            for b in 0..n {
                let (x0, x1) = cell(b, n, w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    Tensor::new(vec![c, n, n], out)
}

fn adaptive_pool_backward(shape: &[usize], g: &[f64], n: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(shape);
    let (c, h, w) = out.chw()?;
    let d = out.data_mut();
    for ch in 0..c {
        for a in 0..n {
            let (y0, y1) = cell(a, n, h);
            for b in 0..n {
                let (x0, x1) = cell(b, n, w);
                let share = g[(ch * n + a) * n + b] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        d[(ch * h + y) * w + x] += share;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Layer indices whose outputs are aggregated; empty means the last layer.
fn resolve_layers(shallow: &Model, layers: &[usize]) -> Result<Vec<usize>> {
    if shallow.num_layers() == 0 {
        return Err(Error::InvalidConfig("aggregation needs a non-empty shallow model".into()));
    }
    let mut ls = if layers.is_empty() { vec![shallow.num_layers() - 1] } else { layers.to_vec() };
    ls.sort_unstable();
    ls.dedup();
    let shapes = shallow.spec().shapes()?;
    for &l in &ls {
        match shapes.get(l) {
            None => {
                return Err(Error::InvalidConfig(format!("aggregation layer {l} outside the {}-layer shallow model", shallow.num_layers())))
            }
            Some(s) if s.len() != 3 || s[1] < POOL_GRID || s[2] < POOL_GRID => {
                return Err(Error::InvalidConfig(format!(
                    "aggregation layer {l} has output {s:?}, needs [C, H, W] with H, W >= {POOL_GRID}"
                )))
            }
            _ => {}
        }
    }
    Ok(ls)
}

/// Concatenated 4×4 average pools of the outputs of `layers` (output of
/// layer `l` is activation `l + 1`), in layer order.
pub fn aggregate_features(shallow: &Model, image: &Image, layers: &[usize]) -> Result<Tensor> {
    let ls = resolve_layers(shallow, layers)?;
    let acts = shallow.forward_collect_to(image, ls[ls.len() - 1] + 1)?;
    pooled(&acts.0, &ls)
}

/// The 4×4 pooled output of each layer in `layers`, kept separate.
pub fn pooled_layer_features(model: &Model, image: &Image, layers: &[usize]) -> Result<Vec<Tensor>> {
    let ls = resolve_layers(model, layers)?;
    let acts = model.forward_collect_to(image, ls[ls.len() - 1] + 1)?;
    ls.iter().map(|&l| adaptive_pool(&acts.0[l + 1], POOL_GRID)).collect()
}

fn pooled(acts: &[Tensor], ls: &[usize]) -> Result<Tensor> {
    let mut out = Vec::new();
    for &l in ls {
        out.extend(adaptive_pool(&acts[l + 1], POOL_GRID)?.into_data());
    }
    Ok(Tensor::vector(out))
}

/// Loss and input gradient of `Σ (z - agg(image))²` for fixed `z`.
fn aggregate_loss_grad(shallow: &Model, image: &Image, target: &Tensor, ls: &[usize]) -> Result<(f64, Tensor)> {
    let acts = shallow.forward_collect_to(image, ls[ls.len() - 1] + 1)?;
    let z = pooled(&acts.0, ls)?;
    let diff = z.zip_map(target, |a, b| a - b)?;
    let loss = diff.data().iter().map(|d| d * d).sum();
    let mut taps = Vec::with_capacity(ls.len());
    let mut offset = 0;
    for &l in ls {
        let shape = acts.0[l + 1].shape();
        let len = shape[0] * POOL_GRID * POOL_GRID;
        let g: Vec<f64> = diff.data()[offset..offset + len].iter().map(|d| 2.0 * d).collect();
        taps.push((l, adaptive_pool_backward(shape, &g, POOL_GRID)?));
        offset += len;
    }
    let (grad, _) = shallow.backward_taps(&acts, &taps, false)?;
    Ok((loss, grad))
}

/// Every knob of the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PmtConfig {
    pub init: InitMode,
    pub iterations: usize,
    /// Mean per-pixel step length (see [`pmt_protect`]).
    pub step: f64,
    pub augment: AugmentMode,
    /// Shallow-layer indices whose outputs are aggregated; empty means the
    /// final shallow output only.
    pub aggregate_layers: Vec<usize>,
    pub kernel: KernelSpec,
    pub clamp: bool,
    pub seed: u64,
}

/// Outputs of the two pooling layers of the default shallow model.
pub const DEFAULT_AGGREGATE_LAYERS: [usize; 2] = [2, 5];

impl Default for PmtConfig {
    fn default() -> Self {
        Self {
            init: InitMode::GaussianNoise,
            iterations: 300,
            step: 0.05,
            augment: AugmentMode::default_noise(),
            aggregate_layers: DEFAULT_AGGREGATE_LAYERS.to_vec(),
            kernel: KernelSpec::Gaussian { k: 1 },
            clamp: true,
            seed: 0,
        }
    }
}

impl PmtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidConfig(format!("PMT step must be positive, got {}", self.step)));
        }
        self.augment.validate()?;
        make_kernel(self.kernel)?;
        Ok(())
    }
}

/// Result of one iteration.
#[derive(Clone, Debug)]
pub struct Step {
    /// Smoothed, L1-normalized descent direction (zero when converged).
    pub delta: Tensor,
    /// Objective before the step.
    pub loss: f64,
    /// The raw gradient vanished (‖∇J‖₁ < 1e-15).
    pub converged: bool,
}

const ZERO_GRAD: f64 = 1e-15;

/// Gradient of the alignment objective w.r.t. `x_obf` under the draw of
/// iteration `iter`, before normalization.
pub fn objective_grad(shallow: &Model, x: &Image, x_obf: &Image, config: &PmtConfig, iter: usize) -> Result<(f64, Tensor)> {
    x.same_shape(x_obf)?;
    let ls = resolve_layers(shallow, &config.aggregate_layers)?;
    let draw = AugmentDraw::sample(&config.augment, x.shape(), rng::derive_path(config.seed, &[0xA06, iter as u64]))?;
    let target = pooled(&shallow.forward_collect_to(&draw.apply(x), ls[ls.len() - 1] + 1)?.0, &ls)?;
    let (loss, g) = aggregate_loss_grad(shallow, &draw.apply(x_obf), &target, &ls)?;
    Ok((loss, draw.backward(x_obf, &g)))
}

/// One iteration: `δ = W ⊗ (∇J / ‖∇J‖₁)`.
pub fn pmt_step(shallow: &Model, x: &Image, x_obf: &Image, config: &PmtConfig, iter: usize) -> Result<Step> {
    let kernel = make_kernel(config.kernel)?;
    step_with_kernel(shallow, x, x_obf, config, iter, &kernel)
}

fn step_with_kernel(shallow: &Model, x: &Image, x_obf: &Image, config: &PmtConfig, iter: usize, kernel: &Tensor) -> Result<Step> {
    let (loss, grad) = objective_grad(shallow, x, x_obf, config, iter)?;
    let norm = grad.l1_norm();
    if norm < ZERO_GRAD {
        return Ok(Step { delta: Tensor::zeros(x.shape()), loss, converged: true });
    }
    let unit = grad.map(|v| v / norm);
    Ok(Step { delta: smooth(&unit, kernel)?, loss, converged: false })
}

/// Optimizer output.
#[derive(Clone, Debug)]
pub struct Obfuscation {
    pub image: Image,
    /// Final output of each shallow model on `image`.
    pub features: Vec<Tensor>,
    /// Objective before each iteration (summed over models).
    pub loss_trace: Vec<f64>,
}

impl Obfuscation {
    pub fn feature(&self) -> &Tensor {
        &self.features[0]
    }
}

/// Applies `x̃ ← clamp(x̃ − α·N·δ)` where `N` is the pixel count, so that `α`
/// is the mean per-pixel step length of the unit-L1 direction.
fn apply_step(x_obf: &mut Image, delta: &Tensor, config: &PmtConfig) -> Result<()> {
    let scale = config.step * x_obf.len() as f64;
    x_obf.add_scaled(delta, -scale)?;
    if config.clamp {
        *x_obf = x_obf.clamp01();
    }
    Ok(())
}

/// Protects `x` against a single authorized shallow model.
pub fn pmt_protect(x: &Image, shallow: &Model, config: &PmtConfig) -> Result<Obfuscation> {
    pmt_protect_multi(x, std::slice::from_ref(shallow), config)
}

/// Protects `x` for several authorized shallow models at once.
///
/// Each model's direction is normalized and smoothed separately; the sum is
/// rescaled to the mean L1 norm of the per-model directions, so a single
/// model reproduces [`pmt_protect`] exactly.
pub fn pmt_protect_multi(x: &Image, shallows: &[Model], config: &PmtConfig) -> Result<Obfuscation> {
    if shallows.is_empty() {
        return Err(Error::InvalidConfig("MR-PMT needs at least one authorized model".into()));
    }
    config.validate()?;
    let kernel = make_kernel(config.kernel)?;
    let mut x_obf = init_obfuscation(x, config.init, config.seed)?;
    let mut loss_trace = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let mut sum = Tensor::zeros(x.shape());
        let mut norms = 0.0;
        let mut loss = 0.0;
        for m in shallows {
            let step = step_with_kernel(m, x, &x_obf, config, iter, &kernel)?;
            loss += step.loss;
            norms += step.delta.l1_norm();
            sum.add_scaled(&step.delta, 1.0)?;
        }
        loss_trace.push(loss);
        let total = sum.l1_norm();
        if total < ZERO_GRAD {
            continue;
        }
        let target = norms / shallows.len() as f64;
        if target != total {
            sum.scale(target / total);
        }
        apply_step(&mut x_obf, &sum, config)?;
    }
    let features = shallows.iter().map(|m| m.forward(&x_obf)).collect::<Result<_>>()?;
    Ok(Obfuscation { image: x_obf, features, loss_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerSpec;
    use crate::model::ModelSpec;

    fn rand_image(shape: &[usize], seed: u64) -> Tensor {
        let mut s = rng::stream(seed, 5);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(&mut s, 0.0, 1.0)).collect()).unwrap()
    }

    fn small_shallow() -> Model {
        let spec = ModelSpec::new(
            vec![
                LayerSpec::conv(3, 4, 3),
                LayerSpec::Relu,
                LayerSpec::AvgPool2d { kernel: 2 },
                LayerSpec::conv(4, 6, 3),
                LayerSpec::Relu,
                LayerSpec::AvgPool2d { kernel: 2 },
            ],
            vec![3, 16, 16],
        )
        .unwrap();
        Model::build(spec, 3).unwrap()
    }

    #[test]
    fn none_kernel_is_identity() {
        assert_eq!(make_kernel(KernelSpec::None).unwrap().data(), &[1.0]);
    }

    #[test]
    fn linear_kernel_closed_form() {
        let k = make_kernel(KernelSpec::Linear { k: 1 }).unwrap();
        let expect = [0.0625, 0.125, 0.0625, 0.125, 0.25, 0.125, 0.0625, 0.125, 0.0625];
        for (a, b) in k.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_kernel_center() {
        let k = make_kernel(KernelSpec::Gaussian { k: 1 }).unwrap();
        // 1 / (1 + 4e^-1.5 + 4e^-3)
        let e = (-1.5f64).exp();
        let center = 1.0 / (1.0 + 4.0 * e + 4.0 * e * e);
        assert!((k.data()[4] - center).abs() < 1e-15);
        assert!((k.data()[4] - 0.47809).abs() < 1e-5);
    }

    #[test]
    fn kernels_rejected_below_one() {
        assert!(make_kernel(KernelSpec::Linear { k: 0 }).is_err());
        assert!(make_kernel(KernelSpec::Gaussian { k: 0 }).is_err());
    }

    #[test]
    fn smoothing_matches_direct_sum_away_from_edges() {
        let g = rand_image(&[1, 7, 7], 1);
        let k = make_kernel(KernelSpec::Linear { k: 1 }).unwrap();
        let s = smooth(&g, &k).unwrap();
        let (i, j) = (3, 4);
        let mut acc = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                acc += k.data()[a * 3 + b] * g.data()[(i + a - 1) * 7 + j + b - 1];
            }
        }
        assert!((s.data()[i * 7 + j] - acc).abs() < 1e-15);
        // zero fill: a corner only sees its in-image neighbours
        let corner = k.data()[4] * g.data()[0] + k.data()[5] * g.data()[1] + k.data()[7] * g.data()[7] + k.data()[8] * g.data()[8];
        assert!((s.data()[0] - corner).abs() < 1e-15);
    }

    #[test]
    fn init_modes() {
        let x = rand_image(&[3, 8, 8], 2);
        assert!(init_obfuscation(&x, InitMode::CopyOriginal, 0).unwrap().bit_eq(&x));
        let p = init_obfuscation(&x, InitMode::RandomPermute, 0).unwrap();
        let sorted = |t: &Tensor| {
            let mut v = t.data().to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        assert_eq!(sorted(&p), sorted(&x));
        assert!(!p.bit_eq(&x));
        let n = init_obfuscation(&x, InitMode::GaussianNoise, 0).unwrap();
        assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((n.mean() - 0.5).abs() < 0.05);
        let b = init_obfuscation(&Tensor::full(&[3, 8, 8], 0.3), InitMode::GaussianBlur, 0).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn pooling_identity_on_4x4() {
        let t = rand_image(&[2, 4, 4], 3);
        assert!(adaptive_pool(&t, 4).unwrap().bit_eq(&t));
        let t = Tensor::new(vec![1, 8, 8], (0..64).map(f64::from).collect()).unwrap();
        let p = adaptive_pool(&t, 4).unwrap();
        assert_eq!(p.data()[0], (0.0 + 1.0 + 8.0 + 9.0) / 4.0);
    }

    #[test]
    fn pooling_backward_is_adjoint() {
        let t = rand_image(&[2, 10, 9], 4);
        let g = rand_image(&[2, 4, 4], 5);
        let lhs = adaptive_pool(&t, 4).unwrap().dot(&g).unwrap();
        let rhs = t.dot(&adaptive_pool_backward(t.shape(), g.data(), 4).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn aggregate_lengths() {
        let m = Model::build(ModelSpec::toy_recognizer(None), 0).unwrap().slice(0..6).unwrap();
        let x = rand_image(&[3, 32, 32], 6);
        assert_eq!(aggregate_features(&m, &x, &[]).unwrap().len(), 512);
        assert_eq!(aggregate_features(&m, &x, &[2, 5]).unwrap().len(), 768);
        assert!(aggregate_features(&m, &x, &[6]).is_err());
    }

    #[test]
    fn fixed_point_at_original() {
        let m = small_shallow();
        let x = rand_image(&[3, 16, 16], 7);
        let cfg = PmtConfig { augment: AugmentMode::None, aggregate_layers: vec![2, 5], ..PmtConfig::default() };
        let step = pmt_step(&m, &x, &x, &cfg, 0).unwrap();
        assert_eq!(step.loss, 0.0);
        assert!(step.converged);
        assert!(step.delta.data().iter().all(|v| *v == 0.0));
        let cfg = PmtConfig { init: InitMode::CopyOriginal, iterations: 5, ..cfg };
        let out = pmt_protect(&x, &m, &cfg).unwrap();
        assert!(out.loss_trace.iter().all(|l| *l == 0.0));
        assert!(out.image.bit_eq(&x));
    }

    #[test]
    fn unsmoothed_direction_has_unit_l1() {
        let m = small_shallow();
        let x = rand_image(&[3, 16, 16], 8);
        let y = rand_image(&[3, 16, 16], 9);
        let cfg = PmtConfig { kernel: KernelSpec::None, aggregate_layers: vec![2, 5], ..PmtConfig::default() };
        let step = pmt_step(&m, &x, &y, &cfg, 0).unwrap();
        assert!((step.delta.l1_norm() - 1.0).abs() < 1e-12);
        assert!(step.loss > 0.0);
    }

    #[test]
    fn single_model_multi_matches_single() {
        let m = small_shallow();
        let x = rand_image(&[3, 16, 16], 10);
        let cfg = PmtConfig { iterations: 6, aggregate_layers: vec![2, 5], ..PmtConfig::default() };
        let a = pmt_protect(&x, &m, &cfg).unwrap();
        let b = pmt_protect_multi(&x, std::slice::from_ref(&m), &cfg).unwrap();
        assert!(a.image.bit_eq(&b.image));
        assert_eq!(a.loss_trace, b.loss_trace);
        assert!(pmt_protect_multi(&x, &[], &cfg).is_err());
    }
}
