//! Central-difference checks of every layer type and objective.

use pmt_core::autodiff::{grad_check, LossSpec, OutputLoss};
use pmt_core::layers::LayerSpec;
use pmt_core::rng;
use pmt_core::{Model, ModelSpec, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-3;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut s = rng::stream(seed, 0xC0FFEE);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(&mut s, lo, hi)).collect()).unwrap()
}

/// Randomizes biases too, so ReLU/ pooling paths see non-trivial offsets.
fn build(layers: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> Model {
    let spec = ModelSpec::new(layers, input_shape.to_vec()).unwrap();
    let mut m = Model::build(spec, seed).unwrap();
    for (i, ps) in m.params_mut().iter_mut().enumerate() {
        if let Some(b) = ps.get_mut(1) {
            *b = random(b.shape(), seed * 31 + i as u64, -0.2, 0.2);
        }
    }
    m
}

/// Smallest |pre-activation| seen by any ReLU in the model.
fn kink_distance(model: &Model, input: &Tensor) -> f64 {
    let acts = model.forward_collect(input).unwrap();
    model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Relu))
        .flat_map(|(i, _)| acts.0[i].data().iter().map(|v| v.abs()).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min)
}

/// First input (over successive draws) that keeps every ReLU away from its kink.
fn input_away_from_kinks(model: &Model, shape: &[usize], seed: u64) -> Tensor {
    (0..1000)
        .map(|k| random(shape, seed * 1000 + k, 0.0, 1.0))
        .find(|x| kink_distance(model, x) > KINK_MARGIN)
        .expect("no kink-free input found")
}

fn check(model: &Model, input: &Tensor, loss: LossSpec) -> f64 {
    let err = grad_check(model, input, &loss, H).unwrap();
    assert!(err <= TOL, "relative error {err:e} > {TOL:e}");
    err
}

#[test]
fn linear_quadratic_is_exact() {
    let m = build(vec![LayerSpec::linear(5, 3)], &[5], 1);
    let x = random(&[5], 2, -1.0, 1.0);
    let target = random(&[3], 3, -1.0, 1.0);
    let err = check(&m, &x, LossSpec::new(OutputLoss::SquaredDistance(target)));
    assert!(err <= 1e-9, "{err:e}");
}

#[test]
fn conv_net_feature_distance() {
    let layers = vec![
        LayerSpec::conv(2, 4, 3),
        LayerSpec::Relu,
        LayerSpec::AvgPool2d { kernel: 2 },
        LayerSpec::conv(4, 5, 3),
        LayerSpec::Relu,
        LayerSpec::AvgPool2d { kernel: 2 },
    ];
    for seed in 0..3 {
        let m = build(layers.clone(), &[2, 8, 8], seed);
        let x = input_away_from_kinks(&m, &[2, 8, 8], seed);
        let out = m.forward(&x).unwrap();
        let target = out.zip_map(&random(out.shape(), seed + 50, -0.05, 0.05), |a, b| a + b).unwrap();
        check(&m, &x, LossSpec::new(OutputLoss::SquaredDistance(target)));
    }
}

#[test]
fn strided_conv_without_bias() {
    let layers = vec![LayerSpec::Conv2d { in_ch: 3, out_ch: 4, kernel: 3, stride: 2, padding: 1, bias: false }, LayerSpec::Sigmoid];
    let m = build(layers, &[3, 7, 7], 4);
    let x = random(&[3, 7, 7], 5, 0.0, 1.0);
    let target = random(&[4, 4, 4], 6, 0.0, 1.0);
    check(&m, &x, LossSpec::new(OutputLoss::SquaredDistance(target)));
}

#[test]
fn decoder_style_stack() {
    let layers =
        vec![LayerSpec::conv(4, 3, 3), LayerSpec::Relu, LayerSpec::UpsampleNearest2x, LayerSpec::conv(3, 2, 3), LayerSpec::Sigmoid];
    let m = build(layers, &[4, 3, 3], 7);
    let x = input_away_from_kinks(&m, &[4, 3, 3], 7);
    let target = random(&[2, 6, 6], 8, 0.0, 1.0);
    check(&m, &x, LossSpec::new(OutputLoss::SquaredDistance(target)));
}

#[test]
fn classifier_head_cross_entropy() {
    let layers = vec![
        LayerSpec::conv(1, 2, 3),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::linear(2 * 4 * 4, 6),
        LayerSpec::L2Normalize,
        LayerSpec::linear(6, 3),
    ];
    let m = build(layers, &[1, 4, 4], 9);
    let x = input_away_from_kinks(&m, &[1, 4, 4], 9);
    for label in 0..3 {
        check(&m, &x, LossSpec::new(OutputLoss::CrossEntropy(label)));
    }
}

#[test]
fn reconstruction_objective_with_and_without_tv() {
    let layers = vec![LayerSpec::conv(3, 4, 3), LayerSpec::Relu, LayerSpec::AvgPool2d { kernel: 2 }];
    let m = build(layers, &[3, 6, 6], 10);
    let x = input_away_from_kinks(&m, &[3, 6, 6], 10);
    let out = m.forward(&x).unwrap();
    let target = out.zip_map(&random(out.shape(), 11, -0.3, 0.3), |a, b| a + b).unwrap();
    for weight in [0.0, 1e-3] {
        check(&m, &x, LossSpec::new(OutputLoss::Distance(target.clone())).with_tv(weight, 2.0));
    }
}
