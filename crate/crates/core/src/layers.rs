//! Layer vocabulary with exact forward and reverse-mode passes.
//!
//! Tensors carry no batch dimension: feature maps are `[C, H, W]` and dense
//! layers consume rank-1 vectors. Convolution is cross-correlation and the
//! ReLU subgradient at zero is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    Relu,
    Sigmoid,
    AvgPool2d { kernel: usize },
    UpsampleNearest2x,
    Flatten,
    Linear { in_dim: usize, out_dim: usize, bias: bool },
    L2Normalize,
}

/// Norms below this are treated as this value by `L2Normalize`.
const NORM_FLOOR: f64 = 1e-12;

impl LayerSpec {
    /// `Conv2d` with stride 1, "same" padding and a bias.
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d { in_ch, out_ch, kernel, stride: 1, padding: kernel / 2, bias: true }
    }

    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Linear { in_dim, out_dim, bias: true }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::Relu => "ReLU",
            LayerSpec::Sigmoid => "Sigmoid",
            LayerSpec::AvgPool2d { .. } => "AvgPool2d",
            LayerSpec::UpsampleNearest2x => "UpsampleNearest2x",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Linear { .. } => "Linear",
            LayerSpec::L2Normalize => "L2Normalize",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, .. } => {
                if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::InvalidLayer(format!("{self:?}: sizes must be positive")));
                }
                if padding >= kernel {
                    return Err(Error::InvalidLayer(format!("{self:?}: padding must be < kernel")));
                }
            }
            LayerSpec::AvgPool2d { kernel: 0 } => {
                return Err(Error::InvalidLayer("AvgPool2d kernel must be positive".into()));
            }
            LayerSpec::Linear { in_dim, out_dim, .. } if in_dim == 0 || out_dim == 0 => {
                return Err(Error::InvalidLayer(format!("{self:?}: sizes must be positive")));
            }
            _ => {}
        }
        Ok(())
    }

    /// Shapes of the parameter tensors, weight first then bias.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, bias, .. } => {
                let mut v = vec![vec![out_ch, in_ch, kernel, kernel]];
                if bias {
                    v.push(vec![out_ch]);
                }
                v
            }
            LayerSpec::Linear { in_dim, out_dim, bias } => {
                let mut v = vec![vec![out_dim, in_dim]];
                if bias {
                    v.push(vec![out_dim]);
                }
                v
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Fan-in used by the uniform initializer.
    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv2d { in_ch, kernel, .. } => Some(in_ch * kernel * kernel),
            LayerSpec::Linear { in_dim, .. } => Some(in_dim),
            _ => None,
        }
    }

    fn input_error(&self, expected: Vec<usize>, actual: &[usize]) -> Error {
        Error::LayerInput { layer: self.name().to_string(), expected, actual: actual.to_vec() }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, .. } => match *input {
                [c, h, w] if c == in_ch && h + 2 * padding >= kernel && w + 2 * padding >= kernel => {
                    Ok(vec![out_ch, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1])
                }
                _ => Err(self.input_error(vec![in_ch, 0, 0], input)),
            },
            LayerSpec::AvgPool2d { kernel } => match *input {
                [c, h, w] if h >= kernel && w >= kernel => Ok(vec![c, h / kernel, w / kernel]),
                _ => Err(self.input_error(vec![0, kernel, kernel], input)),
            },
            LayerSpec::UpsampleNearest2x => match *input {
                [c, h, w] => Ok(vec![c, 2 * h, 2 * w]),
                _ => Err(self.input_error(vec![0, 0, 0], input)),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Linear { in_dim, out_dim, .. } => match *input {
                [n] if n == in_dim => Ok(vec![out_dim]),
                _ => Err(self.input_error(vec![in_dim], input)),
            },
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::L2Normalize => Ok(input.to_vec()),
        }
    }

    fn check_params(&self, params: &[Tensor]) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(Error::Params(format!(
                "{} expects parameters {shapes:?}, got {:?}",
                self.name(),
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

/// Applies one layer.
pub fn layer_forward(layer: &LayerSpec, params: &[Tensor], input: &Tensor) -> Result<Tensor> {
    layer.check_params(params)?;
    let out_shape = layer.output_shape(input.shape())?;
    let x = input.data();
    let data = match *layer {
        LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, .. } => {
            let geo = ConvGeometry::new(input.shape(), kernel, stride, padding);
            debug_assert_eq!(geo.c, in_ch);
            let cols = geo.im2col(x);
            let n = geo.ho * geo.wo;
            let mut out = vec![0.0; out_ch * n];
            gemm(out_ch, geo.rows(), n, (params[0].data(), geo.rows(), 1), (&cols, n, 1), &mut out);
            if let Some(b) = params.get(1) {
                for (o, chunk) in out.chunks_mut(n).enumerate() {
                    let bo = b.data()[o];
                    chunk.iter_mut().for_each(|v| *v += bo);
                }
            }
            out
        }
        LayerSpec::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        LayerSpec::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        LayerSpec::AvgPool2d { kernel } => {
            let (c, h, w) = input.chw()?;
            let (ho, wo) = (h / kernel, w / kernel);
            let inv = 1.0 / (kernel * kernel) as f64;
            let mut out = vec![0.0; c * ho * wo];
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = 0.0;
                        for di in 0..kernel {
                            let row = (ch * h + i * kernel + di) * w + j * kernel;
                            s += x[row..row + kernel].iter().sum::<f64>();
                        }
                        out[(ch * ho + i) * wo + j] = s * inv;
                    }
                }
            }
            out
        }
        LayerSpec::UpsampleNearest2x => {
            let (c, h, w) = input.chw()?;
            let mut out = vec![0.0; c * 4 * h * w];
            for ch in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        out[(ch * 2 * h + i) * 2 * w + j] = x[(ch * h + i / 2) * w + j / 2];
                    }
                }
            }
            out
        }
        LayerSpec::Flatten => x.to_vec(),
        LayerSpec::Linear { in_dim, out_dim, .. } => {
            let wts = params[0].data();
            let mut out: Vec<f64> =
                (0..out_dim).map(|o| wts[o * in_dim..(o + 1) * in_dim].iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            if let Some(b) = params.get(1) {
                out.iter_mut().zip(b.data()).for_each(|(v, bo)| *v += bo);
            }
            out
        }
        LayerSpec::L2Normalize => {
            let norm = input.l2_norm().max(NORM_FLOOR);
            x.iter().map(|v| v / norm).collect()
        }
    };
    Tensor::new(out_shape, data)
}

/// Gradients of one layer given the gradient at its output.
///
/// Returns the input gradient and, when `want_params` is set, one gradient
/// per parameter tensor (empty otherwise).
pub fn layer_backward(
    layer: &LayerSpec,
    params: &[Tensor],
    input: &Tensor,
    output: &Tensor,
    out_grad: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Vec<Tensor>)> {
    layer.check_params(params)?;
    output.same_shape(out_grad)?;
    let x = input.data();
    let g = out_grad.data();
    let mut param_grads = Vec::new();
    let dx: Vec<f64> = match *layer {
        LayerSpec::Conv2d { out_ch, kernel, stride, padding, .. } => {
            let geo = ConvGeometry::new(input.shape(), kernel, stride, padding);
            let n = geo.ho * geo.wo;
            let rows = geo.rows();
            if want_params {
                let cols = geo.im2col(x);
                let mut dw = vec![0.0; out_ch * rows];
                gemm(out_ch, n, rows, (g, n, 1), (&cols, 1, n), &mut dw);
                param_grads.push(Tensor::new(params[0].shape().to_vec(), dw)?);
                if params.len() > 1 {
                    let db = g.chunks(n).map(|c| c.iter().sum()).collect();
                    param_grads.push(Tensor::vector(db));
                }
            }
            let mut dcols = vec![0.0; rows * n];
            gemm(rows, out_ch, n, (params[0].data(), 1, rows), (g, n, 1), &mut dcols);
            geo.col2im(&dcols)
        }
        LayerSpec::Relu => x.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect(),
        LayerSpec::Sigmoid => output.data().iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect(),
        LayerSpec::AvgPool2d { kernel } => {
            let (c, h, w) = input.chw()?;
            let (ho, wo) = (h / kernel, w / kernel);
            let inv = 1.0 / (kernel * kernel) as f64;
            let mut dx = vec![0.0; x.len()];
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let gv = g[(ch * ho + i) * wo + j] * inv;
                        for di in 0..kernel {
                            let row = (ch * h + i * kernel + di) * w + j * kernel;
                            dx[row..row + kernel].iter_mut().for_each(|v| *v = gv);
                        }
                    }
                }
            }
            dx
        }
        LayerSpec::UpsampleNearest2x => {
            let (c, h, w) = input.chw()?;
            let mut dx = vec![0.0; x.len()];
            for ch in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        dx[(ch * h + i / 2) * w + j / 2] += g[(ch * 2 * h + i) * 2 * w + j];
                    }
                }
            }
            dx
        }
        LayerSpec::Flatten => g.to_vec(),
        LayerSpec::Linear { in_dim, out_dim, .. } => {
            let wts = params[0].data();
            if want_params {
                let mut dw = vec![0.0; out_dim * in_dim];
                for (o, row) in dw.chunks_mut(in_dim).enumerate() {
                    row.iter_mut().zip(x).for_each(|(d, xv)| *d = g[o] * xv);
                }
                param_grads.push(Tensor::new(vec![out_dim, in_dim], dw)?);
                if params.len() > 1 {
                    param_grads.push(Tensor::vector(g.to_vec()));
                }
            }
            let mut dx = vec![0.0; in_dim];
            for (o, row) in wts.chunks(in_dim).enumerate() {
                let go = g[o];
                dx.iter_mut().zip(row).for_each(|(d, wv)| *d += go * wv);
            }
            dx
        }
        LayerSpec::L2Normalize => {
            let norm = input.l2_norm();
            if norm < NORM_FLOOR {
                g.iter().map(|v| v / NORM_FLOOR).collect()
            } else {
                let y = output.data();
                let yg: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                y.iter().zip(g).map(|(yv, gv)| (gv - yv * yg) / norm).collect()
            }
        }
    };
    Ok((Tensor::new(input.shape().to_vec(), dx)?, param_grads))
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `c = a * b` for row-major operands given as `(data, row_stride, col_stride)`.
fn gemm(m: usize, k: usize, n: usize, a: (&[f64], usize, usize), b: (&[f64], usize, usize), c: &mut [f64]) {
    assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.len() >= m * n);
    assert!((m - 1) * a.1 + (k - 1) * a.2 < a.0.len());
    assert!((k - 1) * b.1 + (n - 1) * b.2 < b.0.len());
    // SAFETY: the asserts above bound every offset the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(shape: &[usize], k: usize, stride: usize, pad: usize) -> Self {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        Self { c, h, w, k, stride, pad, ho: (h + 2 * pad - k) / stride + 1, wo: (w + 2 * pad - k) / stride + 1 }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Source coordinate of output position `o` at kernel offset `d`, if inside.
    #[inline]
    fn src(&self, o: usize, d: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + d) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let mut cols = vec![0.0; self.rows() * n];
        for ch in 0..self.c {
            for di in 0..self.k {
                for dj in 0..self.k {
                    let r = (ch * self.k + di) * self.k + dj;
                    let row = &mut cols[r * n..(r + 1) * n];
                    for i in 0..self.ho {
                        let Some(si) = self.src(i, di, self.h) else { continue };
                        let base = (ch * self.h + si) * self.w;
                        for j in 0..self.wo {
                            if let Some(sj) = self.src(j, dj, self.w) {
                                row[i * self.wo + j] = x[base + sj];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let mut x = vec![0.0; self.c * self.h * self.w];
        for ch in 0..self.c {
            for di in 0..self.k {
                for dj in 0..self.k {
                    let r = (ch * self.k + di) * self.k + dj;
                    let row = &cols[r * n..(r + 1) * n];
                    for i in 0..self.ho {
                        let Some(si) = self.src(i, di, self.h) else { continue };
                        let base = (ch * self.h + si) * self.w;
                        for j in 0..self.wo {
                            if let Some(sj) = self.src(j, dj, self.w) {
                                x[base + sj] += row[i * self.wo + j];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let y = layer_forward(&LayerSpec::Relu, &[], &Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn unit_conv_scales_input() {
        let conv = LayerSpec::Conv2d { in_ch: 1, out_ch: 1, kernel: 1, stride: 1, padding: 0, bias: true };
        let params = [t(&[1, 1, 1, 1], &[2.0]), t(&[1], &[0.0])];
        let y = layer_forward(&conv, &params, &t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn avgpool_mean() {
        let y = layer_forward(&LayerSpec::AvgPool2d { kernel: 2 }, &[], &t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn l2_normalize_345() {
        let y = layer_forward(&LayerSpec::L2Normalize, &[], &Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.0]);
        let y = layer_forward(&LayerSpec::Relu, &[], &x).unwrap();
        let (dx, _) = layer_backward(&LayerSpec::Relu, &[], &x, &y, &Tensor::full(&[3], 1.0), false).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn strided_padded_conv_shape() {
        let conv = LayerSpec::Conv2d { in_ch: 2, out_ch: 4, kernel: 3, stride: 2, padding: 1, bias: false };
        assert_eq!(conv.output_shape(&[2, 9, 8]).unwrap(), vec![4, 5, 4]);
        assert!(conv.output_shape(&[3, 9, 8]).is_err());
    }

    #[test]
    fn conv_matches_direct_summation() {
        let conv = LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, padding: 1, bias: true };
        let mut s = rng::stream(5, 0);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(&mut s)).collect()).unwrap()
        };
        let x = rand_t(&[2, 7, 6]);
        let w = rand_t(&[3, 2, 3, 3]);
        let b = rand_t(&[3]);
        let y = layer_forward(&conv, &[w.clone(), b.clone()], &x).unwrap();
        let (ho, wo) = (4, 3);
        for o in 0..3 {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let si = (2 * i + di) as isize - 1;
                                let sj = (2 * j + dj) as isize - 1;
                                if si < 0 || sj < 0 || si >= 7 || sj >= 6 {
                                    continue;
                                }
                                acc += w.data()[((o * 2 + c) * 3 + di) * 3 + dj] * x.data()[(c * 7 + si as usize) * 6 + sj as usize];
                            }
                        }
                    }
                    assert!((acc - y.data()[(o * ho + i) * wo + j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_adjoint_identity() {
        let conv = LayerSpec::Conv2d { in_ch: 3, out_ch: 5, kernel: 3, stride: 1, padding: 1, bias: false };
        for seed in 0..5 {
            let mut s = rng::stream(seed, 1);
            let mut rand_t = |shape: &[usize]| {
                let n = shape.iter().product();
                Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(&mut s)).collect()).unwrap()
            };
            let x = rand_t(&[3, 8, 8]);
            let w = rand_t(&[5, 3, 3, 3]);
            let y = rand_t(&[5, 8, 8]);
            let cx = layer_forward(&conv, std::slice::from_ref(&w), &x).unwrap();
            let (cty, _) = layer_backward(&conv, &[w], &x, &cx, &y, false).unwrap();
            let lhs = cx.dot(&y).unwrap();
            let rhs = x.dot(&cty).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn rejects_bad_params_and_layers() {
        let lin = LayerSpec::linear(2, 1);
        assert!(matches!(layer_forward(&lin, &[], &Tensor::vector(vec![1.0, 2.0])), Err(Error::Params(_))));
        let bad = LayerSpec::Conv2d { in_ch: 1, out_ch: 1, kernel: 3, stride: 1, padding: 3, bias: false };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn conv_parameter_count() {
        assert_eq!(LayerSpec::conv(3, 8, 3).param_count(), 8 * 3 * 3 * 3 + 8);
    }
}
