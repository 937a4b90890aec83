//! Image-similarity, recognition and utility/privacy metrics, plus the CSV
//! tables every experiment reports through.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::VerificationPair;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::rng;
use crate::tensor::{Image, Tensor};

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;

/// Mean SSIM over all valid 7×7 windows of each channel, averaged over
/// channels. Window statistics use population (1/49) variances.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (c, h, w) = a.chw()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape(format!("SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let total: f64 = (0..c).map(|ch| ssim_channel(a.channel(ch), b.channel(ch), h, w)).sum();
    Ok(total / c as f64)
}

/// Summed-area table with a zero first row and column.
fn integral(v: impl Fn(usize) -> f64, h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for i in 0..h {
        let mut row = 0.0;
        for j in 0..w {
            row += v(i * w + j);
            s[(i + 1) * (w + 1) + j + 1] = s[i * (w + 1) + j + 1] + row;
        }
    }
    s
}

fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let tables = [
        integral(|k| a[k], h, w),
        integral(|k| b[k], h, w),
        integral(|k| a[k] * a[k], h, w),
        integral(|k| b[k] * b[k], h, w),
        integral(|k| a[k] * b[k], h, w),
    ];
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let stride = w + 1;
    let mut total = 0.0;
    let (rows, cols) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    for i in 0..rows {
        for j in 0..cols {
            let (i1, j1) = (i + SSIM_WINDOW, j + SSIM_WINDOW);
            let [sa, sb, saa, sbb, sab] =
                tables.each_ref().map(|t| (t[i1 * stride + j1] - t[i * stride + j1] - t[i1 * stride + j] + t[i * stride + j]) / n);
            let va = saa - sa * sa;
            let vb = sbb - sb * sb;
            let cov = sab - sa * sb;
            total += ((2.0 * sa * sb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((sa * sa + sb * sb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    total / (rows * cols) as f64
}

/// `10·log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub fn cos_sim(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch { expected: u.shape().to_vec(), actual: v.shape().to_vec() });
    }
    let (nu, nv) = (u.l2_norm(), v.l2_norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_counts(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::CountMismatch(a, b));
    }
    if a == 0 {
        return Err(Error::EmptyDataset("no images to compare".into()));
    }
    Ok(())
}

/// Mean SSIM over paired image lists.
pub fn mean_ssim(a: &[Image], b: &[Image]) -> Result<f64> {
    check_counts(a.len(), b.len())?;
    let v: Vec<f64> = a.par_iter().zip(b).map(|(x, y)| ssim(x, y)).collect::<Result<_>>()?;
    Ok(mean(&v))
}

pub fn mean_psnr(a: &[Image], b: &[Image]) -> Result<f64> {
    check_counts(a.len(), b.len())?;
    let v: Vec<f64> = a.par_iter().zip(b).map(|(x, y)| psnr(x, y)).collect::<Result<_>>()?;
    Ok(mean(&v))
}

/// Mean embedding cosine between paired images under `model`.
pub fn mean_cos(model: &Model, a: &[Image], b: &[Image]) -> Result<f64> {
    check_counts(a.len(), b.len())?;
    let v: Vec<f64> = a.par_iter().zip(b).map(|(x, y)| cos_sim(&model.embed(x)?, &model.embed(y)?)).collect::<Result<_>>()?;
    Ok(mean(&v))
}

/// Fraction of reconstructions the authorized model still matches to their
/// original (`cos > κ`).
pub fn srra(originals: &[Image], reconstructions: &[Image], authorized: &Model, kappa: f64) -> Result<f64> {
    check_counts(originals.len(), reconstructions.len())?;
    let hits: Vec<bool> = originals
        .par_iter()
        .zip(reconstructions)
        .map(|(x, r)| Ok(cos_sim(&authorized.embed(r)?, &authorized.embed(x)?)? > kappa))
        .collect::<Result<_>>()?;
    Ok(rate(&hits))
}

fn rate(hits: &[bool]) -> f64 {
    hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64
}

/// Strict verification accuracy: a pair counts when the protected first
/// image still matches its own original AND its match decision against the
/// second image equals the label.
///
/// `protect(i, x₁)` produces the protected first image of pair `i`.
pub fn verification_accuracy<F>(model: &Model, pairs: &[VerificationPair], protect: F, kappa: f64) -> Result<f64>
where
    F: Fn(usize, &Image) -> Result<Image> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no verification pairs".into()));
    }
    let hits: Vec<bool> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let protected = model.embed(&protect(i, &p.first)?)?;
            let own = cos_sim(&protected, &model.embed(&p.first)?)? > kappa;
            let other = cos_sim(&protected, &model.embed(&p.second)?)? > kappa;
            Ok(own && other == p.same)
        })
        .collect::<Result<_>>()?;
    Ok(rate(&hits))
}

/// Verification accuracy with the first images replaced by `protected`.
pub fn protected_accuracy(model: &Model, pairs: &[VerificationPair], protected: &[Image], kappa: f64) -> Result<f64> {
    check_counts(pairs.len(), protected.len())?;
    verification_accuracy(model, pairs, |i, _| Ok(protected[i].clone()), kappa)
}

pub fn clean_accuracy(model: &Model, pairs: &[VerificationPair], kappa: f64) -> Result<f64> {
    verification_accuracy(model, pairs, |_, x| Ok(x.clone()), kappa)
}

pub const DEFAULT_KAPPA: f64 = 0.2;
pub const STRICT_KAPPA: f64 = 0.5;
pub const PROBE_SEED: u64 = 7777;

/// Settings of the utility/privacy score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpParams {
    /// Standard deviation of the pixel noise applied to both images.
    pub sigma: f64,
    pub kappa: f64,
    pub trials: usize,
    /// Seed of the fixed, untrained perceptual probe.
    pub probe_seed: u64,
    /// Number of probe blocks whose pooled outputs are compared.
    pub probe_layers: usize,
    pub seed: u64,
}

impl Default for UpParams {
    fn default() -> Self {
        Self { sigma: 0.1, kappa: STRICT_KAPPA, trials: 8, probe_seed: PROBE_SEED, probe_layers: 3, seed: 0 }
    }
}

impl UpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(self.kappa > -1.0 && self.kappa < 1.0) || self.trials == 0 || !(1..=3).contains(&self.probe_layers) {
            return Err(Error::InvalidConfig(format!("invalid UP parameters {self:?}")));
        }
        Ok(())
    }
}

/// Never-trained network whose block outputs stand in for a perceptual
/// feature extractor.
#[derive(Clone, Debug)]
pub struct PerceptualProbe {
    model: Model,
    taps: Vec<usize>,
}

impl PerceptualProbe {
    pub fn new(seed: u64, layers: usize) -> Result<Self> {
        let model = Model::build(ModelSpec::toy_recognizer(None), seed)?;
        let taps: Vec<usize> = model
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, crate::layers::LayerSpec::AvgPool2d { .. }))
            .map(|(i, _)| i)
            .take(layers)
            .collect();
        if taps.len() != layers {
            return Err(Error::InvalidConfig(format!("probe has only {} blocks", taps.len())));
        }
        Ok(Self { model, taps })
    }

    /// Mean over probe blocks of `1 - cos` between 4×4-pooled block outputs.
    pub fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total = 0.0;
        for (u, v) in fa.iter().zip(&fb) {
            total += 1.0 - cos_or_zero(u, v);
        }
        Ok((total / self.taps.len() as f64).clamp(0.0, 1.0))
    }

    fn features(&self, x: &Image) -> Result<Vec<Tensor>> {
        crate::pmt::pooled_layer_features(&self.model, x, &self.taps)
    }
}

/// Cosine that treats a pair containing a zero vector as fully dissimilar
/// unless both are zero.
fn cos_or_zero(u: &Tensor, v: &Tensor) -> f64 {
    match cos_sim(u, v) {
        Ok(c) => c,
        Err(_) if u.l2_norm() == 0.0 && v.l2_norm() == 0.0 => 1.0,
        Err(_) => 0.0,
    }
}

/// Utility, privacy and their sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpScore {
    pub utility: f64,
    pub privacy: f64,
    pub total: f64,
}

fn noisy(x: &Image, sigma: f64, seed: u64) -> Image {
    if sigma == 0.0 {
        return x.clone();
    }
    let mut s = rng::stream(seed, 0x9015E);
    let data = x.data().iter().map(|v| (v + sigma * rng::normal(&mut s)).clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Utility/privacy score of uploading `protected[i]` in place of `originals[i]`.
///
/// For every image and trial, independent noise draws `x + η`, `x̃ + η'`
/// are compared: utility is `1{cos(f(x̃ + η'), f(x + η)) > κ}` under the
/// authorized model, privacy the probe distance between the two noisy
/// images. Both are averaged over images and trials.
pub fn up_metric(originals: &[Image], protected: &[Image], authorized: &Model, params: &UpParams) -> Result<UpScore> {
    params.validate()?;
    check_counts(originals.len(), protected.len())?;
    let probe = PerceptualProbe::new(params.probe_seed, params.probe_layers)?;
    let per_image: Vec<(f64, f64)> = originals
        .par_iter()
        .zip(protected)
        .enumerate()
        .map(|(i, (x, xt))| {
            let (mut u, mut p) = (0.0, 0.0);
            for t in 0..params.trials {
                let key = rng::derive_path(params.seed, &[i as u64, t as u64]);
                let xn = noisy(x, params.sigma, rng::derive(key, 0));
                let xtn = noisy(xt, params.sigma, rng::derive(key, 1));
                if cos_or_zero(&authorized.embed(&xtn)?, &authorized.embed(&xn)?) > params.kappa {
                    u += 1.0;
                }
                p += probe.distance(&xn, &xtn)?;
            }
            Ok((u / params.trials as f64, p / params.trials as f64))
        })
        .collect::<Result<_>>()?;
    let utility = mean(&per_image.iter().map(|p| p.0).collect::<Vec<_>>());
    let privacy = mean(&per_image.iter().map(|p| p.1).collect::<Vec<_>>());
    Ok(UpScore { utility, privacy, total: utility + privacy })
}

/// Cosine between attribute probability vectors of `x` and `x̃`.
pub fn attribute_cos_sim(probe: &crate::attacks::AttributeProbe, x: &Image, x_obf: &Image) -> Result<f64> {
    cos_sim(&probe.estimate(x_obf)?, &probe.estimate(x)?)
}

/// Six significant digits, trailing zeros dropped; scientific notation
/// outside `[1e-5, 1e6)`.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let fixed = format!("{v:.*}", (5 - exp) as usize);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One CSV value.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Num(f64),
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(v as i64)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
            Cell::Int(v) => v.to_string(),
            Cell::Num(v) => format_sig6(*v),
        }
    }
}

/// A CSV table with a fixed header; rows keep insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::CountMismatch(self.columns.len(), row.len()));
        }
        if let Some(Cell::Num(v)) = row.iter().find(|c| matches!(c, Cell::Num(v) if !v.is_finite())) {
            return Err(Error::InvalidConfig(format!("non-finite value {v} in report row")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Numeric value of `column` in row `row`.
    pub fn value(&self, row: usize, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|n| n == column)?;
        match self.rows.get(row)?.get(c)? {
            Cell::Num(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            Cell::Text(_) => None,
        }
    }

    /// Text of `column` in row `row`.
    pub fn text(&self, row: usize, column: &str) -> Option<&str> {
        let c = self.columns.iter().position(|n| n == column)?;
        match self.rows.get(row)?.get(c)? {
            Cell::Text(t) => Some(t),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Index of the first row whose text cells include every `labels` entry.
    pub fn find(&self, labels: &[&str]) -> Option<usize> {
        self.rows.iter().position(|r| labels.iter().all(|l| r.iter().any(|c| matches!(c, Cell::Text(t) if t == l))))
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::render).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    /// Writes the table to `path`.
    pub fn emit(&self, path: &Path) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::EmptyDataset("report has no rows".into()));
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut s = rng::stream(seed, 1);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(&mut s, 0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = rand(&[3, 12, 10], 1);
        let b = rand(&[3, 12, 10], 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&rand(&[1, 6, 8], 3), &rand(&[1, 6, 8], 4)).is_err());
    }

    #[test]
    fn ssim_of_inverted_image_is_negative() {
        let a = Tensor::new(vec![1, 16, 16], (0..256).map(|k| 0.3 + 0.4 * (((k % 16) / 4 + (k / 64)) % 2) as f64).collect()).unwrap();
        assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < 0.0);
    }

    #[test]
    fn psnr_values() {
        let a = rand(&[3, 4, 4], 5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let z = Tensor::zeros(&[1, 2, 2]);
        let b = Tensor::full(&[1, 2, 2], 0.1);
        assert!((psnr(&z, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn cos_values() {
        let u = Tensor::vector(vec![3.0, 4.0]);
        let v = Tensor::vector(vec![4.0, 3.0]);
        assert!((cos_sim(&u, &v).unwrap() - 0.96).abs() < 1e-15);
        assert_eq!(cos_sim(&u, &u).unwrap(), 1.0);
        assert_eq!(cos_sim(&Tensor::vector(vec![1.0, 0.0]), &Tensor::vector(vec![0.0, 2.0])).unwrap(), 0.0);
        assert!(matches!(cos_sim(&u, &Tensor::zeros(&[2])), Err(Error::ZeroNorm)));
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.12345678), "0.123457");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.5), "0.5");
        assert_eq!(format_sig6(20.0), "20");
        assert_eq!(format_sig6(-4.56789012), "-4.56789");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(9999999.0), "1e7");
        assert_eq!(format_sig6(1.5e-7), "1.5e-7");
        assert_eq!(format_sig6(0.000123456789), "0.000123457");
        assert_eq!(format_sig6(0.0), "0");
    }

    #[test]
    fn table_csv() {
        let mut t = Table::new(&["name", "n", "v"]);
        t.push(vec!["a,b".into(), 3usize.into(), 0.12345678.into()]).unwrap();
        assert!(t.push(vec!["x".into()]).is_err());
        assert!(t.push(vec!["x".into(), 1usize.into(), f64::NAN.into()]).is_err());
        assert_eq!(t.to_csv(), "name,n,v\n\"a,b\",3,0.123457\n");
        assert_eq!(t.value(0, "v"), Some(0.12345678));
        assert_eq!(t.find(&["a,b"]), Some(0));
    }

    #[test]
    fn probe_distance_zero_for_identical() {
        let probe = PerceptualProbe::new(PROBE_SEED, 3).unwrap();
        let a = rand(&[3, 32, 32], 6);
        assert!(probe.distance(&a, &a).unwrap().abs() < 1e-12);
        let b = rand(&[3, 32, 32], 7);
        let d = probe.distance(&a, &b).unwrap();
        assert!(d > 0.0 && d <= 1.0);
    }
}
