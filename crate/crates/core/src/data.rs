//! Procedural face-like images, verification pairs, augmentations and PPM I/O.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{Image, Tensor};

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_SHAPE: [usize; 3] = [3, IMAGE_SIZE, IMAGE_SIZE];

/// Geometry and colours of one synthetic identity. Lengths are fractions of
/// the image size unless noted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub face_center: [f64; 2],
    pub face_axes: [f64; 2],
    pub skin: [f64; 3],
    pub eye_separation: f64,
    pub eye_height: f64,
    /// Eye radius in pixels.
    pub eye_radius: f64,
    pub mouth_width: f64,
    pub mouth_height: f64,
    /// Signed sag of the mouth curve; positive bends the corners up.
    pub mouth_curvature: f64,
    pub background_top: [f64; 3],
    pub background_bottom: [f64; 3],
    /// The private binary attribute; rendered as a pair of glasses.
    pub tag: bool,
}

fn rgb(s: &mut Stream, lo: f64, hi: f64) -> [f64; 3] {
    [rng::uniform(s, lo, hi), rng::uniform(s, lo, hi), rng::uniform(s, lo, hi)]
}

/// Identity parameters, a pure function of the seed.
pub fn gen_identity(identity_seed: u64) -> IdentityParams {
    let mut s = rng::stream(identity_seed, 0x1D);
    let tone = rng::uniform(&mut s, 0.35, 0.95);
    let skin = [tone, tone * rng::uniform(&mut s, 0.68, 0.86), tone * rng::uniform(&mut s, 0.50, 0.75)];
    IdentityParams {
        face_center: [rng::uniform(&mut s, 0.44, 0.56), rng::uniform(&mut s, 0.46, 0.56)],
        face_axes: [rng::uniform(&mut s, 0.26, 0.36), rng::uniform(&mut s, 0.33, 0.41)],
        skin,
        eye_separation: rng::uniform(&mut s, 0.20, 0.34),
        eye_height: rng::uniform(&mut s, 0.36, 0.46),
        eye_radius: rng::uniform(&mut s, 1.1, 2.3),
        mouth_width: rng::uniform(&mut s, 0.14, 0.30),
        mouth_height: rng::uniform(&mut s, 0.64, 0.74),
        mouth_curvature: rng::uniform(&mut s, -0.07, 0.07),
        background_top: rgb(&mut s, 0.0, 1.0),
        background_bottom: rgb(&mut s, 0.0, 1.0),
        tag: rng::derive(identity_seed, 0x7A6) & 1 == 1,
    }
}

/// Coverage of a soft edge at signed distance `d` (negative inside).
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

fn blend(px: &mut [f64; 3], color: [f64; 3], alpha: f64) {
    for c in 0..3 {
        px[c] += alpha * (color[c] - px[c]);
    }
}

const EYE_COLOR: [f64; 3] = [0.08, 0.07, 0.12];
const FRAME_COLOR: [f64; 3] = [0.02, 0.02, 0.02];
const MOUTH_COLOR: [f64; 3] = [0.55, 0.12, 0.18];

/// Renders a 3×32×32 image of `id`. The variation seed shifts brightness by
/// up to ±0.1, moves eyes and mouth by up to ±1 px, and adds Gaussian noise
/// with σ = 0.02.
pub fn render_face(id: &IdentityParams, variation_seed: u64) -> Image {
    let n = IMAGE_SIZE as f64;
    let mut s = rng::stream_path(variation_seed, &[0x4EAD, id_key(id)]);
    let brightness = rng::uniform(&mut s, -0.1, 0.1);
    let eye_shift = [rng::uniform(&mut s, -1.0, 1.0), rng::uniform(&mut s, -1.0, 1.0)];
    let mouth_shift = [rng::uniform(&mut s, -1.0, 1.0), rng::uniform(&mut s, -1.0, 1.0)];

    let (fcx, fcy) = (id.face_center[0] * n, id.face_center[1] * n);
    let (fax, fay) = (id.face_axes[0] * n, id.face_axes[1] * n);
    let eye_y = id.eye_height * n + eye_shift[1];
    let eyes = [fcx - id.eye_separation * n / 2.0 + eye_shift[0], fcx + id.eye_separation * n / 2.0 + eye_shift[0]];
    let mouth_x = fcx + mouth_shift[0];
    let mouth_y = id.mouth_height * n + mouth_shift[1];
    let half_mouth = id.mouth_width * n / 2.0;
    let frame_r = id.eye_radius + 1.8;

    let mut img = Tensor::zeros(&IMAGE_SHAPE);
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for i in 0..IMAGE_SIZE {
        for j in 0..IMAGE_SIZE {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let t = y / n;
            let mut px: [f64; 3] = std::array::from_fn(|c| id.background_top[c] * (1.0 - t) + id.background_bottom[c] * t);
            let q = ((x - fcx) / fax).hypot((y - fcy) / fay);
            blend(&mut px, id.skin, coverage((q - 1.0) * fax.min(fay)));
            for &ex in &eyes {
                let d = (x - ex).hypot(y - eye_y);
                blend(&mut px, EYE_COLOR, coverage(d - id.eye_radius));
                if id.tag {
                    blend(&mut px, FRAME_COLOR, coverage((d - frame_r).abs() - 0.6));
                }
            }
            if id.tag && (y - eye_y).abs() < 0.6 && x > eyes[0] + frame_r && x < eyes[1] - frame_r {
                blend(&mut px, FRAME_COLOR, 1.0);
            }
            let u = (x - mouth_x) / half_mouth;
            if u.abs() <= 1.0 {
                let curve = mouth_y - id.mouth_curvature * n * u * u;
                blend(&mut px, MOUTH_COLOR, coverage((y - curve).abs() - 0.7));
            }
            for (c, p) in px.iter().enumerate() {
                let v = p + brightness + 0.02 * rng::normal(&mut s);
                img.data_mut()[c * plane + i * IMAGE_SIZE + j] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Stable key of an identity, so variation streams differ across identities.
fn id_key(id: &IdentityParams) -> u64 {
    id.face_center.iter().chain(&id.face_axes).chain(&id.skin).fold(0u64, |acc, v| rng::derive(acc, v.to_bits()))
}

/// Identity of one rendered image: `(identity seed, variation seed)`.
pub type RenderKey = (u64, u64);

#[derive(Clone, Debug)]
pub struct VerificationPair {
    pub first: Image,
    pub second: Image,
    /// True when both images come from the same identity.
    pub same: bool,
    pub first_key: RenderKey,
    pub second_key: RenderKey,
}

/// Samples `count / 2` positive and `count / 2` negative pairs.
///
/// Every image is `render_face(gen_identity(id), variation)` with `id` from
/// `identities` and `variation` from `variations`; the two sides of a pair
/// are never the same render.
pub fn make_pairs(identities: &[u64], variations: &[u64], count: usize, pair_seed: u64) -> Result<Vec<VerificationPair>> {
    if identities.len() < 2 {
        return Err(Error::InvalidConfig("pairs need at least two identities".into()));
    }
    if !count.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("pair count {count} must be even")));
    }
    if count > 0 && variations.len() < 2 {
        return Err(Error::InvalidConfig("positive pairs need at least two variations per identity".into()));
    }
    let m = count / 2;
    let mut s = rng::stream(pair_seed, 0x9A1);
    let mut keys = Vec::with_capacity(count);
    for k in 0..count {
        let pick = |s: &mut Stream, n: usize| rand::Rng::random_range(s, 0..n);
        let same = k < m;
        let a = pick(&mut s, identities.len());
        let b = if same { a } else { (a + 1 + pick(&mut s, identities.len() - 1)) % identities.len() };
        let va = pick(&mut s, variations.len());
        let vb = if same { (va + 1 + pick(&mut s, variations.len() - 1)) % variations.len() } else { pick(&mut s, variations.len()) };
        keys.push(((identities[a], variations[va]), (identities[b], variations[vb]), same));
    }
    let order = rng::permutation(&mut s, count);
    Ok(order
        .into_iter()
        .map(|i| {
            let (ka, kb, same) = keys[i];
            VerificationPair { first: render_key(ka), second: render_key(kb), same, first_key: ka, second_key: kb }
        })
        .collect())
}

pub fn render_key((identity, variation): RenderKey) -> Image {
    render_face(&gen_identity(identity), variation)
}

/// Preprocessing transform applied to images before they reach a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AugmentMode {
    None,
    RandomNoise {
        sigma: f64,
    },
    RandomAffine(AffineBounds),
    /// Affine warp followed by noise.
    Mix {
        affine: AffineBounds,
        sigma: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineBounds {
    pub max_rotation_deg: f64,
    pub max_translation_px: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl AffineBounds {
    pub const DEFAULT: AffineBounds = AffineBounds { max_rotation_deg: 10.0, max_translation_px: 2.0, scale_min: 0.95, scale_max: 1.05 };

    pub const IDENTITY: AffineBounds = AffineBounds { max_rotation_deg: 0.0, max_translation_px: 0.0, scale_min: 1.0, scale_max: 1.0 };
}

pub const DEFAULT_AUGMENT_SIGMA: f64 = 0.1;

impl AugmentMode {
    pub fn default_noise() -> Self {
        AugmentMode::RandomNoise { sigma: DEFAULT_AUGMENT_SIGMA }
    }

    pub fn default_affine() -> Self {
        AugmentMode::RandomAffine(AffineBounds::DEFAULT)
    }

    pub fn default_mix() -> Self {
        AugmentMode::Mix { affine: AffineBounds::DEFAULT, sigma: DEFAULT_AUGMENT_SIGMA }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AugmentMode::None => "none",
            AugmentMode::RandomNoise { .. } => "noise",
            AugmentMode::RandomAffine(_) => "affine",
            AugmentMode::Mix { .. } => "mix",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_sigma = |s: f64| {
            if s >= 0.0 && s.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("augmentation sigma {s} must be >= 0")))
            }
        };
        let check_affine = |a: &AffineBounds| {
            if a.max_rotation_deg >= 0.0 && a.max_translation_px >= 0.0 && a.scale_min <= 1.0 && a.scale_max >= 1.0 && a.scale_min > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("invalid affine bounds {a:?}")))
            }
        };
        match self {
            AugmentMode::None => Ok(()),
            AugmentMode::RandomNoise { sigma } => check_sigma(*sigma),
            AugmentMode::RandomAffine(a) => check_affine(a),
            AugmentMode::Mix { affine, sigma } => check_affine(affine).and(check_sigma(*sigma)),
        }
    }
}

/// Bilinear resampling map: each output pixel reads four weighted source pixels.
#[derive(Clone, Debug)]
struct Warp {
    taps: Vec<[(usize, f64); 4]>,
}

impl Warp {
    fn new(h: usize, w: usize, rotation_rad: f64, translation: [f64; 2], scale: f64) -> Self {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = rotation_rad.sin_cos();
        let mut taps = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                let px = j as f64 - cx - translation[0];
                let py = i as f64 - cy - translation[1];
                // inverse of rotate-then-scale about the centre
                let sx = (cos * px + sin * py) / scale + cx;
                let sy = (-sin * px + cos * py) / scale + cy;
                let sx = sx.clamp(0.0, (w - 1) as f64);
                let sy = sy.clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                taps.push([
                    (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                    (y0 * w + x1, fx * (1.0 - fy)),
                    (y1 * w + x0, (1.0 - fx) * fy),
                    (y1 * w + x1, fx * fy),
                ]);
            }
        }
        Self { taps }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let plane = self.taps.len();
        let mut out = Tensor::zeros(x.shape());
        for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            for (d, taps) in dst.iter_mut().zip(&self.taps) {
                *d = taps.iter().map(|&(k, wt)| wt * src[k]).sum();
            }
        }
        out
    }

    fn transpose(&self, g: &Tensor) -> Tensor {
        let plane = self.taps.len();
        let mut out = Tensor::zeros(g.shape());
        for (src, dst) in g.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            for (gv, taps) in src.iter().zip(&self.taps) {
                for &(k, wt) in taps {
                    dst[k] += wt * gv;
                }
            }
        }
        out
    }
}

/// One realized draw of an augmentation, differentiable w.r.t. its input.
#[derive(Clone, Debug)]
pub struct AugmentDraw {
    warp: Option<Warp>,
    noise: Option<Tensor>,
}

impl AugmentDraw {
    pub fn sample(mode: &AugmentMode, shape: &[usize], seed: u64) -> Result<Self> {
        mode.validate()?;
        let mut s = rng::stream(seed, 0xA46);
        let (h, w) = match *shape {
            [_, h, w] => (h, w),
            _ => return Err(Error::InvalidShape(format!("augmentation needs [C, H, W], got {shape:?}"))),
        };
        let warp_from = |a: &AffineBounds, s: &mut Stream| {
            let rot = rng::uniform(s, -a.max_rotation_deg, a.max_rotation_deg) * PI / 180.0;
            let t = [
                rng::uniform(s, -a.max_translation_px, a.max_translation_px),
                rng::uniform(s, -a.max_translation_px, a.max_translation_px),
            ];
            let scale = rng::uniform(s, a.scale_min, a.scale_max);
            Warp::new(h, w, rot, t, scale)
        };
        let noise_from = |sigma: f64, s: &mut Stream| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| sigma * rng::normal(s)).collect()).expect("shape")
        };
        Ok(match mode {
            AugmentMode::None => Self { warp: None, noise: None },
            AugmentMode::RandomNoise { sigma } => Self { warp: None, noise: (*sigma > 0.0).then(|| noise_from(*sigma, &mut s)) },
            AugmentMode::RandomAffine(a) => Self { warp: Some(warp_from(a, &mut s)), noise: None },
            AugmentMode::Mix { affine, sigma } => {
                let warp = warp_from(affine, &mut s);
                Self { warp: Some(warp), noise: (*sigma > 0.0).then(|| noise_from(*sigma, &mut s)) }
            }
        })
    }

    pub fn is_identity(&self) -> bool {
        self.warp.is_none() && self.noise.is_none()
    }

    pub fn apply(&self, x: &Image) -> Image {
        let warped = match &self.warp {
            Some(w) => w.apply(x),
            None => x.clone(),
        };
        match &self.noise {
            Some(n) => warped.zip_map(n, |a, b| (a + b).clamp(0.0, 1.0)).expect("same shape"),
            None => warped,
        }
    }

    /// Gradient w.r.t. the input of [`AugmentDraw::apply`] at `x`.
    pub fn backward(&self, x: &Image, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        let warped = self.warp.as_ref().map(|w| w.apply(x));
        if let Some(n) = &self.noise {
            let base = warped.as_ref().unwrap_or(x);
            for ((gv, &b), &nv) in g.data_mut().iter_mut().zip(base.data()).zip(n.data()) {
                let v = b + nv;
                if v <= 0.0 || v >= 1.0 {
                    *gv = 0.0;
                }
            }
        }
        match &self.warp {
            Some(w) => w.transpose(&g),
            None => g,
        }
    }
}

/// Applies `mode` with the randomness of `draw_seed`.
pub fn augment(image: &Image, mode: &AugmentMode, draw_seed: u64) -> Result<Image> {
    Ok(AugmentDraw::sample(mode, image.shape(), draw_seed)?.apply(image))
}

/// Binary PPM (P6, maxval 255).
pub fn ppm_encode(image: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::InvalidShape(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    for p in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn ppm_decode(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::BadMagic { format: "PPM" });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Header("cannot parse PPM dimensions".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Header(format!("PPM maxval {maxval} unsupported")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Header("PPM dimensions must be positive".into()));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Truncated("PPM header".into()));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let plane = w * h;
    if payload.len() < 3 * plane {
        return Err(Error::Truncated(format!("PPM payload ({} of {} bytes)", payload.len(), 3 * plane)));
    }
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = payload[3 * p + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes `<identity>_<variation>.ppm` files into `dir`.
pub fn export_dataset(dir: &Path, items: &[(RenderKey, Image)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for ((id, var), img) in items {
        fs::write(dir.join(format!("{id}_{var}.ppm")), ppm_encode(img)?)?;
    }
    Ok(())
}

/// Reads every `<identity>_<variation>.ppm` in `dir`, sorted by key.
pub fn import_dataset(dir: &Path) -> Result<Vec<(RenderKey, Image)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(stem) = path.extension().filter(|e| *e == "ppm").and(path.file_stem()).and_then(|s| s.to_str()) else {
            continue;
        };
        let Some((a, b)) = stem.split_once('_') else { continue };
        let (Ok(id), Ok(var)) = (a.parse(), b.parse()) else { continue };
        out.push(((id, var), ppm_decode(&fs::read(&path)?)?));
    }
    out.sort_by_key(|(k, _)| *k);
    Ok(out)
}
