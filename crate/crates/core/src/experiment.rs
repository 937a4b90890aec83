//! Config-driven experiment suite.
//!
//! A [`Lab`] holds everything the experiments share: the synthetic dataset,
//! the trained recognizers and a cache of protected images. Each registered
//! experiment turns the lab into a [`Table`] and a handful of PPM exports.
//! All randomness is derived from the master seed, and parallel work is
//! collected in index order, so reruns are byte-identical.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttributeProbe};
use crate::data::{self, AugmentMode, VerificationPair};
use crate::error::{Error, Result};
use crate::metrics::{self, Cell, Table, UpParams};
use crate::model::{Model, ModelSpec, DEFAULT_SPLIT};
use crate::pmt::{self, InitMode, KernelSpec, PmtConfig};
use crate::rng;
use crate::tensor::Image;
use crate::train::{self, TrainConfig};

pub const EXPERIMENTS: [&str; 8] =
    ["exp-init", "exp-augment", "exp-kernel", "exp-recon", "exp-abuse", "exp-scale", "exp-robust", "exp-ablation"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Widths (16, 32, 64), 64-d embedding.
    Toy,
    /// Widths (8, 24, 48), 32-d embedding.
    Alternate,
}

impl Arch {
    pub fn spec(self, identities: usize) -> ModelSpec {
        match self {
            Arch::Toy => ModelSpec::toy_recognizer(Some(identities)),
            Arch::Alternate => ModelSpec::toy_alternate(Some(identities)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub arch: Arch,
    pub seed: u64,
}

impl ModelEntry {
    fn new(name: &str, arch: Arch, seed: u64) -> Self {
        Self { name: name.into(), arch, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub identities: usize,
    /// Training renders per identity.
    pub renders: usize,
    /// Extra renders per identity reserved for verification pairs.
    pub held_out_renders: usize,
    pub pairs: usize,
    /// Images protected for the headline experiments (first images of the
    /// first pairs).
    pub test_images: usize,
    /// Images used by the configuration sweeps.
    pub sweep_images: usize,
    /// Identities (disjoint from the recognizer's) the attribute probe is
    /// trained on.
    pub probe_identities: usize,
    pub probe_renders: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            identities: 16,
            renders: 20,
            held_out_renders: 10,
            pairs: 100,
            test_images: 50,
            sweep_images: 20,
            probe_identities: 40,
            probe_renders: 8,
        }
    }
}

/// Everything an experiment run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub authorized: Vec<ModelEntry>,
    pub unauthorized: Vec<ModelEntry>,
    pub split: usize,
    pub training: TrainConfig,
    pub pmt: PmtConfig,
    pub attack: AttackConfig,
    pub decoder_training: TrainConfig,
    pub probe_training: TrainConfig,
    pub up: UpParams,
    /// Threshold of the verification metrics.
    pub kappa: f64,
    /// Standard deviation of the plain-noise baseline.
    pub noise_baseline: f64,
    /// Noise levels of the robustness and kernel sweeps.
    pub sigmas: Vec<f64>,
    /// Kernel half-widths of the kernel sweep.
    pub kernel_lengths: Vec<usize>,
    /// Images exported as PPM per experiment row.
    pub export_images: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            authorized: vec![ModelEntry::new("auth_a", Arch::Toy, 1), ModelEntry::new("auth_b", Arch::Toy, 2)],
            unauthorized: vec![ModelEntry::new("unauth_a", Arch::Alternate, 3), ModelEntry::new("unauth_b", Arch::Alternate, 4)],
            split: DEFAULT_SPLIT,
            training: TrainConfig::default(),
            pmt: PmtConfig::default(),
            attack: AttackConfig::default(),
            decoder_training: attacks::default_decoder_training(),
            probe_training: TrainConfig::default(),
            up: UpParams::default(),
            kappa: metrics::DEFAULT_KAPPA,
            noise_baseline: 0.3,
            sigmas: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
            kernel_lengths: vec![1, 2, 3],
            export_images: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Loads a JSON config and applies top-level `key = JSON value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = match path {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?,
            None => serde_json::to_value(Self::default()).expect("config serializes"),
        };
        let obj = value.as_object_mut().ok_or_else(|| Error::InvalidConfig("config must be a JSON object".into()))?;
        for (key, raw) in overrides {
            let v = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
            obj.insert(key.clone(), v);
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if d.identities < 2 || d.renders == 0 || d.held_out_renders < 2 {
            return bad("need at least 2 identities, 1 training render and 2 held-out renders".into());
        }
        if d.pairs < 2 || !d.pairs.is_multiple_of(2) {
            return bad(format!("pair count {} must be even and positive", d.pairs));
        }
        if d.test_images == 0 || d.test_images > d.pairs || d.sweep_images == 0 || d.sweep_images > d.pairs {
            return bad(format!("test and sweep image counts must lie in 1..={}", d.pairs));
        }
        if d.probe_identities < 2 || d.probe_renders == 0 {
            return bad("the attribute probe needs at least 2 identities".into());
        }
        if self.authorized.is_empty() {
            return bad("at least one authorized model is required".into());
        }
        let mut names: Vec<&str> = self.all_entries().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("model names must be unique".into());
        }
        if !(self.kappa > -1.0 && self.kappa < 1.0) || !(self.noise_baseline >= 0.0) {
            return bad("kappa must lie in (-1, 1) and the noise baseline must be non-negative".into());
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0)) || self.kernel_lengths.contains(&0) {
            return bad("sweep noise levels must be >= 0 and kernel lengths >= 1".into());
        }
        let split_max = ModelSpec::toy_recognizer(None).layers.len();
        if self.split == 0 || self.split >= split_max {
            return bad(format!("split {} must lie in 1..{split_max}", self.split));
        }
        self.training.validate()?;
        self.decoder_training.validate()?;
        self.probe_training.validate()?;
        self.pmt.validate()?;
        self.attack.validate()?;
        self.up.validate()
    }

    fn all_entries(&self) -> impl Iterator<Item = &ModelEntry> {
        self.authorized.iter().chain(&self.unauthorized)
    }
}

/// A trained recognizer and its role in the experiments.
#[derive(Clone, Debug)]
pub struct NamedModel {
    pub name: String,
    pub authorized: bool,
    pub model: Model,
}

impl NamedModel {
    pub fn role(&self) -> &'static str {
        if self.authorized {
            "authorized"
        } else {
            "unauthorized"
        }
    }
}

const KEY_IDENTITY: u64 = 0x1D5;
const KEY_PAIRS: u64 = 0x9A5;
const KEY_MODEL: u64 = 0x30D;
const KEY_PMT: u64 = 0x97;
const KEY_NOISE: u64 = 0x4015;
const KEY_ATTACK: u64 = 0xA7C;
const KEY_UP: u64 = 0x0B;

type ProtectKey = (String, usize);

/// Identity seeds and the labelled training renders of `config`.
pub fn training_set(config: &ExperimentConfig) -> (Vec<u64>, Vec<(Image, usize)>) {
    let d = &config.dataset;
    let identity_seeds: Vec<u64> = (0..d.identities).map(|i| rng::derive_path(config.seed, &[KEY_IDENTITY, i as u64])).collect();
    let train_set = identity_seeds
        .par_iter()
        .enumerate()
        .flat_map_iter(|(label, &id)| {
            let params = data::gen_identity(id);
            (0..d.renders as u64).map(move |v| (data::render_face(&params, v), label))
        })
        .collect();
    (identity_seeds, train_set)
}

/// Verification pairs drawn from renders held out of training.
pub fn test_pairs(config: &ExperimentConfig, identity_seeds: &[u64]) -> Result<Vec<VerificationPair>> {
    let d = &config.dataset;
    let held_out: Vec<u64> = (d.renders..d.renders + d.held_out_renders).map(|v| v as u64).collect();
    data::make_pairs(identity_seeds, &held_out, d.pairs, rng::derive(config.seed, KEY_PAIRS))
}

/// Seed of the PMT run on test image `index`.
pub fn pmt_seed(master: u64, pmt_seed: u64, index: usize) -> u64 {
    rng::derive_path(master, &[KEY_PMT, pmt_seed, index as u64])
}

/// Trains the recognizer described by `entry` on `train_set`.
pub fn train_entry(config: &ExperimentConfig, entry: &ModelEntry, train_set: &[(Image, usize)]) -> Result<Model> {
    let cfg = TrainConfig { seed: rng::derive_path(config.seed, &[KEY_MODEL, entry.seed]), ..config.training.clone() };
    Ok(train::train_recognizer(&entry.arch.spec(config.dataset.identities), train_set, &cfg)?.model)
}

/// Shared state of an experiment run.
pub struct Lab {
    pub config: ExperimentConfig,
    pub identity_seeds: Vec<u64>,
    pub train_set: Vec<(Image, usize)>,
    pub pairs: Vec<VerificationPair>,
    pub models: Vec<NamedModel>,
    protected: Mutex<HashMap<ProtectKey, Arc<Image>>>,
    decoder: OnceLock<Model>,
    probe: OnceLock<AttributeProbe>,
}

impl Lab {
    /// Generates the dataset and trains every configured recognizer.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (identity_seeds, train_set) = training_set(&config);
        let pairs = test_pairs(&config, &identity_seeds)?;
        let mut models = Vec::new();
        for (entry, authorized) in config.authorized.iter().map(|e| (e, true)).chain(config.unauthorized.iter().map(|e| (e, false))) {
            models.push(NamedModel { name: entry.name.clone(), authorized, model: train_entry(&config, entry, &train_set)? });
        }
        Ok(Self {
            config,
            identity_seeds,
            train_set,
            pairs,
            models,
            protected: Mutex::new(HashMap::new()),
            decoder: OnceLock::new(),
            probe: OnceLock::new(),
        })
    }

    pub fn authorized(&self) -> impl Iterator<Item = &NamedModel> {
        self.models.iter().filter(|m| m.authorized)
    }

    pub fn unauthorized(&self) -> impl Iterator<Item = &NamedModel> {
        self.models.iter().filter(|m| !m.authorized)
    }

    /// Shallow part of the `i`-th authorized model.
    pub fn shallow(&self, i: usize) -> Result<Model> {
        let m = self.authorized().nth(i).ok_or_else(|| Error::InvalidConfig(format!("no authorized model #{i}")))?;
        Ok(m.model.split(self.config.split)?.shallow)
    }

    /// The first images of the first `n` pairs.
    pub fn originals(&self, n: usize) -> Vec<Image> {
        self.pairs.iter().take(n).map(|p| p.first.clone()).collect()
    }

    /// Protects the first `n` test images against the authorized models
    /// with indices `authorized`, memoized per image.
    pub fn protect(&self, cfg: &PmtConfig, authorized: &[usize], n: usize) -> Result<Vec<Image>> {
        let key = serde_json::to_string(&(cfg, authorized)).expect("config serializes");
        let shallows: Vec<Model> = authorized.iter().map(|&i| self.shallow(i)).collect::<Result<_>>()?;
        let out: Vec<Arc<Image>> = (0..n)
            .into_par_iter()
            .map(|i| {
                if let Some(img) = self.protected.lock().expect("cache lock").get(&(key.clone(), i)) {
                    return Ok(img.clone());
                }
                let per_image = PmtConfig { seed: pmt_seed(self.config.seed, cfg.seed, i), ..cfg.clone() };
                let img = Arc::new(pmt::pmt_protect_multi(&self.pairs[i].first, &shallows, &per_image)?.image);
                self.protected.lock().expect("cache lock").insert((key.clone(), i), img.clone());
                Ok(img)
            })
            .collect::<Result<_>>()?;
        Ok(out.into_iter().map(|a| (*a).clone()).collect())
    }

    /// The plain-noise baseline of the first `n` test images.
    pub fn noisy(&self, n: usize) -> Result<Vec<Image>> {
        let mode = AugmentMode::RandomNoise { sigma: self.config.noise_baseline };
        (0..n).map(|i| data::augment(&self.pairs[i].first, &mode, rng::derive_path(self.config.seed, &[KEY_NOISE, i as u64]))).collect()
    }

    /// Black-box decoder trained on clean shallow features of the training
    /// images of the first authorized model.
    pub fn decoder(&self) -> Result<&Model> {
        if let Some(d) = self.decoder.get() {
            return Ok(d);
        }
        let shallow = self.shallow(0)?;
        let pairs: Vec<_> = self.train_set.par_iter().map(|(x, _)| Ok((shallow.forward(x)?, x.clone()))).collect::<Result<_>>()?;
        let spec = attacks::default_decoder_spec(shallow.spec().shapes()?.last().expect("non-empty shallow"))?;
        let cfg = TrainConfig {
            seed: rng::derive(self.config.seed, self.config.decoder_training.seed ^ 0xDEC),
            ..self.config.decoder_training.clone()
        };
        let trained = attacks::train_decoder(&pairs, &spec, &cfg)?;
        Ok(self.decoder.get_or_init(|| trained.model))
    }

    /// Attribute probe trained on identities disjoint from the recognizers'.
    pub fn probe(&self) -> Result<&AttributeProbe> {
        if let Some(p) = self.probe.get() {
            return Ok(p);
        }
        let d = &self.config.dataset;
        let samples: Vec<(Image, bool)> = (0..d.probe_identities)
            .into_par_iter()
            .flat_map_iter(|i| {
                let params = data::gen_identity(rng::derive_path(self.config.seed, &[KEY_IDENTITY, 0xA77, i as u64]));
                (0..d.probe_renders as u64).map(move |v| (data::render_face(&params, v), params.tag))
            })
            .collect();
        let cfg = TrainConfig {
            seed: rng::derive(self.config.seed, self.config.probe_training.seed ^ 0xA77),
            ..self.config.probe_training.clone()
        };
        let probe = attacks::train_attribute_probe(&samples, &cfg)?;
        Ok(self.probe.get_or_init(|| probe))
    }

    /// Tags of the first `n` test images.
    pub fn test_tags(&self, n: usize) -> Vec<bool> {
        self.pairs.iter().take(n).map(|p| data::gen_identity(p.first_key.0).tag).collect()
    }

    fn up(&self, sigma: f64) -> UpParams {
        UpParams { sigma, seed: rng::derive(self.config.seed, KEY_UP), ..self.config.up.clone() }
    }

    fn pairs(&self, n: usize) -> &[VerificationPair] {
        &self.pairs[..n]
    }

    /// Mean protected accuracy over the unauthorized models.
    fn unauthorized_accuracy(&self, protected: &[Image]) -> Result<f64> {
        let accs: Vec<f64> = self
            .unauthorized()
            .map(|m| metrics::protected_accuracy(&m.model, self.pairs(protected.len()), protected, self.config.kappa))
            .collect::<Result<_>>()?;
        Ok(if accs.is_empty() { f64::NAN } else { accs.iter().sum::<f64>() / accs.len() as f64 })
    }

    fn authorized_accuracy(&self, protected: &[Image]) -> Result<f64> {
        metrics::protected_accuracy(&self.models[0].model, self.pairs(protected.len()), protected, self.config.kappa)
    }

    fn export(&self, name: &str, tag: &str, images: &[Image]) -> Result<()> {
        let dir = self.config.output_dir.join(name);
        fs::create_dir_all(&dir)?;
        for (i, img) in images.iter().take(self.config.export_images).enumerate() {
            fs::write(dir.join(format!("{tag}_{i}.ppm")), data::ppm_encode(img)?)?;
        }
        Ok(())
    }
}

/// Runs the named experiment against `lab`, writing PPM exports.
pub fn run_in_lab(name: &str, lab: &Lab) -> Result<Table> {
    match name {
        "exp-init" => exp_init(lab),
        "exp-augment" => exp_augment(lab),
        "exp-kernel" => exp_kernel(lab),
        "exp-recon" => exp_recon(lab),
        "exp-abuse" => exp_abuse(lab),
        "exp-scale" => exp_scale(lab),
        "exp-robust" => exp_robust(lab),
        "exp-ablation" => exp_ablation(lab),
        other => Err(Error::UnknownExperiment(other.to_string())),
    }
}

pub fn check_name(name: &str) -> Result<()> {
    if EXPERIMENTS.contains(&name) {
        Ok(())
    } else {
        Err(Error::UnknownExperiment(name.to_string()))
    }
}

/// Builds a lab from `config`, runs the experiment and writes
/// `<output_dir>/<name>.csv`.
pub fn run_experiment(name: &str, config: ExperimentConfig) -> Result<Table> {
    check_name(name)?;
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    let lab = Lab::new(config)?;
    let table = run_in_lab(name, &lab)?;
    table.emit(&csv_path(&lab.config.output_dir, name))?;
    Ok(table)
}

pub fn csv_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.csv"))
}

fn onoff(v: bool) -> Cell {
    Cell::from(if v { "on" } else { "off" })
}

/// One init mode per row, default PMT otherwise.
fn exp_init(lab: &Lab) -> Result<Table> {
    let n = lab.config.dataset.test_images;
    let originals = lab.originals(n);
    let mut t = Table::new(&["init", "ssim", "psnr", "cos", "auth_acc", "unauth_acc"]);
    let auth = &lab.models[0].model;
    t.push(vec![
        "clean".into(),
        1.0.into(),
        metrics::PSNR_CAP.into(),
        1.0.into(),
        metrics::clean_accuracy(auth, lab.pairs(n), lab.config.kappa)?.into(),
        lab.unauthorized_accuracy(&originals)?.into(),
    ])?;
    lab.export("exp-init", "original", &originals)?;
    for mode in [InitMode::GaussianNoise, InitMode::RandomPermute, InitMode::GaussianBlur] {
        let cfg = PmtConfig { init: mode, ..lab.config.pmt.clone() };
        let prot = lab.protect(&cfg, &[0], n)?;
        t.push(vec![
            mode.label().into(),
            metrics::mean_ssim(&prot, &originals)?.into(),
            metrics::mean_psnr(&prot, &originals)?.into(),
            metrics::mean_cos(auth, &prot, &originals)?.into(),
            lab.authorized_accuracy(&prot)?.into(),
            lab.unauthorized_accuracy(&prot)?.into(),
        ])?;
        lab.export("exp-init", mode.label(), &prot)?;
    }
    Ok(t)
}

fn aggregation_layers(on: bool) -> Vec<usize> {
    if on {
        pmt::DEFAULT_AGGREGATE_LAYERS.to_vec()
    } else {
        Vec::new()
    }
}

/// Augmentation mode × layer aggregation grid.
fn exp_augment(lab: &Lab) -> Result<Table> {
    let n = lab.config.dataset.sweep_images;
    let originals = lab.originals(n);
    let auth = &lab.models[0].model;
    let up = lab.up(lab.config.up.sigma);
    let mut t = Table::new(&["augment", "aggregation", "ssim", "auth_acc", "unauth_acc", "up_utility", "up_privacy", "up_total"]);
    let modes = [AugmentMode::None, AugmentMode::default_noise(), AugmentMode::default_affine(), AugmentMode::default_mix()];
    for mode in modes {
        for agg in [false, true] {
            let cfg = PmtConfig { augment: mode.clone(), aggregate_layers: aggregation_layers(agg), ..lab.config.pmt.clone() };
            let prot = lab.protect(&cfg, &[0], n)?;
            let score = metrics::up_metric(&originals, &prot, auth, &up)?;
            t.push(vec![
                mode.label().into(),
                onoff(agg),
                metrics::mean_ssim(&prot, &originals)?.into(),
                lab.authorized_accuracy(&prot)?.into(),
                lab.unauthorized_accuracy(&prot)?.into(),
                score.utility.into(),
                score.privacy.into(),
                score.total.into(),
            ])?;
            lab.export("exp-augment", &format!("{}_{}", mode.label(), if agg { "agg" } else { "final" }), &prot)?;
        }
    }
    Ok(t)
}

/// Kernel type and length sweep, with UP over the configured noise levels.
fn exp_kernel(lab: &Lab) -> Result<Table> {
    let n = lab.config.dataset.sweep_images;
    let originals = lab.originals(n);
    let auth = &lab.models[0].model;
    let mut kernels = vec![KernelSpec::None];
    for &k in &lab.config.kernel_lengths {
        kernels.push(KernelSpec::Linear { k });
        kernels.push(KernelSpec::Gaussian { k });
    }
    let mut t = Table::new(&["kernel", "sigma", "ssim", "auth_acc", "unauth_acc", "up_utility", "up_privacy", "up_total"]);
    for kernel in kernels {
        let cfg = PmtConfig { kernel, ..lab.config.pmt.clone() };
        let prot = lab.protect(&cfg, &[0], n)?;
        let ssim = metrics::mean_ssim(&prot, &originals)?;
        let (aa, ua) = (lab.authorized_accuracy(&prot)?, lab.unauthorized_accuracy(&prot)?);
        for &sigma in &lab.config.sigmas {
            let score = metrics::up_metric(&originals, &prot, auth, &lab.up(sigma))?;
            t.push(vec![
                kernel.label().into(),
                sigma.into(),
                ssim.into(),
                aa.into(),
                ua.into(),
                score.utility.into(),
                score.privacy.into(),
                score.total.into(),
            ])?;
        }
        lab.export("exp-kernel", &kernel.label(), &prot)?;
    }
    Ok(t)
}

/// White-box and decoder reconstructions from clean, noisy and protected
/// inputs.
pub fn exp_recon(lab: &Lab) -> Result<Table> {
    let n = lab.config.dataset.test_images;
    let originals = lab.originals(n);
    let shallow = lab.shallow(0)?;
    let auth = &lab.models[0].model;
    let decoder = lab.decoder()?;
    let inputs = [("clean", originals.clone()), ("noise", lab.noisy(n)?), ("pmt", lab.protect(&lab.config.pmt, &[0], n)?)];
    let mut t = Table::new(&["input", "attack", "ssim", "psnr", "cos", "srra"]);
    for (label, images) in &inputs {
        let feats: Vec<_> = images.par_iter().map(|x| shallow.forward(x)).collect::<Result<_>>()?;
        let whitebox: Vec<Image> = feats
            .par_iter()
            .enumerate()
            .map(|(i, z)| {
                let cfg = AttackConfig {
                    seed: rng::derive_path(lab.config.seed, &[KEY_ATTACK, lab.config.attack.seed, i as u64]),
                    ..lab.config.attack.clone()
                };
                attacks::whitebox_reconstruct(z, &shallow, &cfg)
            })
            .collect::<Result<_>>()?;
        let blackbox: Vec<Image> = feats.par_iter().map(|z| attacks::modelbased_reconstruct(decoder, z)).collect::<Result<_>>()?;
        for (attack, recon) in [("whitebox", &whitebox), ("blackbox", &blackbox)] {
            t.push(vec![
                (*label).into(),
                attack.into(),
                metrics::mean_ssim(recon, &originals)?.into(),
                metrics::mean_psnr(recon, &originals)?.into(),
                metrics::mean_cos(auth, recon, &originals)?.into(),
                metrics::srra(&originals, recon, auth, lab.config.kappa)?.into(),
            ])?;
            lab.export("exp-recon", &format!("{label}_{attack}"), recon)?;
        }
        lab.export("exp-recon", &format!("{label}_input"), images)?;
    }
    Ok(t)
}

/// Accuracy of every model on images protected for each authorized model.
fn exp_abuse(lab: &Lab) -> Result<Table> {
    let n = lab.config.dataset.pairs;
    let mut t = Table::new(&["protected_for", "evaluated", "role", "acc"]);
    for m in &lab.models {
        t.push(vec![
            "clean".into(),
            m.name.as_str().into(),
            m.role().into(),
            metrics::clean_accuracy(&m.model, &lab.pairs, lab.config.kappa)?.into(),
        ])?;
    }
    for (i, a) in lab.authorized().enumerate() {
        let prot = lab.protect(&lab.config.pmt, &[i], n)?;
        for m in &lab.models {
            let role = if m.name == a.name { "authorized" } else { "unauthorized" };
            t.push(vec![
                a.name.as_str().into(),
                m.name.as_str().into(),
                role.into(),
                metrics::protected_accuracy(&m.model, &lab.pairs, &prot, lab.config.kappa)?.into(),
            ])?;
        }
        lab.export("exp-abuse", &a.name, &prot)?;
    }
    Ok(t)
}

/// Non-empty subsets of the authorized models in binary-counter order.
fn subsets(n: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1..1usize << n).map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect()).collect();
    out.sort_by_key(|s| s.len());
    out
}

/// Multi-model protection over every subset of the authorized models.
fn exp_scale(lab: &Lab) -> Result<Table> {
    let n = lab.config.dataset.test_images;
    let names: Vec<&str> = lab.authorized().map(|m| m.name.as_str()).collect();
    let mut t = Table::new(&["authorized_set", "evaluated", "role", "clean_acc", "acc"]);
    for subset in subsets(names.len()) {
        let label = subset.iter().map(|&i| names[i]).collect::<Vec<_>>().join("+");
        let prot = lab.protect(&lab.config.pmt, &subset, n)?;
        for m in &lab.models {
            let member = subset.iter().any(|&i| names[i] == m.name);
            t.push(vec![
                label.as_str().into(),
                m.name.as_str().into(),
                (if member { "authorized" } else { "unauthorized" }).into(),
                metrics::clean_accuracy(&m.model, lab.pairs(n), lab.config.kappa)?.into(),
                metrics::protected_accuracy(&m.model, lab.pairs(n), &prot, lab.config.kappa)?.into(),
            ])?;
        }
        lab.export("exp-scale", &label, &prot)?;
    }
    Ok(t)
}

/// UP of original and protected data across noise levels.
fn exp_robust(lab: &Lab) -> Result<Table> {
    let n = lab.config.dataset.test_images;
    let originals = lab.originals(n);
    let prot = lab.protect(&lab.config.pmt, &[0], n)?;
    let auth = &lab.models[0].model;
    let mut t = Table::new(&["data", "sigma", "kappa", "up_utility", "up_privacy", "up_total"]);
    for (label, images) in [("original", &originals), ("protected", &prot)] {
        for &sigma in &lab.config.sigmas {
            let up = lab.up(sigma);
            let score = metrics::up_metric(&originals, images, auth, &up)?;
            t.push(vec![label.into(), sigma.into(), up.kappa.into(), score.utility.into(), score.privacy.into(), score.total.into()])?;
        }
    }
    lab.export("exp-robust", "protected", &prot)?;
    Ok(t)
}

/// Configuration with each enhancement switched on or off.
pub fn ablation_config(base: &PmtConfig, augmentation: bool, smoothing: bool, aggregation: bool) -> PmtConfig {
    PmtConfig {
        augment: if augmentation { base.augment.clone() } else { AugmentMode::None },
        kernel: if smoothing { base.kernel } else { KernelSpec::None },
        aggregate_layers: if aggregation { base.aggregate_layers.clone() } else { Vec::new() },
        ..base.clone()
    }
}

/// The 2³ grid of augmentation, smoothing and aggregation.
fn exp_ablation(lab: &Lab) -> Result<Table> {
    let n = lab.config.dataset.sweep_images;
    let originals = lab.originals(n);
    let auth = &lab.models[0].model;
    let up = lab.up(lab.config.up.sigma);
    let mut base = lab.config.pmt.clone();
    if base.aggregate_layers.is_empty() {
        base.aggregate_layers = pmt::DEFAULT_AGGREGATE_LAYERS.to_vec();
    }
    let mut t =
        Table::new(&["augmentation", "smoothing", "aggregation", "ssim", "auth_acc", "unauth_acc", "up_utility", "up_privacy", "up_total"]);
    for mask in 0..8u8 {
        let (a, s, g) = (mask & 4 != 0, mask & 2 != 0, mask & 1 != 0);
        let cfg = ablation_config(&base, a, s, g);
        let prot = lab.protect(&cfg, &[0], n)?;
        let score = metrics::up_metric(&originals, &prot, auth, &up)?;
        t.push(vec![
            onoff(a),
            onoff(s),
            onoff(g),
            metrics::mean_ssim(&prot, &originals)?.into(),
            lab.authorized_accuracy(&prot)?.into(),
            lab.unauthorized_accuracy(&prot)?.into(),
            score.utility.into(),
            score.privacy.into(),
            score.total.into(),
        ])?;
        lab.export("exp-ablation", &format!("{}{}{}", a as u8, s as u8, g as u8), &prot)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_replace_top_level_keys() {
        let cfg = ExperimentConfig::load(None, &[("seed".into(), "9".into()), ("output_dir".into(), "elsewhere".into())]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert!(ExperimentConfig::load(None, &[("kappa".into(), "3".into())]).is_err());
        assert!(ExperimentConfig::load(None, &[("seed".into(), "\"x\"".into())]).is_err());
    }

    #[test]
    fn config_violations() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.pairs = 7;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.unauthorized[0].name = "auth_a".into();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.authorized.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_names_rejected() {
        assert!(matches!(check_name("exp-nope"), Err(Error::UnknownExperiment(_))));
        for name in EXPERIMENTS {
            check_name(name).unwrap();
        }
    }

    #[test]
    fn subset_order() {
        assert_eq!(subsets(2), vec![vec![0], vec![1], vec![0, 1]]);
        assert_eq!(subsets(3).len(), 7);
    }

    #[test]
    fn ablation_corners() {
        let base = PmtConfig::default();
        let none = ablation_config(&base, false, false, false);
        assert_eq!(none.augment, AugmentMode::None);
        assert_eq!(none.kernel, KernelSpec::None);
        assert!(none.aggregate_layers.is_empty());
        assert_eq!(ablation_config(&base, true, true, true), base);
    }
}
