//! `pmt`: command-line front end for the PMT experiment suite.
//!
//! Every subcommand reads one JSON [`ExperimentConfig`]; `--seed`, `--out`
//! and `--set key=value` override its top-level keys. Exit codes: 0 on
//! success, 2 for an unknown experiment, 3 for I/O failures, 4 for config
//! violations and 1 for anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pmt_core::experiment::{self, Arch, ExperimentConfig, ModelEntry, EXPERIMENTS};
use pmt_core::metrics::{self, Table};
use pmt_core::{attacks, data, pmt, weights, Error, Image, Model, Result};

#[derive(Parser, Debug)]
#[command(name = "pmt", version, about = "Privacy minimization transformation experiments")]
struct Cli {
    /// JSON config file; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Top-level config override `key=value`, value parsed as JSON when possible.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic training set as PPM files.
    GenData,
    /// Train one recognizer and save its weights.
    Train {
        #[arg(long, value_enum, default_value = "toy")]
        arch: ArchArg,
        #[arg(long, default_value_t = 1)]
        model_seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Obfuscate an image for one or more authorized models.
    Protect {
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "toy")]
        arch: ArchArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the shallow features of the result (`.pmtw` tensor file).
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// White-box reconstruction from the shallow features of an image.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "toy")]
        arch: ArchArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare two images by SSIM, PSNR and embedding cosine.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "toy")]
        arch: ArchArg,
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
    },
    /// Run a registered experiment and write `<name>.csv`.
    Exp { name: String },
    /// Collect the experiment CSVs of the output directory into `report.md`.
    Report,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum ArchArg {
    Toy,
    Alternate,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Toy => Arch::Toy,
            ArchArg::Alternate => Arch::Alternate,
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::UnknownExperiment(_) => 2,
        Error::Io(_) => 3,
        Error::InvalidConfig(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    for raw in &cli.overrides {
        let (k, v) = raw.split_once('=').ok_or_else(|| Error::InvalidConfig(format!("override {raw:?} is not KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.out {
        overrides.push(("output_dir".into(), serde_json::to_string(out).expect("path serializes")));
    }
    ExperimentConfig::load(cli.config.as_deref(), &overrides)
}

fn read_image(path: &Path) -> Result<Image> {
    data::ppm_decode(&fs::read(path)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn load_model(path: &Path, arch: ArchArg, cfg: &ExperimentConfig) -> Result<Model> {
    let spec = Arch::from(arch).spec(cfg.dataset.identities);
    weights::deserialize_weights(&fs::read(path)?, &spec)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Exp { name } = &cli.command {
        experiment::check_name(name)?;
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData => {
            let (ids, train_set) = experiment::training_set(&cfg);
            let per = cfg.dataset.renders;
            let items: Vec<_> = train_set.into_iter().enumerate().map(|(i, (img, label))| ((ids[label], (i % per) as u64), img)).collect();
            let dir = cfg.output_dir.join("data");
            data::export_dataset(&dir, &items)?;
            println!("wrote {} images to {}", items.len(), dir.display());
        }
        Command::Train { arch, model_seed, output } => {
            let (_, train_set) = experiment::training_set(&cfg);
            let entry = ModelEntry { name: "cli".into(), arch: (*arch).into(), seed: *model_seed };
            let model = experiment::train_entry(&cfg, &entry, &train_set)?;
            let acc = pmt_core::train::classification_accuracy(&model, &train_set)?;
            write_file(output, &weights::serialize_weights(&model))?;
            println!("training accuracy {}", metrics::format_sig6(acc));
        }
        Command::Protect { models, arch, input, output, features } => {
            let x = read_image(input)?;
            let shallows: Vec<Model> =
                models.iter().map(|p| Ok(load_model(p, *arch, &cfg)?.split(cfg.split)?.shallow)).collect::<Result<_>>()?;
            let pcfg = pmt::PmtConfig { seed: experiment::pmt_seed(cfg.seed, cfg.pmt.seed, 0), ..cfg.pmt.clone() };
            let obf = pmt::pmt_protect_multi(&x, &shallows, &pcfg)?;
            write_file(output, &data::ppm_encode(&obf.image)?)?;
            if let Some(path) = features {
                let names: Vec<String> = (0..obf.features.len()).map(|i| format!("features.{i}")).collect();
                write_file(path, &weights::write_tensors(names.iter().map(String::as_str).zip(&obf.features)))?;
            }
            println!("ssim {}", metrics::format_sig6(metrics::ssim(&obf.image, &x)?));
        }
        Command::Attack { model, arch, input, output } => {
            let shallow = load_model(model, *arch, &cfg)?.split(cfg.split)?.shallow;
            let x = read_image(input)?;
            let z = shallow.forward(&x)?;
            let recon = attacks::whitebox_reconstruct(&z, &shallow, &cfg.attack)?;
            write_file(output, &data::ppm_encode(&recon)?)?;
            println!("ssim {}", metrics::format_sig6(metrics::ssim(&recon, &x)?));
        }
        Command::Eval { model, arch, original, candidate } => {
            let m = load_model(model, *arch, &cfg)?;
            let (a, b) = (read_image(original)?, read_image(candidate)?);
            let cos = metrics::cos_sim(&m.embed(&a)?, &m.embed(&b)?)?;
            let mut t = Table::new(&["ssim", "psnr", "cos", "match"]);
            t.push(vec![metrics::ssim(&a, &b)?.into(), metrics::psnr(&a, &b)?.into(), cos.into(), (cos > cfg.kappa).into()])?;
            print!("{}", t.to_csv());
        }
        Command::Exp { name } => {
            let path = experiment::csv_path(&cfg.output_dir, name);
            experiment::run_experiment(name, cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Report => {
            let path = write_report(&cfg.output_dir)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

/// Concatenates the experiment CSVs found in `dir` as Markdown tables.
fn write_report(dir: &Path) -> Result<PathBuf> {
    let mut out = String::from("# Experiment report\n");
    let mut found = 0;
    for name in EXPERIMENTS {
        let path = experiment::csv_path(dir, name);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(e) => return Err(e.into()),
        };
        found += 1;
        out.push_str(&format!("\n## {name}\n\n"));
        for (i, line) in text.lines().enumerate() {
            out.push_str(&format!("| {} |\n", line.replace(',', " | ")));
            if i == 0 {
                out.push_str(&format!("|{}\n", "---|".repeat(line.split(',').count())));
            }
        }
    }
    if found == 0 {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("no experiment CSVs in {}", dir.display()))));
    }
    let path = dir.join("report.md");
    fs::write(&path, out)?;
    Ok(path)
}
