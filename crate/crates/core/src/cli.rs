//! Command-line entry points. Every command resolves its options from an
//! optional JSON config file overlaid with flags, writes the resolved config
//! into its run directory and then executes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::harness::{cross_validate, evaluate, fit, gradcam, run_ablation, TrainConfig};
use crate::io::{self, create_dir, load_dataset, write_json, Dataset, Gray};
use crate::model::{random_sample, Ablation, EiciNet, ModelConfig, ModelSnapshot, Sample};
use crate::quantifier::QuantConfig;
use crate::synthgen::{GeneratorSpec, LabelRule};
use crate::{Error, Result};

// stdout may be a closed pipe; output is best effort
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// C = 4 on 8x8 inputs.
    Micro,
    /// C = 8 on 16x16 inputs.
    Desk,
    /// ResNet18-style encoders with C_fusion = 512.
    Large,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Micro => ModelConfig::micro(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Large => ModelConfig::large(),
        }
    }

    /// `(lr, epochs, batch)`.
    pub fn training(self) -> (f64, usize, usize) {
        match self {
            Preset::Micro | Preset::Desk => (0.05, 40, 8),
            Preset::Large => (1e-3, 100, 8),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Tab,
    Blob,
    Both,
}

impl From<Rule> for LabelRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::Tab => LabelRule::TabularThreshold,
            Rule::Blob => LabelRule::ImageBlob,
            Rule::Both => LabelRule::Both,
        }
    }
}

/// Options shared by file and flags. Unset fields fall through to the next
/// layer: flags, then the config file, then built-in defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Comma list of branches to disable: overall, ac, tpm, ecim, icim.
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Number of eyes to generate.
    #[arg(long)]
    pub n: Option<usize>,
    /// Label rule for generated data.
    #[arg(long, value_enum)]
    pub rule: Option<Rule>,
    /// Fraction of positives in generated data.
    #[arg(long)]
    pub positive_fraction: Option<f64>,
    /// Side of the generated slit-lamp surrogates.
    #[arg(long)]
    pub size: Option<usize>,
    /// Trained model snapshot (JSON).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Sample id for gradcam; all samples when omitted.
    #[arg(long)]
    pub id: Option<String>,
    /// Target class for gradcam.
    #[arg(long)]
    pub target: Option<usize>,
    /// Also write PNG heatmaps.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub png: Option<bool>,
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantConfig>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),*) => {
        RunConfig { $($f: $top.$f.or($base.$f),)* }
    };
}

impl RunConfig {
    /// Field-wise overlay: values set in `top` win.
    pub fn overlay(self, top: RunConfig) -> RunConfig {
        overlay!(
            self, top, data, out, seed, epochs, lr, batch, ablate, preset, folds, n, rule,
            positive_fraction, size, model, id, target, png, generator, quant
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn preset(&self) -> Preset {
        self.preset.unwrap_or(Preset::Desk)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn data(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| Error::Config("--data is required".into()))
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
    }

    /// Fills every default so the stored config replays exactly.
    pub fn resolve(mut self, command: Command) -> Self {
        let preset = self.preset();
        let (lr, epochs, batch) = preset.training();
        self.preset = Some(preset);
        self.seed = Some(self.seed());
        match command {
            Command::Gen => {
                self.n = Some(self.n.unwrap_or(139));
                self.rule = Some(self.rule.unwrap_or(Rule::Both));
                self.positive_fraction = Some(self.positive_fraction.unwrap_or(104.0 / 139.0));
                self.size = Some(self.size.unwrap_or(16));
            }
            Command::Quantify | Command::Gradcheck => {}
            Command::Train | Command::Eval | Command::Cv | Command::Ablate | Command::Gradcam => {
                self.lr = Some(self.lr.unwrap_or(lr));
                self.epochs = Some(self.epochs.unwrap_or(epochs));
                self.batch = Some(self.batch.unwrap_or(batch));
                self.ablate = Some(self.ablate.unwrap_or_default());
                self.folds = Some(self.folds.unwrap_or(5));
                if command == Command::Gradcam {
                    self.target = Some(self.target.unwrap_or(1));
                }
            }
        }
        self.quant = Some(self.quant.unwrap_or_default());
        self
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let (lr, epochs, batch) = self.preset().training();
        let cfg = TrainConfig {
            lr: self.lr.unwrap_or(lr),
            epochs: self.epochs.unwrap_or(epochs),
            batch_size: self.batch.unwrap_or(batch),
            seed: self.seed(),
            ablation: Ablation::parse_disabled(self.ablate.as_deref().unwrap_or(""))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Preset model adapted to the image shape found in the data.
    pub fn model_config(&self, data: &[Sample]) -> Result<ModelConfig> {
        let mut m = self.preset().model();
        m.ablation = Ablation::parse_disabled(self.ablate.as_deref().unwrap_or(""))?;
        if let Some(s) = data.first() {
            let (o, a) = (s.overall.shape(), s.ac.shape());
            m.overall.in_channels = o[0];
            (m.overall.input_height, m.overall.input_width) = (o[1], o[2]);
            m.ac.in_channels = a[0];
            (m.ac.input_height, m.ac.input_width) = (a[1], a[2]);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn generator(&self) -> GeneratorSpec {
        let mut spec = self.generator.clone().unwrap_or_default();
        spec.seed = self.seed();
        if let Some(r) = self.rule {
            spec.label_rule = r.into();
        }
        if let Some(f) = self.positive_fraction {
            spec.positive_fraction = f;
        }
        if let Some(s) = self.size {
            spec.slit_size = s;
        }
        spec
    }

    /// Hex digest of the resolved config without the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..12].to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Gen,
    Quantify,
    Train,
    Eval,
    Cv,
    Ablate,
    Gradcheck,
    Gradcam,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Quantify => "quantify",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Cv => "cv",
            Command::Ablate => "ablate",
            Command::Gradcheck => "gradcheck",
            Command::Gradcam => "gradcam",
        }
    }
}

#[derive(Debug, Args)]
struct Opts {
    /// JSON file with any of the flag values; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Gen(Opts),
    /// Quantify AS-OCT scans and backfill blank tabular columns.
    Quantify(Opts),
    /// Train on the whole dataset and save the model.
    Train(Opts),
    /// Evaluate a saved model.
    Eval(Opts),
    /// Stratified k-fold cross-validation.
    Cv(Opts),
    /// Six-row ablation table under cross-validation.
    Ablate(Opts),
    /// Finite-difference check of the full model gradient.
    Gradcheck(Opts),
    /// Grad-CAM heatmaps on the first AC observation image.
    Gradcam(Opts),
}

#[derive(Debug, Parser)]
#[command(name = "eici", version, about = "Anterior chamber inflammation diagnosis from slit-lamp, AS-OCT and clinical data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let (command, opts) = match cli.cmd {
        Cmd::Gen(o) => (Command::Gen, o),
        Cmd::Quantify(o) => (Command::Quantify, o),
        Cmd::Train(o) => (Command::Train, o),
        Cmd::Eval(o) => (Command::Eval, o),
        Cmd::Cv(o) => (Command::Cv, o),
        Cmd::Ablate(o) => (Command::Ablate, o),
        Cmd::Gradcheck(o) => (Command::Gradcheck, o),
        Cmd::Gradcam(o) => (Command::Gradcam, o),
    };
    let result = (|| {
        let base = match &opts.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        run(command, base.overlay(opts.run).resolve(command))
    })();
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_INVALID,
                _ => EXIT_FAILURE,
            }
        }
    }
}

/// `<out>/<command>-seed<seed>-<hash>`, created, with `config.json` inside.
fn run_dir(command: Command, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out()?.join(format!("{}-seed{}-{}", command.name(), cfg.seed(), cfg.hash()));
    create_dir(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load(cfg: &RunConfig) -> Result<Dataset> {
    load_dataset(cfg.data()?, &cfg.quant.unwrap_or_default())
}

fn load_model(cfg: &RunConfig) -> Result<EiciNet> {
    let path = cfg.model.as_deref().ok_or_else(|| Error::Config("--model is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let snap: ModelSnapshot =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    EiciNet::from_snapshot(&snap)
}

pub fn run(command: Command, cfg: RunConfig) -> Result<i32> {
    match command {
        Command::Gen => {
            let out = cfg.out()?;
            let spec = cfg.generator();
            create_dir(out)?;
            write_json(&out.join("config.json"), &cfg)?;
            let samples = io::gen_dataset(out, &spec, cfg.n.unwrap_or(139))?;
            let pos = samples.iter().filter(|s| s.label == 1).count();
            say!("wrote {} eyes ({pos} positive) to {}", samples.len(), out.display());
        }
        Command::Quantify => {
            let data = cfg.data()?;
            let results = io::quantify_dataset(data, &cfg.quant.unwrap_or_default())?;
            let csv = io::quant_csv(&results);
            let target = match &cfg.out {
                Some(out) => {
                    create_dir(out)?;
                    out.join("quantified.csv")
                }
                None => data.join("quantified.csv"),
            };
            write_text(&target, &csv)?;
            say!("{}", csv.trim_end());
        }
        Command::Train => {
            let data = load(&cfg)?;
            let tc = cfg.train_config()?;
            let mc = cfg.model_config(&data.samples)?;
            let dir = run_dir(command, &cfg)?;
            let refs: Vec<&Sample> = data.samples.iter().collect();
            let (model, outcome) = fit(&mc, &refs, &tc)?;
            let metrics = evaluate(&model, &refs)?;
            write_json(&dir.join("model.json"), &model.snapshot())?;
            write_json(&dir.join("train_metrics.json"), &metrics)?;
            let mut csv = String::from("epoch,loss\n");
            for (e, l) in outcome.loss_history.iter().enumerate() {
                csv.push_str(&format!("{e},{l:?}\n"));
            }
            write_text(&dir.join("loss.csv"), &csv)?;
            say!("training accuracy {:.4}; model at {}", metrics.accuracy, dir.join("model.json").display());
        }
        Command::Eval => {
            let data = load(&cfg)?;
            let model = load_model(&cfg)?;
            let dir = run_dir(command, &cfg)?;
            let refs: Vec<&Sample> = data.samples.iter().collect();
            let metrics = evaluate(&model, &refs)?;
            write_json(&dir.join("metrics.json"), &metrics)?;
            say!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
        }
        Command::Cv => {
            let data = load(&cfg)?;
            let tc = cfg.train_config()?;
            let mc = cfg.model_config(&data.samples)?;
            let dir = run_dir(command, &cfg)?;
            let report = cross_validate(&data.samples, &mc, &tc, cfg.folds.unwrap_or(5))?;
            write_json(&dir.join("metrics.json"), &report)?;
            write_text(&dir.join("loss.csv"), &report.loss_csv())?;
            let m = report.mean;
            say!(
                "mean accuracy {:.4} f1 {:.4} precision {:.4} recall {:.4}; results in {}",
                m.accuracy,
                m.f1,
                m.precision,
                m.recall,
                dir.display()
            );
        }
        Command::Ablate => {
            let data = load(&cfg)?;
            let tc = cfg.train_config()?;
            let mc = cfg.model_config(&data.samples)?;
            let dir = run_dir(command, &cfg)?;
            let table = run_ablation(&data.samples, &mc, &tc, cfg.folds.unwrap_or(5))?;
            write_json(&dir.join("ablation.json"), &table)?;
            let text = table.to_text();
            write_text(&dir.join("ablation.txt"), &text)?;
            say!("{}", text.trim_end());
        }
        Command::Gradcheck => {
            let mc = ModelConfig {
                ablation: Ablation::parse_disabled(cfg.ablate.as_deref().unwrap_or(""))?,
                ..cfg.preset().model()
            };
            let seed = cfg.seed();
            let a = random_sample(&mc, seed.wrapping_mul(2).wrapping_add(1), 0)?;
            let b = random_sample(&mc, seed.wrapping_mul(2).wrapping_add(2), 1)?;
            let mut net = EiciNet::new(mc, seed)?;
            net.fit_tabular([&a.record, &b.record])?;
            let report = net.grad_check(&[&a, &b], 1e-5)?;
            say!(
                "max relative error {:.3e} over {} coordinates (worst {} [{}])",
                report.max_rel_error,
                report.coordinates,
                report.worst_param.as_deref().unwrap_or("-"),
                report.worst_index
            );
            if cfg.out.is_some() {
                let dir = run_dir(command, &cfg)?;
                write_json(
                    &dir.join("gradcheck.json"),
                    &serde_json::json!({
                        "max_rel_error": report.max_rel_error,
                        "coordinates": report.coordinates,
                        "worst_param": report.worst_param,
                        "worst_index": report.worst_index,
                    }),
                )?;
            }
            return Ok(if report.max_rel_error <= GRADCHECK_TOLERANCE { EXIT_OK } else { EXIT_FAILURE });
        }
        Command::Gradcam => {
            let data = load(&cfg)?;
            let model = load_model(&cfg)?;
            let dir = run_dir(command, &cfg)?;
            let target = cfg.target.unwrap_or(1);
            let picked: Vec<&Sample> = match &cfg.id {
                Some(id) => vec![data.find(id).ok_or_else(|| Error::Config(format!("no sample {id:?}")))?.1],
                None => data.samples.iter().collect(),
            };
            for s in picked {
                let hm = gradcam(&model, s, target)?;
                let img = Gray::new(hm.width, hm.height, hm.to_u8())?;
                io::write_pgm(&dir.join(format!("{}_gradcam.pgm", s.id)), &img)?;
                if cfg.png.unwrap_or(false) {
                    io::write_png(&dir.join(format!("{}_gradcam.png", s.id)), &img)?;
                }
            }
            say!("heatmaps in {}", dir.display());
        }
    }
    Ok(EXIT_OK)
}
